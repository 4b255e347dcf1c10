#pragma once

#include <array>
#include <cmath>
#include <numbers>

#include "flowtint/errors.hpp"
#include "flowtint/image.hpp"
#include "flowtint/rng.hpp"

namespace flowtint {

// Parametric color transform standing in for a designed grading preset:
// hue rotation, then per-channel lift/gain/gamma, then saturation about luma.
struct Preset {
  std::array<double, 3> lift = {0.0, 0.0, 0.0};
  std::array<double, 3> gain = {1.0, 1.0, 1.0};
  std::array<double, 3> gamma = {1.0, 1.0, 1.0};
  double saturation = 1.0;
  double hue_deg = 0.0;

  bool operator==(const Preset&) const = default;

  bool is_identity() const {
    return lift == std::array<double, 3>{0, 0, 0} && gain == std::array<double, 3>{1, 1, 1} &&
           gamma == std::array<double, 3>{1, 1, 1} && saturation == 1.0 && hue_deg == 0.0;
  }

  void validate() const {
    for (int c = 0; c < 3; ++c) {
      if (!std::isfinite(lift[c]) || !std::isfinite(gain[c]) || !std::isfinite(gamma[c]))
        throw DataError("preset: non-finite parameter");
      if (gain[c] <= 0.0 || gamma[c] <= 0.0) throw DataError("preset: gain and gamma must be positive");
    }
    if (!std::isfinite(saturation) || !std::isfinite(hue_deg)) throw DataError("preset: non-finite parameter");
  }
};

// Luminance-preserving hue rotation matrix (rotation about the gray axis).
inline std::array<double, 9> hue_rotation_matrix(double degrees) {
  double a = degrees * std::numbers::pi / 180.0;
  double c = std::cos(a), s = std::sin(a);
  return {
      0.213 + c * 0.787 - s * 0.213, 0.715 - c * 0.715 - s * 0.715, 0.072 - c * 0.072 + s * 0.928,
      0.213 - c * 0.213 + s * 0.143, 0.715 + c * 0.285 + s * 0.140, 0.072 - c * 0.072 - s * 0.283,
      0.213 - c * 0.213 - s * 0.787, 0.715 - c * 0.715 + s * 0.715, 0.072 + c * 0.928 + s * 0.072,
  };
}

inline ImageTensor apply_preset(const ImageTensor& img, const Preset& p) {
  p.validate();
  if (p.is_identity()) return img;  // bit-exact identity
  ImageTensor out(img.h, img.w);
  auto m = hue_rotation_matrix(p.hue_deg);
  const bool rotate = p.hue_deg != 0.0;
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      double r = img.at(y, x, 0), g = img.at(y, x, 1), b = img.at(y, x, 2);
      if (rotate) {
        double r2 = m[0] * r + m[1] * g + m[2] * b;
        double g2 = m[3] * r + m[4] * g + m[5] * b;
        double b2 = m[6] * r + m[7] * g + m[8] * b;
        r = r2;
        g = g2;
        b = b2;
      }
      double ch[3] = {r, g, b};
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(p.gain[c] * (ch[c] + p.lift[c]), 0.0, 1.0);
        ch[c] = p.gamma[c] == 1.0 ? v : std::pow(v, p.gamma[c]);
      }
      if (p.saturation != 1.0) {
        double l = luma(ch[0], ch[1], ch[2]);
        for (int c = 0; c < 3; ++c) ch[c] = l + p.saturation * (ch[c] - l);
      }
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = std::clamp(ch[c], 0.0, 1.0);
    }
  }
  return out;
}

// Sampling ranges chosen so presets are visually distinct but clamping stays rare.
inline Preset random_preset(Rng& rng) {
  Preset p;
  for (int c = 0; c < 3; ++c) {
    p.lift[c] = rng.uniform(-0.1, 0.1);
    p.gain[c] = rng.uniform(0.7, 1.3);
    p.gamma[c] = rng.uniform(0.6, 1.6);
  }
  p.saturation = rng.uniform(0.5, 1.5);
  p.hue_deg = rng.uniform(-30.0, 30.0);
  return p;
}

}  // namespace flowtint
