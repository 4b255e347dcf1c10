#pragma once

#include <array>
#include <cmath>

#include "flowtint/dataforge.hpp"
#include "flowtint/errors.hpp"
#include "flowtint/image.hpp"

namespace flowtint {

constexpr double kPsnrCap = 99.0;  // finite, sortable stand-in for +inf
constexpr double kContentThreshold = 0.85;

inline double psnr(const ImageTensor& pred, const ImageTensor& target) {
  if (!pred.same_shape(target)) throw DimensionError("psnr: image dimensions differ");
  double mse = 0.0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    double d = pred.data[i] - target.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(pred.data.size());
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

// Mean windowed SSIM on luma: 8x8 windows, stride 4, C1=(0.01)^2, C2=(0.03)^2.
inline double ssim(const ImageTensor& pred, const ImageTensor& target) {
  if (!pred.same_shape(target)) throw DimensionError("ssim: image dimensions differ");
  constexpr int win = 8, stride = 4;
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  if (pred.h < win || pred.w < win) throw DataError("ssim: image smaller than one window");
  double total = 0.0;
  int count = 0;
  for (int oy = 0; oy + win <= pred.h; oy += stride) {
    for (int ox = 0; ox + win <= pred.w; ox += stride) {
      double mx = 0.0, my = 0.0;
      for (int y = 0; y < win; ++y)
        for (int x = 0; x < win; ++x) {
          mx += luma_at(pred, oy + y, ox + x);
          my += luma_at(target, oy + y, ox + x);
        }
      const double n = win * win;
      mx /= n;
      my /= n;
      double vx = 0.0, vy = 0.0, cov = 0.0;
      for (int y = 0; y < win; ++y)
        for (int x = 0; x < win; ++x) {
          double dx = luma_at(pred, oy + y, ox + x) - mx;
          double dy = luma_at(target, oy + y, ox + x) - my;
          vx += dx * dx;
          vy += dy * dy;
          cov += dx * dy;
        }
      vx /= n;
      vy /= n;
      cov /= n;
      total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      count += 1;
    }
  }
  return total / count;
}

// Color-invariant content feature: the 4x4 luma grid, zero-centered and
// L2-normalized so flat lighting shifts drop out and unrelated structures
// decorrelate.
inline std::array<double, 16> content_feature(const ImageTensor& img) {
  auto grid = luma_grid4(img);
  double mean = 0.0;
  for (double v : grid) mean += v / 16.0;
  for (double& v : grid) v -= mean;
  double norm = 0.0;
  for (double v : grid) norm += v * v;
  norm = std::sqrt(norm);
  if (norm > 1e-9)
    for (double& v : grid) v /= norm;
  else
    grid.fill(0.0);  // flat tile: no structure to compare
  return grid;
}

inline double content_similarity(const ImageTensor& a, const ImageTensor& b) {
  if (!a.same_shape(b)) throw DimensionError("content similarity: image dimensions differ");
  auto fa = content_feature(a), fb = content_feature(b);
  double na = 0.0, nb = 0.0, s = 0.0;
  for (int i = 0; i < 16; ++i) {
    s += fa[i] * fb[i];
    na += fa[i] * fa[i];
    nb += fb[i] * fb[i];
  }
  if (na < 0.5 && nb < 0.5) return 1.0;  // both structureless
  if (na < 0.5 || nb < 0.5) return 0.0;
  return s;
}

// Global content check: true when the luma structure of the output still
// matches the source (color is expected to change under preset transfer).
inline bool success(const ImageTensor& source, const ImageTensor& output,
                    double threshold = kContentThreshold) {
  return content_similarity(source, output) > threshold;
}

// Tile-wise variant: every 8x8 tile must pass the same similarity test.
inline bool local_check(const ImageTensor& source, const ImageTensor& output,
                        double threshold = kContentThreshold) {
  if (!source.same_shape(output)) throw DimensionError("local_check: image dimensions differ");
  constexpr int tile = 8;
  for (int oy = 0; oy + tile <= source.h; oy += tile)
    for (int ox = 0; ox + tile <= source.w; ox += tile) {
      ImageTensor st(tile, tile), ot(tile, tile);
      for (int y = 0; y < tile; ++y)
        for (int x = 0; x < tile; ++x)
          for (int c = 0; c < 3; ++c) {
            st.at(y, x, c) = source.at(oy + y, ox + x, c);
            ot.at(y, x, c) = output.at(oy + y, ox + x, c);
          }
      if (content_similarity(st, ot) <= threshold) return false;
    }
  return true;
}

}  // namespace flowtint
