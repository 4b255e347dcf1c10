#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "flowtint/errors.hpp"
#include "flowtint/image.hpp"
#include "flowtint/rng.hpp"

namespace flowtint {

using Vec = std::vector<double>;

inline void check_same_shape(const Vec& a, const Vec& b, const char* op) {
  if (a.size() != b.size())
    throw DimensionError(std::string(op) + ": shape mismatch (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
}

// A point on the straight-line path between data x0 and noise x1.
struct FlowSample {
  Vec x0;
  Vec x1;
  double t = 0.0;
  Vec xt;
};

struct VelocityTarget {
  Vec v;
};

inline Vec interpolate(const Vec& x0, const Vec& x1, double t) {
  check_same_shape(x0, x1, "interpolate");
  if (t < 0.0 || t > 1.0) throw DomainError("interpolate: t=" + std::to_string(t) + " outside [0,1]");
  Vec out(x0.size());
  for (size_t i = 0; i < x0.size(); ++i) out[i] = (1.0 - t) * x0[i] + t * x1[i];
  return out;
}

inline Vec target_velocity(const Vec& x0, const Vec& x1) {
  check_same_shape(x0, x1, "target_velocity");
  Vec v(x0.size());
  for (size_t i = 0; i < x0.size(); ++i) v[i] = x1[i] - x0[i];
  return v;
}

inline FlowSample make_flow_sample(Vec x0, Vec x1, double t) {
  FlowSample s;
  s.xt = interpolate(x0, x1, t);
  s.x0 = std::move(x0);
  s.x1 = std::move(x1);
  s.t = t;
  return s;
}

// Mean squared velocity residual; mean keeps the magnitude resolution-independent.
inline double fm_loss(const Vec& vel_pred, const Vec& vel_target) {
  check_same_shape(vel_pred, vel_target, "fm_loss");
  double acc = 0.0;
  for (size_t i = 0; i < vel_pred.size(); ++i) {
    double d = vel_pred[i] - vel_target[i];
    acc += d * d;
  }
  return acc / static_cast<double>(vel_pred.size());
}

inline Vec standard_normal(size_t n, std::uint64_t stream_seed) {
  Rng rng(stream_seed);
  Vec out(n);
  for (double& v : out) v = rng.normal();
  return out;
}

// Uniform-grid Euler integration from t=1 down to t=0 starting at `start`.
// No clamping inside the trajectory; callers clamp the final output.
template <class FieldFn>
Vec euler_integrate(FieldFn&& field, Vec start, int steps) {
  if (steps < 1) throw DomainError("euler_integrate: steps must be >= 1");
  Vec x = std::move(start);
  const double dt = 1.0 / steps;
  for (int i = 0; i < steps; ++i) {
    double t = 1.0 - i * dt;
    Vec v = field(x, t);
    check_same_shape(v, x, "euler_integrate");
    for (size_t j = 0; j < x.size(); ++j) {
      x[j] -= dt * v[j];
      if (!std::isfinite(x[j]))
        throw NumericError("euler_integrate: non-finite state at step " + std::to_string(i));
    }
  }
  return x;
}

// Seeded sampling entry point: draw x ~ N(0,I) at t=1, integrate, clamp once.
template <class FieldFn>
ImageTensor euler_sample_with(FieldFn&& field, int h, int w, int steps, std::uint64_t stream_seed) {
  Vec start = standard_normal(static_cast<size_t>(h) * w * 3, stream_seed);
  Vec x = euler_integrate(field, std::move(start), steps);
  ImageTensor out = ImageTensor::from_flat(x, h, w);
  out.clamp01();
  return out;
}

}  // namespace flowtint
