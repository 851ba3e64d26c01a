#pragma once

// Shared box parameterization: class-labeled boxes, uniform yaw bins with a
// continuous residual, and the object-normalized size encoding (log-ratio to
// a reference size).

#include <cmath>
#include <vector>

#include "vdetr/geometry.hpp"

namespace vdetr {

struct LabeledBox {
  RotatedBox3 box;
  int class_id = 0;
};

inline double angle_bin_width(int n_bins) { return 2.0 * M_PI / n_bins; }

inline double angle_bin_center(int bin, int n_bins) {
  return -M_PI + (bin + 0.5) * angle_bin_width(n_bins);
}

inline int angle_to_bin(double yaw, int n_bins) {
  yaw = normalize_yaw(yaw);
  const int bin = static_cast<int>(std::floor((yaw + M_PI) / angle_bin_width(n_bins)));
  return std::clamp(bin, 0, n_bins - 1);
}

inline double angle_residual_target(double yaw, int n_bins) {
  return normalize_yaw(yaw) - angle_bin_center(angle_to_bin(yaw, n_bins), n_bins);
}

inline double decode_yaw(int bin, double residual, int n_bins) {
  return normalize_yaw(angle_bin_center(bin, n_bins) + residual);
}

// Object-normalized size parameterization: encode against a reference size,
// decode multiplicatively. decode(encode(s, ref), ref) == s for s, ref > 0.
inline Vec3 encode_size_log_ratio(const Vec3& size, const Vec3& ref) {
  return {std::log(size.x / ref.x), std::log(size.y / ref.y), std::log(size.z / ref.z)};
}

inline Vec3 decode_size_log_ratio(const Vec3& log_ratio, const Vec3& ref) {
  return {ref.x * std::exp(log_ratio.x), ref.y * std::exp(log_ratio.y), ref.z * std::exp(log_ratio.z)};
}

}  // namespace vdetr
