#pragma once

// Yaw-rotated 3D box algebra: vertices, canonical-object-space offsets,
// rotated IoU/GIoU via 2D convex footprint clipping, containment.
// Rotation is about the z-axis only. All functions are pure.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "vdetr/common.hpp"

namespace vdetr {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
};

// center (x,y,z) meters, size (w,l,h) full extents, yaw about z in (-pi, pi].
struct RotatedBox3 {
  Vec3 center;
  Vec3 size;
  double yaw = 0.0;

  double volume() const { return size.x * size.y * size.z; }
};

struct PointSet {
  std::vector<Vec3> coords;
  std::vector<std::array<double, 3>> colors;  // optional, [0,1]
};

inline double normalize_yaw(double yaw) {
  const double two_pi = 2.0 * M_PI;
  yaw = std::fmod(yaw, two_pi);
  if (yaw > M_PI) yaw -= two_pi;
  if (yaw <= -M_PI) yaw += two_pi;
  return yaw;
}

inline Vec3 rotate_z(const Vec3& p, double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  return {c * p.x - s * p.y, s * p.x + c * p.y, p.z};
}

// World offset into the box-aligned frame: R_yaw^T * dp (z untouched).
inline Vec3 rotate_z_inv(const Vec3& p, double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  return {c * p.x + s * p.y, -s * p.x + c * p.y, p.z};
}

// Eight corners in a fixed canonical order: vertex index bits select the
// sign of each half-extent (bit2 -> x, bit1 -> y, bit0 -> z), so vertex 0 is
// the (-,-,-) corner and vertex 7 the (+,+,+) corner. The order is part of
// the contract; the per-vertex encoding MLPs are indexed by it.
inline std::array<Vec3, 8> vertices(const RotatedBox3& box) {
  std::array<Vec3, 8> out;
  for (int i = 0; i < 8; ++i) {
    Vec3 local{((i >> 2) & 1 ? 0.5 : -0.5) * box.size.x, ((i >> 1) & 1 ? 0.5 : -0.5) * box.size.y,
               ((i)&1 ? 0.5 : -0.5) * box.size.z};
    out[i] = rotate_z(local, box.yaw) + box.center;
  }
  return out;
}

// Per point, per vertex: dp = p - v_i in world frame, then R_yaw^T dp when
// canonical is set (the object coordinate system), raw world offsets when not.
inline std::vector<std::array<Vec3, 8>> vertex_offsets(const std::vector<Vec3>& points,
                                                       const RotatedBox3& box, bool canonical = true) {
  const std::array<Vec3, 8> verts = vertices(box);
  std::vector<std::array<Vec3, 8>> out(points.size());
  for (std::size_t p = 0; p < points.size(); ++p)
    for (int i = 0; i < 8; ++i) {
      const Vec3 dp = points[p] - verts[i];
      out[p][i] = canonical ? rotate_z_inv(dp, box.yaw) : dp;
    }
  return out;
}

inline std::vector<std::array<Vec3, 8>> canonical_offsets(const std::vector<Vec3>& points,
                                                          const RotatedBox3& box) {
  return vertex_offsets(points, box, true);
}

inline std::vector<Vec3> center_offsets(const std::vector<Vec3>& points, const RotatedBox3& box,
                                        bool canonical = true) {
  std::vector<Vec3> out(points.size());
  for (std::size_t p = 0; p < points.size(); ++p) {
    const Vec3 dp = points[p] - box.center;
    out[p] = canonical ? rotate_z_inv(dp, box.yaw) : dp;
  }
  return out;
}

// Boundary-inclusive: surface points count as inside.
inline bool contains(const RotatedBox3& box, const Vec3& point) {
  constexpr double kSlack = 1e-12;
  const Vec3 q = rotate_z_inv(point - box.center, box.yaw);
  return std::fabs(q.x) <= 0.5 * box.size.x + kSlack && std::fabs(q.y) <= 0.5 * box.size.y + kSlack &&
         std::fabs(q.z) <= 0.5 * box.size.z + kSlack;
}

namespace detail {

struct Pt2 {
  double x, y;
};

inline std::array<Pt2, 4> footprint(const RotatedBox3& box) {
  // CCW order.
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const double hx = 0.5 * box.size.x, hy = 0.5 * box.size.y;
  std::array<Pt2, 4> out;
  const double lx[4] = {-hx, hx, hx, -hx};
  const double ly[4] = {-hy, -hy, hy, hy};
  for (int i = 0; i < 4; ++i)
    out[i] = {box.center.x + c * lx[i] - s * ly[i], box.center.y + s * lx[i] + c * ly[i]};
  return out;
}

// Sutherland-Hodgman: clip a convex subject polygon against a convex CCW
// clip polygon. Clip-plane boundary counts as inside (1e-12 slack), which
// resolves shared edges/vertices without dropping area.
template <typename SubjectPoly, typename ClipPoly>
std::vector<Pt2> clip_convex(const SubjectPoly& subject, const ClipPoly& clip) {
  std::vector<Pt2> poly(subject.begin(), subject.end());
  const std::size_t m = clip.size();
  for (std::size_t e = 0; e < m && !poly.empty(); ++e) {
    const Pt2 a = clip[e];
    const Pt2 b = clip[(e + 1) % m];
    const double ex = b.x - a.x, ey = b.y - a.y;
    auto side = [&](const Pt2& p) { return ex * (p.y - a.y) - ey * (p.x - a.x); };
    std::vector<Pt2> next;
    next.reserve(poly.size() + 2);
    for (std::size_t v = 0; v < poly.size(); ++v) {
      const Pt2 cur = poly[v];
      const Pt2 prev = poly[(v + poly.size() - 1) % poly.size()];
      const double sc = side(cur), sp = side(prev);
      const bool in_c = sc >= -1e-12, in_p = sp >= -1e-12;
      if (in_c != in_p) {
        const double t = sp / (sp - sc);
        next.push_back({prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)});
      }
      if (in_c) next.push_back(cur);
    }
    poly = std::move(next);
  }
  return poly;
}

inline double polygon_area(const std::vector<Pt2>& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Pt2& p = poly[i];
    const Pt2& q = poly[(i + 1) % poly.size()];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::fabs(a);
}

inline bool box_before(const RotatedBox3& a, const RotatedBox3& b) {
  const double ka[7] = {a.center.x, a.center.y, a.center.z, a.size.x, a.size.y, a.size.z, a.yaw};
  const double kb[7] = {b.center.x, b.center.y, b.center.z, b.size.x, b.size.y, b.size.z, b.yaw};
  for (int i = 0; i < 7; ++i)
    if (ka[i] != kb[i]) return ka[i] < kb[i];
  return true;
}

inline double intersection_volume(const RotatedBox3& a, const RotatedBox3& b) {
  // Canonical argument order makes the result bit-exact under swap.
  if (!box_before(a, b)) return intersection_volume(b, a);
  const double z_lo = std::max(a.center.z - 0.5 * a.size.z, b.center.z - 0.5 * b.size.z);
  const double z_hi = std::min(a.center.z + 0.5 * a.size.z, b.center.z + 0.5 * b.size.z);
  if (z_hi <= z_lo) return 0.0;
  const auto inter = clip_convex(footprint(a), footprint(b));
  if (inter.size() < 3) return 0.0;
  return polygon_area(inter) * (z_hi - z_lo);
}

}  // namespace detail

inline double iou_rotated(const RotatedBox3& a, const RotatedBox3& b) {
  const double inter = detail::intersection_volume(a, b);
  const double uni = a.volume() + b.volume() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// IoU minus the normalized empty volume of the enclosing axis-aligned box.
// The enclosing hull is axis-aligned (not minimal oriented); for yaw-0 boxes
// this coincides with the standard definition.
inline double giou_rotated(const RotatedBox3& a, const RotatedBox3& b) {
  const double inter = detail::intersection_volume(a, b);
  const double uni = a.volume() + b.volume() - inter;
  Vec3 lo{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
          std::numeric_limits<double>::infinity()};
  Vec3 hi{-lo.x, -lo.y, -lo.z};
  for (const RotatedBox3* box : {&a, &b})
    for (const Vec3& v : vertices(*box)) {
      lo = {std::min(lo.x, v.x), std::min(lo.y, v.y), std::min(lo.z, v.z)};
      hi = {std::max(hi.x, v.x), std::max(hi.y, v.y), std::max(hi.z, v.z)};
    }
  const double enclosing = (hi.x - lo.x) * (hi.y - lo.y) * (hi.z - lo.z);
  const double iou = uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
  if (enclosing <= 0.0) return iou;
  return iou - (enclosing - uni) / enclosing;
}

}  // namespace vdetr
