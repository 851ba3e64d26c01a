#pragma once

// Vertex relative position encoding: per-point offsets to box anchors are
// squashed by an odd nonlinearity, pushed through per-vertex MLPs, and summed
// into the cross-attention bias. Two routes produce the bias: exact per-offset
// evaluation and trilinear interpolation of a precomputed node table. Both
// treat the offsets as plain inputs; gradients reach the MLP weights only.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "vdetr/geometry.hpp"
#include "vdetr/tensor.hpp"

namespace vdetr {

enum class NonlinearKind { kIdentity, kSoftSign, kTanh, kInvSqrt, kSignedLog };

inline std::string to_string(NonlinearKind k) {
  switch (k) {
    case NonlinearKind::kIdentity: return "identity";
    case NonlinearKind::kSoftSign: return "soft_sign";
    case NonlinearKind::kTanh: return "tanh";
    case NonlinearKind::kInvSqrt: return "inv_sqrt";
    case NonlinearKind::kSignedLog: return "signed_log";
  }
  return "signed_log";
}

inline NonlinearKind nonlinear_from_string(const std::string& s) {
  if (s == "identity") return NonlinearKind::kIdentity;
  if (s == "soft_sign") return NonlinearKind::kSoftSign;
  if (s == "tanh") return NonlinearKind::kTanh;
  if (s == "inv_sqrt") return NonlinearKind::kInvSqrt;
  if (s == "signed_log") return NonlinearKind::kSignedLog;
  throw std::invalid_argument("unknown nonlinearity: " + s);
}

// All kinds are built as copysign(f(|x|), x), making odd symmetry bit-exact.
inline double apply_nonlinear(NonlinearKind kind, double x) {
  const double a = std::fabs(x);
  double m = a;
  switch (kind) {
    case NonlinearKind::kIdentity: m = a; break;
    case NonlinearKind::kSoftSign: m = a / (1.0 + a); break;
    case NonlinearKind::kTanh: m = std::tanh(a); break;
    case NonlinearKind::kInvSqrt: m = a / std::sqrt(1.0 + a * a); break;
    case NonlinearKind::kSignedLog: m = std::log1p(a); break;
  }
  return std::copysign(m, x);
}

inline double nonlinear_derivative(NonlinearKind kind, double x) {
  const double a = std::fabs(x);
  switch (kind) {
    case NonlinearKind::kIdentity: return 1.0;
    case NonlinearKind::kSoftSign: return 1.0 / ((1.0 + a) * (1.0 + a));
    case NonlinearKind::kTanh: {
      const double t = std::tanh(a);
      return 1.0 - t * t;
    }
    case NonlinearKind::kInvSqrt: {
      const double d = 1.0 + x * x;
      return 1.0 / (d * std::sqrt(d));
    }
    case NonlinearKind::kSignedLog: return 1.0 / (1.0 + a);
  }
  return 1.0;
}

inline Tensor apply_nonlinear(NonlinearKind kind, const Tensor& x) {
  return detail::unary_op(
      x, [kind](double v) { return apply_nonlinear(kind, v); },
      [kind](double v, double) { return nonlinear_derivative(kind, v); });
}

// Offsets up to 10 m in F-space under signed log; indoor scenes stay inside.
inline double default_table_extent() { return std::log1p(10.0); }

struct RpeConfig {
  NonlinearKind kind = NonlinearKind::kSignedLog;
  int n_vertices = 8;
  bool canonical = true;  // object frame offsets; false keeps world frame
  int table_resolution = 10;
  double table_extent = default_table_extent();
};

// Anchor subset for the vertex-count ablation. 8 keeps all corners, 4 keeps
// the even-parity corners (still spanning min/max per axis), 2 keeps the
// diagonal pair, 1 falls back to the box center.
inline std::vector<int> anchor_indices(int n_vertices) {
  switch (n_vertices) {
    case 8: return {0, 1, 2, 3, 4, 5, 6, 7};
    case 4: return {0, 3, 5, 6};
    case 2: return {0, 7};
    case 1: return {-1};  // center
    default: throw std::invalid_argument("vertex count must be 1, 2, 4 or 8");
  }
}

// Flat per-anchor offsets, one [K*N x 3] block per anchor, row = (box, point).
inline std::vector<std::vector<double>> anchor_offsets(const std::vector<RotatedBox3>& boxes,
                                                       const std::vector<Vec3>& points,
                                                       int n_vertices, bool canonical) {
  const std::vector<int> anchors = anchor_indices(n_vertices);
  const std::size_t k = boxes.size(), n = points.size();
  std::vector<std::vector<double>> out(anchors.size(), std::vector<double>(k * n * 3));
  for (std::size_t b = 0; b < k; ++b) {
    if (n_vertices == 1) {
      const auto offs = center_offsets(points, boxes[b], canonical);
      for (std::size_t p = 0; p < n; ++p) {
        const std::size_t r = (b * n + p) * 3;
        out[0][r] = offs[p].x;
        out[0][r + 1] = offs[p].y;
        out[0][r + 2] = offs[p].z;
      }
    } else {
      const auto offs = vertex_offsets(points, boxes[b], canonical);
      for (std::size_t a = 0; a < anchors.size(); ++a)
        for (std::size_t p = 0; p < n; ++p) {
          const Vec3& v = offs[p][anchors[a]];
          const std::size_t r = (b * n + p) * 3;
          out[a][r] = v.x;
          out[a][r + 1] = v.y;
          out[a][r + 2] = v.z;
        }
    }
  }
  return out;
}

// Per-vertex 3 -> d_hidden -> heads MLPs with ReLU, independent weights.
class VertexMlp {
 public:
  VertexMlp() = default;

  VertexMlp(ParamStore& store, const std::string& prefix, int n_vertices, int d_hidden, int heads,
            Rng& rng)
      : n_vertices_(n_vertices), heads_(heads) {
    const double l1 = std::sqrt(6.0 / (3 + d_hidden));
    const double l2 = std::sqrt(6.0 / (d_hidden + heads));
    for (int v = 0; v < n_vertices; ++v) {
      const std::string base = prefix + ".v" + std::to_string(v);
      mlps_.push_back({&store.create(base + ".w1", {3, static_cast<std::size_t>(d_hidden)}, rng, l1),
                       &store.create_zeros(base + ".b1", {static_cast<std::size_t>(d_hidden)}),
                       &store.create(base + ".w2",
                                     {static_cast<std::size_t>(d_hidden), static_cast<std::size_t>(heads)},
                                     rng, l2),
                       &store.create_zeros(base + ".b2", {static_cast<std::size_t>(heads)})});
    }
  }

  int n_vertices() const { return n_vertices_; }
  int heads() const { return heads_; }

  Tensor apply(int vertex, const Tensor& x) const {
    const auto& m = mlps_.at(vertex);
    return linear(relu(linear(x, m.w1->tensor(), m.b1->tensor())), m.w2->tensor(), m.b2->tensor());
  }

 private:
  struct Mlp {
    Parameter* w1;
    Parameter* b1;
    Parameter* w2;
    Parameter* b2;
  };
  int n_vertices_ = 0;
  int heads_ = 0;
  std::vector<Mlp> mlps_;
};

namespace detail {

inline void check_vertex_count(const VertexMlp& mlp, const RpeConfig& cfg) {
  if (mlp.n_vertices() != static_cast<int>(anchor_indices(cfg.n_vertices).size()))
    throw std::invalid_argument("rpe: config demands " + std::to_string(cfg.n_vertices) +
                                " vertices but MLP set holds " + std::to_string(mlp.n_vertices()));
}

inline Tensor heads_major(const Tensor& flat, std::size_t heads, std::size_t k, std::size_t n) {
  return reshape(transpose(flat), {heads, k, n});
}

}  // namespace detail

// Exact bias path: R = sum_i MLP_i(F(dP_i)), one value per (head, box, point).
// per_vertex, when non-null, receives each vertex's [K*N x heads] term.
inline Tensor rpe_exact(const std::vector<RotatedBox3>& boxes, const std::vector<Vec3>& points,
                        const VertexMlp& mlp, const RpeConfig& cfg,
                        std::vector<Tensor>* per_vertex = nullptr) {
  detail::check_vertex_count(mlp, cfg);
  const std::size_t k = boxes.size(), n = points.size(), h = mlp.heads();
  auto offsets = anchor_offsets(boxes, points, cfg.n_vertices, cfg.canonical);
  Tensor total;
  for (std::size_t v = 0; v < offsets.size(); ++v) {
    for (double& x : offsets[v]) x = apply_nonlinear(cfg.kind, x);
    Tensor term = mlp.apply(static_cast<int>(v), Tensor::constant({k * n, 3}, std::move(offsets[v])));
    if (per_vertex) per_vertex->push_back(term);
    total = v == 0 ? term : add(total, term);
  }
  return detail::heads_major(total, h, k, n);
}

// Uniform node grid in F-space over [-extent, extent]^3.
struct RpeTable {
  int resolution = 10;
  double extent = default_table_extent();

  std::size_t n_nodes() const {
    return static_cast<std::size_t>(resolution) * resolution * resolution;
  }

  std::vector<double> node_coords() const {
    if (extent <= 0.0) throw std::invalid_argument("rpe table: extent must be positive");
    if (resolution < 2) throw std::invalid_argument("rpe table: resolution must be >= 2");
    std::vector<double> out;
    out.reserve(n_nodes() * 3);
    const int n = resolution;
    auto node = [&](int i) { return -extent + 2.0 * extent * i / (n - 1); };
    for (int ix = 0; ix < n; ++ix)
      for (int iy = 0; iy < n; ++iy)
        for (int iz = 0; iz < n; ++iz) {
          out.push_back(node(ix));
          out.push_back(node(iy));
          out.push_back(node(iz));
        }
    return out;
  }

  // F-space value -> continuous grid coordinate, clamped to the volume.
  double to_grid(double f) const {
    f = std::clamp(f, -extent, extent);
    return (f + extent) / (2.0 * extent) * (resolution - 1);
  }
};

// Table bias path: node outputs MLP_i(node) are trilinearly interpolated at
// the clamped F-image of each offset. Matches rpe_exact wherever F(dP) lands
// on a node; gradients flow to the MLP weights through the node values.
inline Tensor rpe_table(const std::vector<RotatedBox3>& boxes, const std::vector<Vec3>& points,
                        const RpeTable& table, const VertexMlp& mlp, const RpeConfig& cfg,
                        std::vector<Tensor>* per_vertex = nullptr) {
  detail::check_vertex_count(mlp, cfg);
  const std::size_t k = boxes.size(), n = points.size(), h = mlp.heads();
  const std::vector<double> nodes = table.node_coords();
  const std::size_t res = table.resolution;
  auto offsets = anchor_offsets(boxes, points, cfg.n_vertices, cfg.canonical);
  Tensor total;
  for (std::size_t v = 0; v < offsets.size(); ++v) {
    Tensor node_values = mlp.apply(static_cast<int>(v), Tensor::constant({table.n_nodes(), 3}, nodes));
    std::vector<double>& coords = offsets[v];
    for (double& x : coords) x = table.to_grid(apply_nonlinear(cfg.kind, x));
    Tensor term = trilinear_gather(node_values, res, res, res, coords);
    if (per_vertex) per_vertex->push_back(term);
    total = v == 0 ? term : add(total, term);
  }
  return detail::heads_major(total, h, k, n);
}

// Hard locality prior: 0 inside the box, a large negative constant outside.
// Finite rather than -inf so empty boxes cannot produce NaN rows.
inline Tensor box_mask_bias(const std::vector<RotatedBox3>& boxes, const std::vector<Vec3>& points,
                            double neg = -1e4) {
  const std::size_t k = boxes.size(), n = points.size();
  std::vector<double> out(k * n);
  for (std::size_t b = 0; b < k; ++b)
    for (std::size_t p = 0; p < n; ++p) out[b * n + p] = contains(boxes[b], points[p]) ? 0.0 : neg;
  return Tensor::constant({k, n}, std::move(out));
}

}  // namespace vdetr
