#pragma once

// Hungarian assignment over the six-term cost, one-to-many target expansion,
// and the training loss. Matching and loss share one formulation: each cost
// entry is the loss that pairing would contribute.

#include <cmath>
#include <limits>
#include <vector>

#include "vdetr/boxcodec.hpp"
#include "vdetr/geometry.hpp"
#include "vdetr/tensor.hpp"

namespace vdetr {

struct LossWeights {
  double giou = 2.0;
  double center = 5.0;
  double size = 1.0;
  double cls = 1.0;
  double angle_res = 1.0;
  double angle_cls = 0.1;

  void validate() const {
    const double w[6] = {giou, center, size, cls, angle_res, angle_cls};
    double total = 0.0;
    for (double x : w) {
      if (x < 0.0) throw std::invalid_argument("loss weights must be non-negative");
      total += x;
    }
    if (total <= 0.0) throw std::invalid_argument("at least one loss weight must be positive");
  }
};

constexpr double kFocalAlpha = 0.25;
constexpr double kFocalGamma = 2.0;
constexpr double kHuberDelta = 1.0;

inline double focal_term(double p_true) {
  return -kFocalAlpha * std::pow(1.0 - p_true, kFocalGamma) * std::log(p_true);
}

inline double huber(double r, double delta = kHuberDelta) {
  const double a = std::fabs(r);
  return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

// One decoder stage's outputs. Tensors carry gradients; the plain fields are
// decoded snapshots used for matching, refinement references and evaluation.
struct LayerPrediction {
  Tensor center;          // [K x 3] absolute, meters
  Tensor log_size;        // [K x 3]
  Tensor class_logits;    // [K x (n_classes + 1)], last column = no-object
  Tensor angle_logits;    // [K x n_bins]
  Tensor angle_residual;  // [K x 1] radians
  std::vector<RotatedBox3> boxes;
  std::vector<std::vector<double>> class_probs;  // softmax rows incl. no-object
  std::vector<int> angle_bins;                   // argmax bin per query

  std::size_t n_preds() const { return boxes.size(); }
};

struct MatchResult {
  // (prediction, target) pairs; predictions absent from any pair are
  // no-object. Each target index appears exactly once.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::size_t n_preds = 0;

  std::vector<int> target_of_pred() const {
    std::vector<int> out(n_preds, -1);
    for (const auto& [p, g] : pairs) out[p] = static_cast<int>(g);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Hungarian assignment (Jonker-Volgenant style shortest augmenting paths).
// Rectangular P x G with P >= G is padded square with zero-cost dummy
// columns, which leaves the real assignment optimal.

inline MatchResult hungarian(const std::vector<double>& cost, std::size_t n_preds, std::size_t n_targets) {
  if (cost.size() != n_preds * n_targets) throw std::invalid_argument("hungarian: cost size mismatch");
  if (n_preds < n_targets)
    throw std::invalid_argument("hungarian: need at least as many predictions (" +
                                std::to_string(n_preds) + ") as targets (" + std::to_string(n_targets) + ")");
  for (double c : cost)
    if (!std::isfinite(c)) throw std::invalid_argument("hungarian: non-finite cost entry");

  MatchResult result;
  result.n_preds = n_preds;
  if (n_targets == 0) return result;

  const std::size_t n = n_preds;  // square size after padding
  auto entry = [&](std::size_t row, std::size_t col) {
    return col < n_targets ? cost[row * n_targets + col] : 0.0;
  };

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> assigned_row(n + 1, 0);  // column -> row (1-based)
  std::vector<std::size_t> way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    assigned_row[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = assigned_row[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = entry(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[assigned_row[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (assigned_row[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      assigned_row[j0] = assigned_row[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  for (std::size_t j = 1; j <= n; ++j)
    if (j - 1 < n_targets && assigned_row[j] != 0)
      result.pairs.emplace_back(assigned_row[j] - 1, j - 1);
  std::sort(result.pairs.begin(), result.pairs.end());
  return result;
}

inline MatchResult hungarian(const Tensor& cost) {
  if (cost.rank() != 2) throw std::invalid_argument("hungarian: cost must be P x G");
  return hungarian(cost.data(), cost.shape()[0], cost.shape()[1]);
}

inline double assignment_cost(const std::vector<double>& cost, std::size_t n_targets,
                              const MatchResult& match) {
  double total = 0.0;
  for (const auto& [p, g] : match.pairs) total += cost[p * n_targets + g];
  return total;
}

// ---------------------------------------------------------------------------

inline std::vector<LabeledBox> repeat_targets(const std::vector<LabeledBox>& gts, int k) {
  if (k < 1) throw std::invalid_argument("repeat_targets: k must be >= 1");
  std::vector<LabeledBox> out;
  out.reserve(gts.size() * k);
  for (int r = 0; r < k; ++r) out.insert(out.end(), gts.begin(), gts.end());
  return out;
}

// Six-term pairing cost; entries equal the matched-pair loss contribution.
inline std::vector<double> match_cost(const LayerPrediction& pred, const std::vector<LabeledBox>& gts,
                                      const LossWeights& w, int n_angle_bins) {
  const std::size_t p_count = pred.n_preds(), g_count = gts.size();
  const bool use_angle = w.angle_res > 0.0 || w.angle_cls > 0.0;

  std::vector<double> angle_probs;
  if (use_angle) {
    angle_probs.assign(p_count * n_angle_bins, 0.0);
    for (std::size_t p = 0; p < p_count; ++p) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int b = 0; b < n_angle_bins; ++b) mx = std::max(mx, pred.angle_logits[p * n_angle_bins + b]);
      double denom = 0.0;
      for (int b = 0; b < n_angle_bins; ++b) {
        angle_probs[p * n_angle_bins + b] = std::exp(pred.angle_logits[p * n_angle_bins + b] - mx);
        denom += angle_probs[p * n_angle_bins + b];
      }
      for (int b = 0; b < n_angle_bins; ++b) angle_probs[p * n_angle_bins + b] /= denom;
    }
  }

  std::vector<double> cost(p_count * g_count, 0.0);
  for (std::size_t p = 0; p < p_count; ++p) {
    const RotatedBox3& pb = pred.boxes[p];
    for (std::size_t g = 0; g < g_count; ++g) {
      const RotatedBox3& gb = gts[g].box;
      double c = -w.giou * giou_rotated(pb, gb);
      c += w.center * (std::fabs(pb.center.x - gb.center.x) + std::fabs(pb.center.y - gb.center.y) +
                       std::fabs(pb.center.z - gb.center.z));
      c += w.size * (std::fabs(std::log(pb.size.x / gb.size.x)) + std::fabs(std::log(pb.size.y / gb.size.y)) +
                     std::fabs(std::log(pb.size.z / gb.size.z)));
      c += w.cls * focal_term(pred.class_probs[p][gts[g].class_id]);
      if (use_angle) {
        const int gt_bin = angle_to_bin(gb.yaw, n_angle_bins);
        const double res_target = angle_residual_target(gb.yaw, n_angle_bins);
        c += w.angle_res * huber(pred.angle_residual[p] - res_target);
        c += w.angle_cls * -std::log(angle_probs[p * n_angle_bins + gt_bin]);
      }
      cost[p * g_count + g] = c;
    }
  }
  return cost;
}

inline MatchResult match_layer(const LayerPrediction& pred, const std::vector<LabeledBox>& gts,
                               const LossWeights& w, int n_angle_bins) {
  return hungarian(match_cost(pred, gts, w, n_angle_bins), pred.n_preds(), gts.size());
}

// ---------------------------------------------------------------------------
// differentiable loss

namespace detail {

inline Tensor prod_cols3(const Tensor& t) {
  return mul(mul(slice_cols(t, 0, 1), slice_cols(t, 1, 1)), slice_cols(t, 2, 1));
}

// Axis-aligned GIoU on matched (center, size) rows against constant targets.
// The loss strips yaw (angle terms carry rotation); on yaw-zero data this is
// exactly the rotated GIoU.
inline Tensor giou_aligned(const Tensor& center, const Tensor& size, const Tensor& gt_center,
                           const Tensor& gt_size) {
  Tensor half = scale(size, 0.5);
  Tensor lo = sub(center, half);
  Tensor hi = add(center, half);
  Tensor gt_half = scale(gt_size, 0.5);
  Tensor gt_lo = sub(gt_center, gt_half);
  Tensor gt_hi = add(gt_center, gt_half);

  Tensor inter_dims = relu(sub(minimum(hi, gt_hi), maximum(lo, gt_lo)));
  Tensor inter = prod_cols3(inter_dims);
  Tensor vol_p = prod_cols3(size);
  Tensor vol_g = prod_cols3(gt_size);
  Tensor uni = sub(add(vol_p, vol_g), inter);
  Tensor enc = prod_cols3(sub(maximum(hi, gt_hi), minimum(lo, gt_lo)));
  return sub(div(inter, uni), div(sub(enc, uni), enc));
}

inline Tensor huber_t(const Tensor& r, double delta = kHuberDelta) {
  Tensor a = vdetr::abs(r);
  Tensor q = minimum(a, Tensor::full(a.shape(), delta));
  return add(scale(mul(q, q), 0.5), scale(sub(a, q), delta));
}

inline Tensor focal_t(const Tensor& p_true) {
  Tensor one_minus = add_scalar(neg(p_true), 1.0);
  return scale(mul(mul(one_minus, one_minus), log(p_true)), -kFocalAlpha);
}

}  // namespace detail

// Deep-supervised six-term loss. Matched pairs contribute GIoU, L1 center,
// L1 log-size, focal classification and (when weighted) the angle terms;
// unmatched predictions contribute focal loss toward the no-object class.
// Each layer is normalized by its target count and layers are summed.
inline Tensor detection_loss(const std::vector<LayerPrediction>& layers,
                             const std::vector<LabeledBox>& gts,
                             const std::vector<MatchResult>& matches, const LossWeights& w,
                             int n_classes, int n_angle_bins) {
  if (layers.size() != matches.size())
    throw std::invalid_argument("detection_loss: one match per layer required");
  w.validate();
  Tensor total = Tensor::scalar(0.0);
  const double norm = 1.0 / std::max<std::size_t>(1, gts.size());

  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerPrediction& pred = layers[l];
    const MatchResult& match = matches[l];
    Tensor layer_loss = Tensor::scalar(0.0);

    // Classification over every prediction.
    if (w.cls > 0.0) {
      std::vector<std::size_t> target_class(pred.n_preds(), static_cast<std::size_t>(n_classes));
      for (const auto& [p, g] : match.pairs) target_class[p] = static_cast<std::size_t>(gts[g].class_id);
      Tensor probs = softmax_rows(pred.class_logits);
      Tensor p_true = take_per_row(probs, target_class);
      layer_loss = add(layer_loss, scale(sum(detail::focal_t(p_true)), w.cls));
    }

    if (!match.pairs.empty()) {
      std::vector<std::size_t> pred_idx;
      std::vector<double> gt_center, gt_log_size;
      std::vector<std::size_t> gt_bins;
      std::vector<double> gt_residuals;
      for (const auto& [p, g] : match.pairs) {
        pred_idx.push_back(p);
        const RotatedBox3& gb = gts[g].box;
        gt_center.insert(gt_center.end(), {gb.center.x, gb.center.y, gb.center.z});
        gt_log_size.insert(gt_log_size.end(),
                           {std::log(gb.size.x), std::log(gb.size.y), std::log(gb.size.z)});
        gt_bins.push_back(static_cast<std::size_t>(angle_to_bin(gb.yaw, n_angle_bins)));
        gt_residuals.push_back(angle_residual_target(gb.yaw, n_angle_bins));
      }
      const std::size_t m = pred_idx.size();
      Tensor center_m = gather_rows(pred.center, pred_idx);
      Tensor log_size_m = gather_rows(pred.log_size, pred_idx);
      Tensor gt_center_t = Tensor::constant({m, 3}, std::move(gt_center));
      Tensor gt_log_size_t = Tensor::constant({m, 3}, std::move(gt_log_size));

      if (w.giou > 0.0) {
        Tensor giou = detail::giou_aligned(center_m, exp(log_size_m), gt_center_t,
                                           exp(gt_log_size_t));
        layer_loss = add(layer_loss, scale(sum(giou), -w.giou));
      }
      if (w.center > 0.0)
        layer_loss = add(layer_loss, scale(sum(vdetr::abs(sub(center_m, gt_center_t))), w.center));
      if (w.size > 0.0)
        layer_loss = add(layer_loss, scale(sum(vdetr::abs(sub(log_size_m, gt_log_size_t))), w.size));
      if (w.angle_cls > 0.0) {
        Tensor bin_probs = softmax_rows(gather_rows(pred.angle_logits, pred_idx));
        Tensor p_bin = take_per_row(bin_probs, gt_bins);
        layer_loss = add(layer_loss, scale(sum(neg(log(p_bin))), w.angle_cls));
      }
      if (w.angle_res > 0.0) {
        Tensor res_m = gather_rows(pred.angle_residual, pred_idx);
        Tensor res_target = Tensor::constant({m, 1}, std::move(gt_residuals));
        layer_loss = add(layer_loss, scale(sum(detail::huber_t(sub(res_m, res_target))), w.angle_res));
      }
    }

    total = add(total, scale(layer_loss, norm));
  }
  return total;
}

}  // namespace vdetr
