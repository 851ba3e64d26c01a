#include "vdetr/matching.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace vdetr;

namespace {

// Factorial oracle: enumerate every assignment of G targets to P predictions.
double brute_force_min_cost(const std::vector<double>& cost, std::size_t p, std::size_t g) {
  std::vector<std::size_t> rows(p);
  std::iota(rows.begin(), rows.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  // Permute rows; first g entries map to targets 0..g-1.
  std::sort(rows.begin(), rows.end());
  do {
    double total = 0.0;
    for (std::size_t j = 0; j < g; ++j) total += cost[rows[j] * g + j];
    best = std::min(best, total);
  } while (std::next_permutation(rows.begin(), rows.end()));
  return best;
}

LayerPrediction make_prediction(const std::vector<RotatedBox3>& boxes,
                                const std::vector<int>& confident_class, int n_classes,
                                int n_bins = 12, double logit_scale = 8.0) {
  LayerPrediction pred;
  const std::size_t k = boxes.size();
  std::vector<double> center, log_size, cls, angle_logits, residual;
  for (std::size_t i = 0; i < k; ++i) {
    const RotatedBox3& b = boxes[i];
    center.insert(center.end(), {b.center.x, b.center.y, b.center.z});
    log_size.insert(log_size.end(), {std::log(b.size.x), std::log(b.size.y), std::log(b.size.z)});
    for (int c = 0; c <= n_classes; ++c)
      cls.push_back(c == confident_class[i] ? logit_scale : -logit_scale);
    const int bin = angle_to_bin(b.yaw, n_bins);
    for (int c = 0; c < n_bins; ++c) angle_logits.push_back(c == bin ? logit_scale : -logit_scale);
    residual.push_back(angle_residual_target(b.yaw, n_bins));
  }
  pred.center = Tensor::constant({k, 3}, center);
  pred.log_size = Tensor::constant({k, 3}, log_size);
  pred.class_logits = Tensor::constant({k, static_cast<std::size_t>(n_classes + 1)}, cls);
  pred.angle_logits = Tensor::constant({k, static_cast<std::size_t>(n_bins)}, angle_logits);
  pred.angle_residual = Tensor::constant({k, 1}, residual);
  pred.boxes = boxes;
  for (std::size_t i = 0; i < k; ++i) {
    Tensor probs = softmax_rows(pred.class_logits);
    std::vector<double> row(n_classes + 1);
    for (int c = 0; c <= n_classes; ++c) row[c] = probs[i * (n_classes + 1) + c];
    pred.class_probs.push_back(row);
    pred.angle_bins.push_back(angle_to_bin(boxes[i].yaw, n_bins));
  }
  return pred;
}

TEST(Hungarian, DiagonalZeros) {
  const std::vector<double> cost = {0, 5, 5, 5, 0, 5, 5, 5, 0};
  const MatchResult m = hungarian(cost, 3, 3);
  ASSERT_EQ(m.pairs.size(), 3u);
  for (const auto& [p, g] : m.pairs) EXPECT_EQ(p, g);
}

TEST(Hungarian, TwoByTwoOffDiagonalOptimum) {
  const std::vector<double> cost = {1, 2, 2, 4};
  const MatchResult m = hungarian(cost, 2, 2);
  EXPECT_EQ(assignment_cost(cost, 2, m), brute_force_min_cost(cost, 2, 2));
  EXPECT_EQ(assignment_cost(cost, 2, m), 4.0);
  ASSERT_EQ(m.pairs.size(), 2u);
  EXPECT_EQ(m.pairs[0], (std::pair<std::size_t, std::size_t>{0, 1}));
  EXPECT_EQ(m.pairs[1], (std::pair<std::size_t, std::size_t>{1, 0}));
}

TEST(Hungarian, RandomSquareMatchesFactorialOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 7);
    std::vector<double> cost(n * n);
    for (double& c : cost) c = uniform(rng, -5, 5);
    const MatchResult m = hungarian(cost, n, n);
    EXPECT_EQ(m.pairs.size(), n);
    EXPECT_NEAR(assignment_cost(cost, n, m), brute_force_min_cost(cost, n, n), 1e-9);
  }
}

TEST(Hungarian, RectangularAssignsEveryTarget) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t g = 1 + uniform_index(rng, 4);
    const std::size_t p = g + uniform_index(rng, 4);
    std::vector<double> cost(p * g);
    for (double& c : cost) c = uniform(rng, -3, 3);
    const MatchResult m = hungarian(cost, p, g);
    EXPECT_EQ(m.pairs.size(), g);
    EXPECT_NEAR(assignment_cost(cost, g, m), brute_force_min_cost(cost, p, g), 1e-9);
    std::vector<bool> used_pred(p, false), used_gt(g, false);
    for (const auto& [pi, gi] : m.pairs) {
      EXPECT_FALSE(used_pred[pi]);
      EXPECT_FALSE(used_gt[gi]);
      used_pred[pi] = used_gt[gi] = true;
    }
  }
}

TEST(Hungarian, NonFiniteCostThrows) {
  EXPECT_THROW(hungarian({0.0, std::numeric_limits<double>::infinity(), 1.0, 2.0}, 2, 2),
               std::invalid_argument);
  EXPECT_THROW(hungarian({1.0, 2.0}, 1, 2), std::invalid_argument);  // P < G
}

TEST(MatchCost, PerfectPredictionDominatesItsRow) {
  const RotatedBox3 gt0{{0, 0, 0}, {1, 1, 1}, 0.0};
  const RotatedBox3 gt1{{3, 1, 0}, {0.5, 2, 1}, 0.0};
  LayerPrediction pred = make_prediction({gt0}, {0}, 2);
  const std::vector<LabeledBox> gts = {{gt0, 0}, {gt1, 1}};
  LossWeights w;
  const std::vector<double> cost = match_cost(pred, gts, w, 12);
  EXPECT_LT(cost[0], cost[1]);
}

TEST(MatchCost, GiouOnlyIdenticalBoxes) {
  const RotatedBox3 box{{0.5, 0.5, 0.5}, {1, 2, 1}, 0.0};
  LayerPrediction pred = make_prediction({box}, {0}, 1);
  LossWeights w{};
  w.giou = 1.0;
  w.center = w.size = w.cls = w.angle_res = w.angle_cls = 0.0;
  const std::vector<double> cost = match_cost(pred, {{box, 0}}, w, 12);
  EXPECT_NEAR(cost[0], -1.0, 1e-12);
}

TEST(MatchCost, MatchesPerTermRecomputationOracle) {
  Rng rng(7);
  const int n_classes = 3, n_bins = 12;
  std::vector<RotatedBox3> pboxes, gboxes;
  for (int i = 0; i < 3; ++i) {
    pboxes.push_back({{uniform(rng, -2, 2), uniform(rng, -2, 2), uniform(rng, -1, 1)},
                      {uniform(rng, 0.5, 2), uniform(rng, 0.5, 2), uniform(rng, 0.5, 2)},
                      uniform(rng, -3, 3)});
    gboxes.push_back({{uniform(rng, -2, 2), uniform(rng, -2, 2), uniform(rng, -1, 1)},
                      {uniform(rng, 0.5, 2), uniform(rng, 0.5, 2), uniform(rng, 0.5, 2)},
                      uniform(rng, -3, 3)});
  }
  LayerPrediction pred = make_prediction(pboxes, {0, 1, 2}, n_classes);
  std::vector<LabeledBox> gts;
  for (int i = 0; i < 3; ++i) gts.push_back({gboxes[i], i});
  LossWeights w;
  const std::vector<double> cost = match_cost(pred, gts, w, n_bins);

  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t g = 0; g < 3; ++g) {
      const RotatedBox3& pb = pboxes[p];
      const RotatedBox3& gb = gboxes[g];
      double expect = -w.giou * giou_rotated(pb, gb);
      expect += w.center * (std::fabs(pb.center.x - gb.center.x) + std::fabs(pb.center.y - gb.center.y) +
                            std::fabs(pb.center.z - gb.center.z));
      expect += w.size * (std::fabs(std::log(pb.size.x) - std::log(gb.size.x)) +
                          std::fabs(std::log(pb.size.y) - std::log(gb.size.y)) +
                          std::fabs(std::log(pb.size.z) - std::log(gb.size.z)));
      const double p_true = pred.class_probs[p][gts[g].class_id];
      expect += w.cls * (-0.25 * std::pow(1.0 - p_true, 2.0) * std::log(p_true));
      const int bin = angle_to_bin(gb.yaw, n_bins);
      const double res = angle_residual_target(gb.yaw, n_bins);
      const double r = pred.angle_residual[p] - res;
      expect += w.angle_res * (std::fabs(r) <= 1.0 ? 0.5 * r * r : std::fabs(r) - 0.5);
      Tensor probs = softmax_rows(pred.angle_logits);
      expect += w.angle_cls * -std::log(probs[p * n_bins + bin]);
      EXPECT_NEAR(cost[p * 3 + g], expect, 1e-9);
    }
}

TEST(RepeatTargets, IdentityAndCount) {
  const std::vector<LabeledBox> gts = {{{{0, 0, 0}, {1, 1, 1}, 0}, 0},
                                       {{{1, 1, 0}, {1, 1, 1}, 0}, 1},
                                       {{{2, 2, 0}, {1, 1, 1}, 0}, 2}};
  EXPECT_EQ(repeat_targets(gts, 1).size(), 3u);
  const auto expanded = repeat_targets(gts, 4);
  EXPECT_EQ(expanded.size(), 12u);
  EXPECT_THROW(repeat_targets(gts, 0), std::invalid_argument);
}

TEST(RepeatTargets, MatchingAssignsAtMostKPerOriginalTarget) {
  Rng rng(9);
  std::vector<RotatedBox3> pboxes;
  for (int i = 0; i < 12; ++i)
    pboxes.push_back({{uniform(rng, -3, 3), uniform(rng, -3, 3), 0.0},
                      {uniform(rng, 0.5, 1.5), uniform(rng, 0.5, 1.5), 1.0},
                      0.0});
  LayerPrediction pred = make_prediction(pboxes, std::vector<int>(12, 0), 2);
  const std::vector<LabeledBox> gts = {{{{0, 0, 0}, {1, 1, 1}, 0}, 0}, {{{2, 2, 0}, {1, 1, 1}, 0}, 0}};
  const int k = 3;
  const auto expanded = repeat_targets(gts, k);
  const MatchResult m = match_layer(pred, expanded, LossWeights{}, 12);
  std::vector<int> per_original(gts.size(), 0);
  for (const auto& [p, g] : m.pairs) per_original[g % gts.size()]++;
  for (int count : per_original) EXPECT_LE(count, k);
}

TEST(DetectionLoss, PerfectPredictionClosedForm) {
  const RotatedBox3 box{{0.5, -0.5, 1.0}, {1, 2, 1}, 0.0};
  // Very confident correct class: focal term vanishes.
  LayerPrediction pred = make_prediction({box}, {0}, 1, 12, 50.0);
  const std::vector<LabeledBox> gts = {{box, 0}};
  LossWeights w;
  w.angle_res = w.angle_cls = 0.0;
  const MatchResult m = match_layer(pred, gts, w, 12);
  ASSERT_EQ(m.pairs.size(), 1u);
  Tensor loss = detection_loss({pred}, gts, {m}, w, 1, 12);
  EXPECT_NEAR(loss.item(), -w.giou, 1e-9);
}

TEST(DetectionLoss, FocalClosedFormAtHalf) {
  EXPECT_NEAR(focal_term(0.5), 0.25 * 0.25 * std::log(2.0), 1e-12);
  EXPECT_NEAR(focal_term(0.5), 0.0433216987849966, 1e-10);
}

TEST(DetectionLoss, HuberClosedForm) {
  EXPECT_NEAR(huber(0.3), 0.045, 1e-15);
  EXPECT_NEAR(huber(2.0), 1.5, 1e-15);   // linear branch
  EXPECT_NEAR(huber(-0.3), 0.045, 1e-15);
}

TEST(DetectionLoss, NonNegativeWithoutGiouTerm) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<RotatedBox3> pboxes;
    for (int i = 0; i < 4; ++i)
      pboxes.push_back({{uniform(rng, -2, 2), uniform(rng, -2, 2), 0.0},
                        {uniform(rng, 0.5, 2), uniform(rng, 0.5, 2), uniform(rng, 0.5, 2)},
                        uniform(rng, -3, 3)});
    LayerPrediction pred = make_prediction(pboxes, {0, 1, 0, 1}, 2, 12, uniform(rng, 0.5, 3.0));
    const std::vector<LabeledBox> gts = {{pboxes[2], 1}, {{{1, 1, 0}, {1, 1, 1}, 0.3}, 0}};
    LossWeights w;
    w.giou = 0.0;
    const MatchResult m = match_layer(pred, gts, w, 12);
    Tensor loss = detection_loss({pred}, gts, {m}, w, 2, 12);
    EXPECT_GE(loss.item(), 0.0);
  }
}

TEST(DetectionLoss, LambdaScalingScalesLossAndPreservesAssignment) {
  Rng rng(13);
  std::vector<RotatedBox3> pboxes;
  for (int i = 0; i < 5; ++i)
    pboxes.push_back({{uniform(rng, -2, 2), uniform(rng, -2, 2), 0.0},
                      {uniform(rng, 0.5, 2), uniform(rng, 0.5, 2), 1.0},
                      0.0});
  LayerPrediction pred = make_prediction(pboxes, {0, 1, 0, 1, 0}, 2, 12, 1.5);
  const std::vector<LabeledBox> gts = {{{{0.2, 0.1, 0}, {1, 1, 1}, 0}, 0}, {{{-1, 1, 0}, {1, 1.5, 1}, 0}, 1}};
  LossWeights w;
  LossWeights scaled = w;
  const double c = 3.5;
  scaled.giou *= c;
  scaled.center *= c;
  scaled.size *= c;
  scaled.cls *= c;
  scaled.angle_res *= c;
  scaled.angle_cls *= c;
  const MatchResult m1 = match_layer(pred, gts, w, 12);
  const MatchResult m2 = match_layer(pred, gts, scaled, 12);
  EXPECT_EQ(m1.pairs, m2.pairs);
  Tensor l1 = detection_loss({pred}, gts, {m1}, w, 2, 12);
  Tensor l2 = detection_loss({pred}, gts, {m2}, scaled, 2, 12);
  EXPECT_NEAR(l2.item(), c * l1.item(), 1e-9 * std::fabs(l2.item()) + 1e-12);
}

TEST(DetectionLoss, BoundedBelowByGiouTimesMatches) {
  Rng rng(15);
  std::vector<RotatedBox3> pboxes;
  for (int i = 0; i < 4; ++i)
    pboxes.push_back({{uniform(rng, -2, 2), uniform(rng, -2, 2), 0.0},
                      {uniform(rng, 0.5, 2), uniform(rng, 0.5, 2), 1.0},
                      0.0});
  LayerPrediction pred = make_prediction(pboxes, {0, 0, 1, 1}, 2, 12, 2.0);
  const std::vector<LabeledBox> gts = {{pboxes[0], 0}, {pboxes[2], 1}};
  LossWeights w;
  const MatchResult m = match_layer(pred, gts, w, 12);
  Tensor loss = detection_loss({pred}, gts, {m}, w, 2, 12);
  EXPECT_GE(loss.item(), -w.giou * static_cast<double>(m.pairs.size()));
}

TEST(DetectionLoss, GradientPassesFiniteDifferenceCheck) {
  // 2-query, 1-GT instance with every term active.
  Rng rng(17);
  ParamStore store;
  const int n_classes = 2, n_bins = 12;
  Parameter& center = store.create("center", {2, 3}, rng, 1.0);
  Parameter& log_size = store.create("log_size", {2, 3}, rng, 0.3);
  Parameter& cls = store.create("cls", {2, 3}, rng, 1.0);
  Parameter& angle_logits = store.create("angle", {2, 12}, rng, 1.0);
  Parameter& residual = store.create("res", {2, 1}, rng, 0.2);
  const std::vector<LabeledBox> gts = {{{{0.4, -0.2, 0.1}, {1.2, 0.9, 1.1}, 0.7}, 1}};
  LossWeights w;

  auto build = [&] {
    LayerPrediction pred;
    pred.center = center.tensor();
    pred.log_size = log_size.tensor();
    pred.class_logits = cls.tensor();
    pred.angle_logits = angle_logits.tensor();
    pred.angle_residual = residual.tensor();
    for (int i = 0; i < 2; ++i) {
      RotatedBox3 b;
      b.center = {center.tensor()[i * 3], center.tensor()[i * 3 + 1], center.tensor()[i * 3 + 2]};
      b.size = {std::exp(log_size.tensor()[i * 3]), std::exp(log_size.tensor()[i * 3 + 1]),
                std::exp(log_size.tensor()[i * 3 + 2])};
      b.yaw = 0.0;
      pred.boxes.push_back(b);
      pred.class_probs.push_back({0.3, 0.3, 0.4});
      pred.angle_bins.push_back(0);
    }
    return pred;
  };
  const MatchResult match = match_layer(build(), gts, w, n_bins);
  auto loss = [&] { return detection_loss({build()}, gts, {match}, w, n_classes, n_bins); };
  EXPECT_LT(finite_diff_check(store.pointers(), loss, 1e-5), 1e-4);
}

}  // namespace
