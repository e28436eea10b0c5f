// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "p4q/error.hpp"
#include "p4q/objective.hpp"
#include "test_util.hpp"

namespace p4q {
namespace {

// −(1/n) Σ log softmax(x_i)[y_i] with explicit exponentials.
double brute_force_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(logits.at(i, j));
    total += -std::log(std::exp(logits.at(i, labels[i])) / z);
  }
  return total / static_cast<double>(n);
}

double softmax_at(const Tensor& logits, std::size_t i, std::size_t y) {
  double z = 0.0;
  for (std::size_t j = 0; j < logits.dim(1); ++j) z += std::exp(logits.at(i, j));
  return std::exp(logits.at(i, y)) / z;
}

TEST(ClassificationLoss, HandValues) {
  const std::size_t y0[] = {0};
  EXPECT_NEAR(classification_loss(Tensor::from_rows({{1.0, 0.0}}), y0).item(), 0.31326, 5e-6);
  EXPECT_NEAR(classification_loss(Tensor::from_rows({{1.0, 0.0}}), y0).item(), -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)),
              1e-15);
  const std::size_t y3[] = {0, 3, 2};
  EXPECT_NEAR(classification_loss(Tensor({3, 5}, 0.7), y3).item(), std::log(5.0), 1e-10);
  EXPECT_NEAR(classification_loss(Tensor::from_rows({{800.0, 0.0}, {0.0, 800.0}}), std::vector<std::size_t>{0, 1}).item(),
              0.0, 1e-12);
}

TEST(ClassificationLoss, MatchesBruteForceOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor logits = test::random_tensor(rng, {9, 6}, 3.0);
    std::vector<std::size_t> labels(9);
    for (auto& y : labels) y = rng.below(6);
    EXPECT_NEAR(classification_loss(logits, labels).item(), brute_force_cross_entropy(logits, labels), 1e-10);
  }
}

TEST(ClassificationLoss, ExtremeLogitsStayFinite) {
  const std::size_t y[] = {1};
  const double l = classification_loss(Tensor::from_rows({{1000.0, -1000.0}}), y).item();
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, 2000.0, 1e-9);
}

TEST(DistillationLoss, HandValues) {
  BatchPredictions b{Tensor::from_rows({{0.0, 0.0}}), Tensor::from_rows({{0.0, 0.0}}), {0}};
  EXPECT_NEAR(distillation_loss(b).item(), 0.34657, 5e-6);
  EXPECT_NEAR(distillation_loss(b).item(), -0.5 * std::log(0.5), 1e-15);
  b.teacher_logits = Tensor::from_rows({{900.0, 0.0}});
  EXPECT_EQ(distillation_loss(b).item(), 0.0);
  EXPECT_EQ(distillation_loss(b, DistillForm::TeacherWeighted).item(), -std::log(0.5));
}

TEST(DistillationLoss, ZeroTeacherProbabilityIsClamped) {
  BatchPredictions b{Tensor::from_rows({{0.0, 0.0}}), Tensor::from_rows({{0.0, 5000.0}}), {0}};
  EXPECT_NEAR(distillation_loss(b).item(), -0.5 * std::log(kTeacherProbFloor), 1e-9);
}

TEST(DistillationLoss, DuplicatingTheBatchLeavesTheValue) {
  Rng rng(2);
  const Tensor s = test::random_tensor(rng, {3, 4}), t = test::random_tensor(rng, {3, 4});
  const BatchPredictions once{s, t, {0, 3, 1}};
  const BatchPredictions twice{concat_rows({s, s}), concat_rows({t, t}), {0, 3, 1, 0, 3, 1}};
  for (auto form : {DistillForm::AsWritten, DistillForm::TeacherWeighted})
    EXPECT_NEAR(distillation_loss(once, form).item(), distillation_loss(twice, form).item(), 1e-15);
}

TEST(DistillationLoss, MatchesBruteForceForBothForms) {
  Rng rng(3);
  const Tensor s = test::random_tensor(rng, {6, 5}, 2.0), t = test::random_tensor(rng, {6, 5}, 2.0);
  const std::vector<std::size_t> y = {4, 0, 2, 2, 1, 3};
  double as_written = 0.0, weighted = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    const double ps = softmax_at(s, i, y[i]), pt = softmax_at(t, i, y[i]);
    as_written += -ps * std::log(pt);
    weighted += -pt * std::log(ps);
  }
  const BatchPredictions b{s, t, y};
  EXPECT_NEAR(distillation_loss(b).item(), as_written / 6.0, 1e-12);
  EXPECT_NEAR(distillation_loss(b, DistillForm::TeacherWeighted).item(), weighted / 6.0, 1e-12);
}

TEST(DistillationLoss, StudentGradientMatchesCentralDifferences) {
  Rng rng(4);
  for (auto form : {DistillForm::AsWritten, DistillForm::TeacherWeighted}) {
    Tensor s = test::random_tensor(rng, {5, 4}).set_requires_grad(true);
    Tensor t = test::random_tensor(rng, {5, 4}).set_requires_grad(true);
    auto f = [&] { return distillation_loss(BatchPredictions{s, t, {1, 0, 3, 3, 2}}, form); };
    EXPECT_LE(test::max_relative_error(test::tape_gradient(s, f), test::numeric_gradient(s, f)), 1e-4);
    for (double g : test::tape_gradient(t, f)) EXPECT_EQ(g, 0.0);
  }
}

TEST(TotalLoss, ArithmeticAndLinearity) {
  const Tensor lc = Tensor::scalar(0.5), ld = Tensor::scalar(0.25);
  EXPECT_EQ(total_loss(lc, ld, 0.0).item(), 0.5);
  EXPECT_EQ(total_loss(lc, ld, 1.0).item(), 0.75);
  EXPECT_EQ(total_loss(lc, ld, 1.5).item(), 0.875);
  EXPECT_THROW(total_loss(lc, ld, -0.1), ParameterError);

  Rng rng(5);
  const BatchPredictions b{test::random_tensor(rng, {4, 3}), test::random_tensor(rng, {4, 3}), {0, 1, 2, 1}};
  const LossTerms base = joint_loss(b, 0.0);
  for (double lambda : {0.25, 0.5, 1.0, 2.0}) {
    const LossTerms t = joint_loss(b, lambda);
    EXPECT_EQ(t.total.item(), base.classification.item() + lambda * base.distillation.item());
  }
}

TEST(Losses, ExactlyInvariantToBatchOrder) {
  Rng rng(6);
  const Tensor s = test::random_tensor(rng, {7, 5}, 2.0), t = test::random_tensor(rng, {7, 5}, 2.0);
  const std::vector<std::size_t> y = {0, 4, 1, 3, 3, 2, 0};
  std::vector<std::size_t> order(7);
  std::iota(order.begin(), order.end(), 0);
  std::reverse(order.begin(), order.end());
  std::rotate(order.begin(), order.begin() + 3, order.end());
  std::vector<std::size_t> yp;
  for (std::size_t i : order) yp.push_back(y[i]);
  const BatchPredictions a{s, t, y}, b{gather_rows(s, order), gather_rows(t, order), yp};
  for (auto form : {DistillForm::AsWritten, DistillForm::TeacherWeighted}) {
    const LossTerms la = joint_loss(a, 1.0, form), lb = joint_loss(b, 1.0, form);
    EXPECT_EQ(la.classification.item(), lb.classification.item());
    EXPECT_EQ(la.distillation.item(), lb.distillation.item());
    EXPECT_EQ(la.total.item(), lb.total.item());
  }
}

TEST(Losses, ValidationErrors) {
  EXPECT_THROW(distillation_loss(BatchPredictions{Tensor({2, 3}), Tensor({2, 4}), {0, 1}}), DimensionError);
  EXPECT_THROW(distillation_loss(BatchPredictions{Tensor({2, 3}), Tensor({2, 3}), {0, 3}}), DimensionError);
  const std::size_t y[] = {0};
  EXPECT_THROW(classification_loss(Tensor({2, 3}), y), DimensionError);
  EXPECT_THROW(parse_distill_form("reverse"), ParameterError);
}

}  // namespace
}  // namespace p4q
