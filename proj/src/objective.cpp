// SPDX-License-Identifier: Apache-2.0
#include "p4q/objective.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "p4q/error.hpp"

namespace p4q {

std::string to_string(DistillForm f) { return f == DistillForm::AsWritten ? "as_written" : "teacher_weighted"; }

DistillForm parse_distill_form(const std::string& s) {
  if (s == "as_written") return DistillForm::AsWritten;
  if (s == "teacher_weighted") return DistillForm::TeacherWeighted;
  throw ParameterError("distill_form must be as_written or teacher_weighted, got '" + s + "'");
}

void BatchPredictions::validate() const {
  if (student_logits.rank() != 2 || student_logits.dim(0) == 0)
    throw DimensionError("student logits must be a non-empty [n × K] matrix");
  if (teacher_logits.shape() != student_logits.shape())
    throw DimensionError("teacher logits " + shape_str(teacher_logits.shape()) + " differ from student logits " +
                         shape_str(student_logits.shape()));
  if (labels.size() != student_logits.dim(0)) throw DimensionError("need one label per sample");
  for (std::size_t y : labels)
    if (y >= student_logits.dim(1)) throw DimensionError("label " + std::to_string(y) + " outside the class range");
}

Tensor sorted_mean(const Tensor& v) {
  if (v.size() == 0) throw DimensionError("mean of an empty tensor");
  const auto x = v.values();
  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  double acc = 0.0;
  for (double s : sorted) acc += s;
  const double n = static_cast<double>(x.size());
  return make_op("sorted_mean", {}, {acc / n}, {v}, [n](std::span<const double> g, GradSink& sink) {
    auto gv = sink[0];
    for (double& e : gv) e += g[0] / n;
  });
}

Tensor classification_terms(const Tensor& student_logits, std::span<const std::size_t> labels) {
  if (student_logits.rank() != 2 || student_logits.dim(0) == 0)
    throw DimensionError("classification loss needs a non-empty [n × K] logit matrix");
  if (labels.size() != student_logits.dim(0)) throw DimensionError("need one label per sample");
  return scale(pick(log_softmax_rows(student_logits), labels), -1.0);
}

Tensor classification_loss(const Tensor& student_logits, std::span<const std::size_t> labels) {
  return sorted_mean(classification_terms(student_logits, labels));
}

Tensor distillation_terms(const BatchPredictions& b, DistillForm form) {
  b.validate();
  const Tensor log_ps = pick(log_softmax_rows(b.student_logits), b.labels);
  const Tensor log_pt_full = log_softmax_rows(b.teacher_logits.detach());
  std::vector<double> log_pt(b.labels.size()), pt(b.labels.size());
  const std::size_t k = b.teacher_logits.dim(1);
  const double floor_log = std::log(kTeacherProbFloor);
  for (std::size_t i = 0; i < b.labels.size(); ++i) {
    const double lp = log_pt_full.value(i * k + b.labels[i]);
    log_pt[i] = std::max(lp, floor_log);
    pt[i] = std::exp(lp);
  }
  const Shape n{b.labels.size()};
  Tensor terms = form == DistillForm::AsWritten ? mul(exp(log_ps), Tensor(n, std::move(log_pt)))
                                                : mul(Tensor(n, std::move(pt)), log_ps);
  return scale(terms, -1.0);
}

Tensor distillation_loss(const BatchPredictions& b, DistillForm form) { return sorted_mean(distillation_terms(b, form)); }

Tensor total_loss(const Tensor& lc, const Tensor& ld, double lambda) {
  if (!(lambda >= 0.0)) throw ParameterError("lambda must be non-negative");
  if (lc.size() != 1 || ld.size() != 1) throw DimensionError("total loss combines two scalars");
  return add(lc, scale(ld, lambda));
}

LossTerms joint_loss(const BatchPredictions& b, double lambda, DistillForm form) {
  LossTerms t;
  t.classification_terms = classification_terms(b.student_logits, b.labels);
  t.distillation_terms = distillation_terms(b, form);
  t.classification = sorted_mean(t.classification_terms);
  t.distillation = sorted_mean(t.distillation_terms);
  t.total = total_loss(t.classification, t.distillation, lambda);
  return t;
}

}  // namespace p4q
