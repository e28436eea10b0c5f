// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training losses on similarity logits (cosine / τ).
//
//   L_c    = −(1/n) Σ_i log p_s(y_i | x_i)
//   L_dist = −(1/n) Σ_i p_s(y_i | x_i) · log p_t(y_i | x_i)      (as written)
//          = −(1/n) Σ_i p_t(y_i | x_i) · log p_s(y_i | x_i)      (teacher weighted)
//   L      = L_c + λ · L_dist
//
// Probabilities are never stored and re-logged: every log-probability comes
// from a log-softmax of the logits. Per-sample terms are summed in ascending
// order of value, so every loss is exactly invariant to the batch order.

#include <span>
#include <string>
#include <vector>

#include "p4q/tensor.hpp"

namespace p4q {

enum class DistillForm : std::uint8_t { AsWritten, TeacherWeighted };

std::string to_string(DistillForm f);
DistillForm parse_distill_form(const std::string& s);

/// Lower clamp on the teacher probability inside the log.
inline constexpr double kTeacherProbFloor = 1e-12;

struct BatchPredictions {
  /// [n × K], differentiable.
  Tensor student_logits;
  /// [n × K]; any gradient history is ignored.
  Tensor teacher_logits;
  std::vector<std::size_t> labels;

  void validate() const;
};

/// Mean of a vector, summing in ascending order of value.
Tensor sorted_mean(const Tensor& v);

/// Per-sample −log p_s(y_i | x_i), shape [n].
Tensor classification_terms(const Tensor& student_logits, std::span<const std::size_t> labels);
/// Per-sample distillation terms, shape [n].
Tensor distillation_terms(const BatchPredictions& b, DistillForm form = DistillForm::AsWritten);

Tensor classification_loss(const Tensor& student_logits, std::span<const std::size_t> labels);
Tensor distillation_loss(const BatchPredictions& b, DistillForm form = DistillForm::AsWritten);
/// lc + λ·ld; λ must be non-negative.
Tensor total_loss(const Tensor& lc, const Tensor& ld, double lambda);

struct LossTerms {
  Tensor classification;
  Tensor distillation;
  Tensor total;
  /// Per-sample values behind the two means.
  Tensor classification_terms;
  Tensor distillation_terms;
};

LossTerms joint_loss(const BatchPredictions& b, double lambda, DistillForm form = DistillForm::AsWritten);

}  // namespace p4q
