// SPDX-License-Identifier: Apache-2.0
#pragma once

// Trainable surface on top of the frozen encoders: prompt tokens shared by all
// class descriptions, and a low-bit bottleneck adapter on the image feature.
//
//   text description k :  [p_1 ... p_M, CLS_k]            (class tokens at the end by default)
//   adapted feature    :  v = α·h2(Q(relu(h1(z)))) + (1 − α)·z
//   prediction         :  softmax_k( cos(v, w_k) / τ )

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "p4q/quant.hpp"
#include "p4q/tensor.hpp"

namespace p4q {

enum class ClassTokenPosition : std::uint8_t { Front, Middle, End };

std::string to_string(ClassTokenPosition p);
ClassTokenPosition parse_class_token_position(const std::string& s);

struct PromptTokens {
  /// [D × M]; column j is prompt token j.
  Tensor P;
  ClassTokenPosition position = ClassTokenPosition::End;

  std::size_t length() const { return P.defined() ? P.dim(1) : 0; }
  std::size_t width() const { return P.dim(0); }
  bool learnable() const { return P.defined() && P.requires_grad(); }

  /// Learnable tokens drawn from N(0, 0.02²).
  static PromptTokens random(std::size_t width, std::size_t length, std::uint64_t seed,
                             ClassTokenPosition position = ClassTokenPosition::End);
  /// Fixed tokens taken from embedding rows ([M × D]), e.g. a hand-written template.
  static PromptTokens fixed(const Tensor& rows, ClassTokenPosition position = ClassTokenPosition::End);
};

/// Sequence of token embeddings [M + c × D] for one class whose name embeds to
/// `class_embedding` ([c × D]). Middle placement puts the first ⌊M/2⌋ prompt
/// tokens before the class tokens. Differentiable with respect to P.
Tensor build_text_description(const PromptTokens& prompt, const Tensor& class_embedding, std::size_t context_length);

struct QAdapterParams {
  Tensor h1_w;  // [D × D_h]
  Tensor h1_b;  // [D_h]
  Tensor h2_w;  // [D_h × D]
  Tensor h2_b;  // [D]
  double alpha = 0.2;
  int bits = 8;
  /// Unsigned per-tensor params of the inner activation, refreshed from each
  /// training batch and reused at evaluation.
  QuantParams act = QuantParams::identity();

  std::size_t width() const { return h1_w.dim(0); }
  std::size_t hidden() const { return h1_w.dim(1); }

  /// h1 ~ N(0, 1/D), h2 = 0, zero biases; all four trainable.
  static QAdapterParams init(std::size_t width, std::size_t hidden, double alpha, int bits, std::uint64_t seed);
  std::vector<Tensor*> parameters() { return {&h1_w, &h1_b, &h2_w, &h2_b}; }
  void validate() const;
};

/// Signed per-output-channel MinMax params for an adapter weight at `bits`.
QuantParams adapter_weight_params(const Tensor& w, int bits);

/// Sets `a.act` from the inner activation relu(ĥ1(z)) of this batch
/// (unsigned MinMax at a.bits). No-op at 32 bits.
void refresh_activation_params(QAdapterParams& a, const Tensor& z);

/// Adapted features for z ([n × D] or [D]). Weight params are derived from the
/// current weights on every call.
Tensor qadapter_forward(const Tensor& z, const QAdapterParams& a);

/// cos(v_i, w_k) / τ for every row pair, [n × K].
Tensor similarity_logits(const Tensor& v, const Tensor& w, double tau);
/// Row-wise softmax of similarity_logits.
Tensor predict(const Tensor& v, const Tensor& w, double tau);

/// The learnable state of one run. The prompt is always present (fixed
/// template tokens when not trained); the adapter is optional.
struct Adaptation {
  PromptTokens prompt;
  std::optional<QAdapterParams> adapter;

  void save(const std::filesystem::path& path) const;
  static Adaptation load(const std::filesystem::path& path);
};

}  // namespace p4q
