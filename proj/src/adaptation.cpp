// SPDX-License-Identifier: Apache-2.0
#include "p4q/adaptation.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "p4q/config.hpp"
#include "p4q/container.hpp"
#include "p4q/error.hpp"
#include "p4q/rng.hpp"

namespace p4q {

std::string to_string(ClassTokenPosition p) {
  switch (p) {
    case ClassTokenPosition::Front: return "front";
    case ClassTokenPosition::Middle: return "middle";
    case ClassTokenPosition::End: return "end";
  }
  return "?";
}

ClassTokenPosition parse_class_token_position(const std::string& s) {
  if (s == "front") return ClassTokenPosition::Front;
  if (s == "middle") return ClassTokenPosition::Middle;
  if (s == "end") return ClassTokenPosition::End;
  throw ParameterError("class token position must be front, middle or end, got '" + s + "'");
}

PromptTokens PromptTokens::random(std::size_t width, std::size_t length, std::uint64_t seed,
                                  ClassTokenPosition position) {
  PromptTokens p;
  p.position = position;
  if (length == 0) return p;
  Rng rng(seed);
  std::vector<double> v(width * length);
  for (double& x : v) x = rng.normal(0.0, 0.02);
  p.P = Tensor({width, length}, std::move(v));
  p.P.set_requires_grad(true);
  return p;
}

PromptTokens PromptTokens::fixed(const Tensor& rows, ClassTokenPosition position) {
  if (rows.rank() != 2) throw DimensionError("prompt rows must form an [M × D] matrix");
  PromptTokens p;
  p.position = position;
  p.P = transpose(rows).detach();
  return p;
}

Tensor build_text_description(const PromptTokens& prompt, const Tensor& class_embedding, std::size_t context_length) {
  if (class_embedding.rank() != 2 || class_embedding.dim(0) == 0)
    throw DimensionError("class embedding must be a non-empty [c × D] matrix");
  const std::size_t m = prompt.length();
  if (m > 0 && prompt.width() != class_embedding.dim(1))
    throw DimensionError("prompt width " + std::to_string(prompt.width()) + " differs from class embedding width " +
                         std::to_string(class_embedding.dim(1)));
  if (m + class_embedding.dim(0) > context_length)
    throw DimensionError("description of " + std::to_string(m + class_embedding.dim(0)) +
                         " tokens overflows the context length " + std::to_string(context_length));
  if (m == 0) return class_embedding;
  const Tensor rows = transpose(prompt.P);
  switch (prompt.position) {
    case ClassTokenPosition::End: return concat_rows({rows, class_embedding});
    case ClassTokenPosition::Front: return concat_rows({class_embedding, rows});
    case ClassTokenPosition::Middle: {
      const std::size_t before = m / 2;
      std::vector<Tensor> parts;
      if (before > 0) parts.push_back(slice_rows(rows, 0, before));
      parts.push_back(class_embedding);
      parts.push_back(slice_rows(rows, before, m - before));
      return concat_rows(parts);
    }
  }
  throw ParameterError("unknown class token position");
}

// ---- adapter ------------------------------------------------------------------

QAdapterParams QAdapterParams::init(std::size_t width, std::size_t hidden, double alpha, int bits, std::uint64_t seed) {
  if (width == 0 || hidden == 0) throw ParameterError("adapter widths must be positive");
  QAdapterParams a;
  a.alpha = alpha;
  a.bits = bits;
  Rng rng(seed);
  std::vector<double> w1(width * hidden);
  const double std1 = 1.0 / std::sqrt(static_cast<double>(width));
  for (double& x : w1) x = rng.normal(0.0, std1);
  a.h1_w = Tensor({width, hidden}, std::move(w1));
  a.h1_b = Tensor({hidden}, 0.0);
  a.h2_w = Tensor({hidden, width}, 0.0);
  a.h2_b = Tensor({width}, 0.0);
  for (Tensor* t : a.parameters()) t->set_requires_grad(true);
  a.validate();
  return a;
}

void QAdapterParams::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("adapt ratio alpha must lie in [0, 1]");
  if (!(bits == 2 || bits == 3 || bits == 4 || bits == 8 || bits == kDisabledBits))
    throw ParameterError("adapter bits must be one of 2, 3, 4, 8, 32");
  if (h1_w.rank() != 2 || h2_w.rank() != 2 || h1_w.dim(1) != h2_w.dim(0) || h2_w.dim(1) != h1_w.dim(0) ||
      h1_b.size() != h1_w.dim(1) || h2_b.size() != h2_w.dim(1))
    throw DimensionError("adapter tensors have inconsistent shapes");
  act.validate();
}

QuantParams adapter_weight_params(const Tensor& w, int bits) {
  if (bits == kDisabledBits) return QuantParams::identity();
  Calibrator c(1);
  c.observe(w.values(), w.shape());
  return c.minmax(bits, Signedness::Signed).params;
}

namespace {

Tensor inner_activation(const Tensor& z, const QAdapterParams& a, const Tensor& w1) {
  return relu(add_bias(matmul(z, w1), a.h1_b));
}

Tensor as_matrix(const Tensor& z) { return z.rank() == 1 ? reshape(z, {1, z.size()}) : z; }

}  // namespace

void refresh_activation_params(QAdapterParams& a, const Tensor& z) {
  if (a.bits == kDisabledBits) {
    a.act = QuantParams::identity();
    return;
  }
  const Tensor w1 = fake_quant(a.h1_w.detach(), adapter_weight_params(a.h1_w, a.bits));
  const Tensor h = inner_activation(as_matrix(z.detach()), a, w1);
  Calibrator c;
  c.observe(h);
  a.act = c.minmax(a.bits, Signedness::Unsigned).params;
}

Tensor qadapter_forward(const Tensor& z, const QAdapterParams& a) {
  a.validate();
  const Tensor x = as_matrix(z);
  if (x.dim(1) != a.width())
    throw DimensionError("adapter expects features of width " + std::to_string(a.width()) + ", got " +
                         shape_str(z.shape()));
  if (a.alpha == 0.0) return z;
  const Tensor w1 = fake_quant(a.h1_w, adapter_weight_params(a.h1_w, a.bits));
  const Tensor w2 = fake_quant(a.h2_w, adapter_weight_params(a.h2_w, a.bits));
  Tensor h = inner_activation(x, a, w1);
  if (a.bits != kDisabledBits) {
    if (!a.act.enabled()) throw StateError("adapter activation params were never refreshed");
    h = fake_quant(h, a.act);
  }
  const Tensor out = add(scale(add_bias(matmul(h, w2), a.h2_b), a.alpha), scale(x, 1.0 - a.alpha));
  return z.rank() == 1 ? reshape(out, {a.width()}) : out;
}

// ---- prediction -----------------------------------------------------------------

Tensor similarity_logits(const Tensor& v, const Tensor& w, double tau) {
  if (!(tau > 0.0)) throw ParameterError("temperature must be positive");
  const Tensor vm = as_matrix(v), wm = as_matrix(w);
  if (vm.dim(1) != wm.dim(1)) throw DimensionError("image and text features differ in width");
  return scale(matmul_nt(l2_normalize_rows(vm), l2_normalize_rows(wm)), 1.0 / tau);
}

Tensor predict(const Tensor& v, const Tensor& w, double tau) { return softmax_rows(similarity_logits(v, w, tau)); }

// ---- checkpoint ----------------------------------------------------------------

void Adaptation::save(const std::filesystem::path& path) const {
  TensorFile f;
  KeyValues meta;
  meta.set("M", static_cast<long long>(prompt.length()));
  meta.set("class_token_position", to_string(prompt.position));
  meta.set("prompt_learnable", static_cast<long long>(prompt.learnable() ? 1 : 0));
  if (prompt.length() > 0) f.add("prompt.P", prompt.P);
  meta.set("adapter", static_cast<long long>(adapter ? 1 : 0));
  if (adapter) {
    f.add("qadapter.h1.w", adapter->h1_w);
    f.add("qadapter.h1.b", adapter->h1_b);
    f.add("qadapter.h2.w", adapter->h2_w);
    f.add("qadapter.h2.b", adapter->h2_b);
    meta.set("alpha", adapter->alpha);
    meta.set("adapter_bits", static_cast<long long>(adapter->bits));
    std::ostringstream act;
    write_quant_record(act, "qadapter.act", adapter->act);
    meta.set("adapter_act", trim(act.str()));
  }
  f.save(path);
  meta.save(path.string() + ".meta");
}

Adaptation Adaptation::load(const std::filesystem::path& path) {
  const TensorFile f = TensorFile::load(path);
  const KeyValues meta = KeyValues::load(path.string() + ".meta");
  Adaptation a;
  a.prompt.position = parse_class_token_position(meta.get_or("class_token_position", "end"));
  const auto m = meta.require_int("M");
  if (m > 0) {
    a.prompt.P = f.get("prompt.P").tensor();
    if (a.prompt.P.rank() != 2 || a.prompt.length() != static_cast<std::size_t>(m))
      throw FormatError("prompt.P does not hold M tokens");
    if (meta.get_int("prompt_learnable", 0)) a.prompt.P.set_requires_grad(true);
  }
  if (meta.get_int("adapter", 0)) {
    QAdapterParams q;
    q.h1_w = f.get("qadapter.h1.w").tensor();
    q.h1_b = f.get("qadapter.h1.b").tensor();
    q.h2_w = f.get("qadapter.h2.w").tensor();
    q.h2_b = f.get("qadapter.h2.b").tensor();
    q.alpha = meta.require_double("alpha");
    q.bits = static_cast<int>(meta.require_int("adapter_bits"));
    q.act = parse_quant_record(meta.require("adapter_act")).second;
    for (Tensor* t : q.parameters()) t->set_requires_grad(true);
    try {
      q.validate();
    } catch (const Error& e) {
      throw FormatError(std::string("invalid adapter checkpoint: ") + e.what());
    }
    a.adapter = std::move(q);
  }
  return a;
}

}  // namespace p4q
