// SPDX-License-Identifier: Apache-2.0
#include "p4q/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>

#include "p4q/error.hpp"
#include "p4q/kernels.hpp"

namespace p4q {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t tape_id = 0;
};

}  // namespace detail

namespace {

thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_tape_counter{0};

#ifdef NDEBUG
std::atomic<bool> g_debug_checks{false};
#else
std::atomic<bool> g_debug_checks{true};
#endif

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

void require_matrix(const Tensor& a, const char* op) {
  if (!a.defined() || a.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         (a.defined() ? shape_str(a.shape()) : std::string("<undefined>")));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

std::vector<double> copy_values(const Tensor& a) { return {a.values().begin(), a.values().end()}; }

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<detail::Node>()) {
  for (auto e : shape)
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  node_->values.assign(shape_size(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
  for (auto e : shape)
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  if (shape_size(shape) != values.size())
    throw DimensionError("shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) +
                         " values");
  node_->shape = std::move(shape);
  node_->values = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> values;
  const std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("from_rows: ragged rows");
    values.insert(values.end(), r.begin(), r.end());
  }
  return matrix(rows.size(), cols, std::move(values));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->values.size(); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return shape()[axis];
}

std::size_t Tensor::rows() const { return rank() >= 2 ? shape_size(shape()) / shape().back() : 1; }
std::size_t Tensor::cols() const { return rank() >= 1 ? shape().back() : 1; }

std::span<const double> Tensor::values() const { return node_->values; }

std::span<double> Tensor::mutable_values() {
  if (!node_->leaf) throw UsageError("mutable_values on a tensor produced by an op");
  return node_->values;
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->values[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_->leaf) throw UsageError("requires_grad can only be toggled on leaves");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return node_->leaf; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(shape(), copy_values(*this)); }

// ---- Tape ------------------------------------------------------------------

std::span<double> GradSink::operator[](std::size_t input) {
  auto& node = *inputs_.at(input);
  if (!node.requires_grad) return {};
  if (node.grad.empty()) node.grad.assign(node.values.size(), 0.0);
  return node.grad;
}

bool GradSink::wants(std::size_t input) const { return inputs_.at(input)->requires_grad; }

Tape::Tape() : id_(++g_tape_counter) {}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::record(Entry entry) {
  if (consumed_) throw UsageError("recording onto a tape whose backward pass already ran");
  entry.output->tape_id = id_;
  entries_.push_back(std::move(entry));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw UsageError("backward called twice on the same tape");
  if (!loss.defined() || loss.size() != 1)
    throw UsageError("backward needs a scalar loss, got " + (loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
  if (loss.node_->tape_id != id_) throw UsageError("loss was not recorded on this tape");

  auto last = entries_.end();
  while (last != entries_.begin() && (last - 1)->output != loss.node_) --last;
  if (last == entries_.begin()) throw UsageError("loss was not recorded on this tape");

  loss.node_->grad.assign(1, 1.0);
  for (auto it = std::make_reverse_iterator(last); it != entries_.rend(); ++it) {
    auto& out = *it->output;
    if (out.grad.empty()) continue;
    GradSink sink(it->inputs);
    it->backward(out.grad, sink);
    std::vector<double>().swap(out.grad);
  }
  consumed_ = true;
  entries_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (!tape) throw UsageError("backward called with no active tape");
  tape->backward(loss);
}

void set_debug_checks(bool on) { g_debug_checks = on; }
bool debug_checks() { return g_debug_checks; }

Tensor make_op(const char* op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
               BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values));
  out.node_->leaf = false;

  if (g_debug_checks && !all_finite(out.values())) {
    const bool inputs_finite =
        std::all_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return all_finite(t.values()); });
    if (inputs_finite) throw NumericError(std::string("op '") + op + "' produced a non-finite value from finite inputs");
  }

  Tape* tape = g_active_tape;
  const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (tape && needs) {
    out.node_->requires_grad = true;
    Tape::Entry entry{op, {}, out.node_, std::move(backward)};
    entry.inputs.reserve(inputs.size());
    for (auto& t : inputs) entry.inputs.push_back(t.node_);
    tape->record(std::move(entry));
  }
  return out;
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> c(m * n);
  kernels::parallel::matmul(a.values().data(), b.values().data(), c.data(), m, k, n);
  return make_op("matmul", {m, n}, std::move(c), {a, b}, [a, b, m, k, n](std::span<const double> g, GradSink& sink) {
    std::vector<double> tmp;
    if (auto ga = sink[0]; !ga.empty()) {
      tmp.resize(m * k);
      kernels::parallel::matmul_nt(g.data(), b.values().data(), tmp.data(), m, n, k);
      for (std::size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
    }
    if (auto gb = sink[1]; !gb.empty()) {
      tmp.resize(k * n);
      kernels::parallel::matmul_tn(a.values().data(), g.data(), tmp.data(), k, m, n);
      for (std::size_t i = 0; i < tmp.size(); ++i) gb[i] += tmp[i];
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw DimensionError("matmul_nt: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "ᵀ");
  std::vector<double> c(m * n);
  kernels::parallel::matmul_nt(a.values().data(), b.values().data(), c.data(), m, k, n);
  return make_op("matmul_nt", {m, n}, std::move(c), {a, b}, [a, b, m, k, n](std::span<const double> g, GradSink& sink) {
    std::vector<double> tmp;
    if (auto ga = sink[0]; !ga.empty()) {
      tmp.resize(m * k);
      kernels::parallel::matmul(g.data(), b.values().data(), tmp.data(), m, n, k);
      for (std::size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
    }
    if (auto gb = sink[1]; !gb.empty()) {
      tmp.resize(n * k);
      kernels::parallel::matmul_tn(g.data(), a.values().data(), tmp.data(), n, m, k);
      for (std::size_t i = 0; i < tmp.size(); ++i) gb[i] += tmp[i];
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto v = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  return make_op("transpose", {n, m}, std::move(out), {a}, [m, n](std::span<const double> g, GradSink& sink) {
    auto ga = sink[0];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value(i) + b.value(i);
  return make_op("add", a.shape(), std::move(out), {a, b}, [](std::span<const double> g, GradSink& sink) {
    for (std::size_t in = 0; in < 2; ++in)
      if (auto gi = sink[in]; !gi.empty())
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value(i) - b.value(i);
  return make_op("sub", a.shape(), std::move(out), {a, b}, [](std::span<const double> g, GradSink& sink) {
    if (auto ga = sink[0]; !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = sink[1]; !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value(i) * b.value(i);
  return make_op("mul", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g, GradSink& sink) {
    if (auto ga = sink[0]; !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.value(i);
    if (auto gb = sink[1]; !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.value(i);
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value(i) * c;
  return make_op("scale", a.shape(), std::move(out), {a}, [c](std::span<const double> g, GradSink& sink) {
    auto ga = sink[0];
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  if (bias.rank() != 1 || a.rank() < 1 || a.cols() != bias.size())
    throw DimensionError("add_bias: " + shape_str(a.shape()) + " + " + shape_str(bias.shape()));
  const std::size_t n = bias.size(), m = a.size() / n;
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.value(i * n + j) + bias.value(j);
  return make_op("add_bias", a.shape(), std::move(out), {a, bias}, [m, n](std::span<const double> g, GradSink& sink) {
    if (auto ga = sink[0]; !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = sink[1]; !gb.empty())
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value(i) > 0.0 ? a.value(i) : 0.0;
  return make_op("relu", a.shape(), std::move(out), {a}, [a](std::span<const double> g, GradSink& sink) {
    auto ga = sink[0];
    for (std::size_t i = 0; i < g.size(); ++i)
      if (a.value(i) > 0.0) ga[i] += g[i];
  });
}

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.value(i);
    out[i] = 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  }
  return make_op("gelu", a.shape(), std::move(out), {a}, [a](std::span<const double> g, GradSink& sink) {
    auto ga = sink[0];
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = a.value(i);
      const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      ga[i] += g[i] * (cdf + x * pdf);
    }
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.value(i));
  auto values = out;
  return make_op("exp", a.shape(), std::move(out), {a}, [values = std::move(values)](std::span<const double> g, GradSink& sink) {
    auto ga = sink[0];
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * values[i];
  });
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(a.value(i) > 0.0)) throw ParameterError("log of a non-positive value");
    out[i] = std::log(a.value(i));
  }
  return make_op("log", a.shape(), std::move(out), {a}, [a](std::span<const double> g, GradSink& sink) {
    auto ga = sink[0];
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / a.value(i);
  });
}

// ---- row-wise normalisations -------------------------------------------------

Tensor softmax_rows(const Tensor& a, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("softmax temperature must be positive");
  if (a.rank() < 1) throw DimensionError("softmax_rows on a scalar");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  kernels::parallel::softmax_rows(a.values().data(), out.data(), m, n, temperature);
  auto probs = out;
  return make_op("softmax_rows", a.shape(), std::move(out), {a},
                 [probs = std::move(probs), m, n, temperature](std::span<const double> g, GradSink& sink) {
                   auto ga = sink[0];
                   for (std::size_t i = 0; i < m; ++i) {
                     const double* y = probs.data() + i * n;
                     const double* gy = g.data() + i * n;
                     double dot = 0.0;
                     for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
                     for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += y[j] * (gy[j] - dot) / temperature;
                   }
                 });
}

Tensor log_softmax_rows(const Tensor& a, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("softmax temperature must be positive");
  if (a.rank() < 1) throw DimensionError("log_softmax_rows on a scalar");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.size()), probs(a.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.values().data() + i * n;
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp((x[j] - mx) / temperature);
    const double lse = std::log(s);
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = (x[j] - mx) / temperature - lse;
      probs[i * n + j] = std::exp(out[i * n + j]);
    }
  }
  return make_op("log_softmax_rows", a.shape(), std::move(out), {a},
                 [probs = std::move(probs), m, n, temperature](std::span<const double> g, GradSink& sink) {
                   auto ga = sink[0];
                   for (std::size_t i = 0; i < m; ++i) {
                     double gs = 0.0;
                     for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
                     for (std::size_t j = 0; j < n; ++j)
                       ga[i * n + j] += (g[i * n + j] - probs[i * n + j] * gs) / temperature;
                   }
                 });
}

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(eps > 0.0)) throw ParameterError("layer_norm eps must be positive");
  const std::size_t n = a.cols();
  if (a.rank() < 1 || gamma.size() != n || beta.size() != n)
    throw DimensionError("layer_norm: width " + std::to_string(n) + " vs gamma " + shape_str(gamma.shape()) +
                         ", beta " + shape_str(beta.shape()));
  const std::size_t m = a.rows();
  std::vector<double> out(a.size()), mean_v(m), rstd(m);
  kernels::parallel::layer_norm_rows(a.values().data(), gamma.values().data(), beta.values().data(), out.data(),
                                     mean_v.data(), rstd.data(), m, n, eps);
  return make_op("layer_norm", a.shape(), std::move(out), {a, gamma, beta},
                 [a, gamma, m, n, mean_v = std::move(mean_v), rstd = std::move(rstd)](std::span<const double> g,
                                                                                       GradSink& sink) {
                   auto ga = sink[0];
                   auto gg = sink[1];
                   auto gb = sink[2];
                   std::vector<double> xhat(n), dxhat(n);
                   for (std::size_t i = 0; i < m; ++i) {
                     const double* x = a.values().data() + i * n;
                     const double* gy = g.data() + i * n;
                     double mean_d = 0.0, mean_dx = 0.0;
                     for (std::size_t j = 0; j < n; ++j) {
                       xhat[j] = (x[j] - mean_v[i]) * rstd[i];
                       dxhat[j] = gy[j] * gamma.value(j);
                       mean_d += dxhat[j];
                       mean_dx += dxhat[j] * xhat[j];
                       if (!gg.empty()) gg[j] += gy[j] * xhat[j];
                       if (!gb.empty()) gb[j] += gy[j];
                     }
                     if (ga.empty()) continue;
                     mean_d /= static_cast<double>(n);
                     mean_dx /= static_cast<double>(n);
                     for (std::size_t j = 0; j < n; ++j)
                       ga[i * n + j] += rstd[i] * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                   }
                 });
}

Tensor l2_normalize_rows(const Tensor& a) {
  if (a.rank() < 1) throw DimensionError("l2_normalize_rows on a scalar");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.size()), norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a.value(i * n + j) * a.value(i * n + j);
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0) throw DegenerateVectorError("cannot normalise a zero-norm row");
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.value(i * n + j) / norms[i];
  }
  auto unit = out;
  return make_op("l2_normalize_rows", a.shape(), std::move(out), {a},
                 [unit = std::move(unit), norms = std::move(norms), m, n](std::span<const double> g, GradSink& sink) {
                   auto ga = sink[0];
                   for (std::size_t i = 0; i < m; ++i) {
                     double dot = 0.0;
                     for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * unit[i * n + j];
                     for (std::size_t j = 0; j < n; ++j)
                       ga[i * n + j] += (g[i * n + j] - unit[i * n + j] * dot) / norms[i];
                   }
                 });
}

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw DimensionError("cosine_similarity: lengths differ");
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (!(uu > 0.0) || !(vv > 0.0)) throw DegenerateVectorError("cosine similarity of a zero-norm vector");
  return std::clamp(uv / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
  require_same_shape(u, v, "cosine_similarity");
  const std::size_t n = u.size();
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    uv += u.value(i) * v.value(i);
    uu += u.value(i) * u.value(i);
    vv += v.value(i) * v.value(i);
  }
  if (!(uu > 0.0) || !(vv > 0.0)) throw DegenerateVectorError("cosine similarity of a zero-norm vector");
  const double nu = std::sqrt(uu), nv = std::sqrt(vv);
  const double c = uv / (nu * nv);
  return make_op("cosine_similarity", {}, {c}, {u, v}, [u, v, n, nu, nv, c](std::span<const double> g, GradSink& sink) {
    if (auto gu = sink[0]; !gu.empty())
      for (std::size_t i = 0; i < n; ++i) gu[i] += g[0] * (v.value(i) / (nu * nv) - c * u.value(i) / (nu * nu));
    if (auto gv = sink[1]; !gv.empty())
      for (std::size_t i = 0; i < n; ++i) gv[i] += g[0] * (u.value(i) / (nu * nv) - c * v.value(i) / (nv * nv));
  });
}

// ---- reductions ----------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return make_op("sum", {}, {s}, {a}, [](std::span<const double> g, GradSink& sink) {
    auto ga = sink[0];
    for (auto& x : ga) x += g[0];
  });
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  const double inv = 1.0 / static_cast<double>(a.size());
  return make_op("mean", {}, {s * inv}, {a}, [inv](std::span<const double> g, GradSink& sink) {
    auto ga = sink[0];
    for (auto& x : ga) x += g[0] * inv;
  });
}

Tensor mean_rows(const Tensor& a) {
  require_matrix(a, "mean_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a.value(i * n + j);
  const double inv = 1.0 / static_cast<double>(m);
  for (auto& x : out) x *= inv;
  return make_op("mean_rows", {n}, std::move(out), {a}, [m, n, inv](std::span<const double> g, GradSink& sink) {
    auto ga = sink[0];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j] * inv;
  });
}

// ---- structural ------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return make_op("reshape", std::move(shape), copy_values(a), {a}, [](std::span<const double> g, GradSink& sink) {
    auto ga = sink[0];
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  require_matrix(a, "slice_rows");
  const std::size_t n = a.dim(1);
  if (count == 0 || start + count > a.dim(0))
    throw DimensionError("slice_rows [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                         shape_str(a.shape()));
  const auto v = a.values();
  std::vector<double> out(v.begin() + static_cast<std::ptrdiff_t>(start * n),
                          v.begin() + static_cast<std::ptrdiff_t>((start + count) * n));
  return make_op("slice_rows", {count, n}, std::move(out), {a}, [start, n](std::span<const double> g, GradSink& sink) {
    auto ga = sink[0];
    for (std::size_t i = 0; i < g.size(); ++i) ga[start * n + i] += g[i];
  });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  require_matrix(a, "slice_cols");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (count == 0 || start + count > n)
    throw DimensionError("slice_cols [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                         shape_str(a.shape()));
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a.value(i * n + start + j);
  return make_op("slice_cols", {m, count}, std::move(out), {a},
                 [m, n, start, count](std::span<const double> g, GradSink& sink) {
                   auto ga = sink[0];
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < count; ++j) ga[i * n + start + j] += g[i * count + j];
                 });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.dim(1) != n) throw DimensionError("concat_rows: widths differ");
    offsets.push_back(m * n);
    m += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  return make_op("concat_rows", {m, n}, std::move(out), parts, [offsets](std::span<const double> g, GradSink& sink) {
    for (std::size_t p = 0; p < offsets.size(); ++p) {
      auto gp = sink[p];
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[p] + i];
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  std::vector<std::size_t> offsets, widths;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.dim(0) != m) throw DimensionError("concat_cols: heights differ");
    offsets.push_back(n);
    widths.push_back(p.dim(1));
    n += p.dim(1);
  }
  std::vector<double> out(m * n);
  for (std::size_t p = 0; p < parts.size(); ++p)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[p]; ++j) out[i * n + offsets[p] + j] = parts[p].value(i * widths[p] + j);
  return make_op("concat_cols", {m, n}, std::move(out), parts,
                 [m, n, offsets, widths](std::span<const double> g, GradSink& sink) {
                   for (std::size_t p = 0; p < offsets.size(); ++p) {
                     auto gp = sink[p];
                     if (gp.empty()) continue;
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < widths[p]; ++j) gp[i * widths[p] + j] += g[i * n + offsets[p] + j];
                   }
                 });
}

Tensor row(const Tensor& a, std::size_t i) { return slice_rows(a, i, 1); }

Tensor pick(const Tensor& a, std::span<const std::size_t> index) {
  require_matrix(a, "pick");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (index.size() != m) throw DimensionError("pick: need one index per row");
  std::vector<double> out(m);
  std::vector<std::size_t> idx(index.begin(), index.end());
  for (std::size_t i = 0; i < m; ++i) {
    if (idx[i] >= n) throw DimensionError("pick: index " + std::to_string(idx[i]) + " out of range");
    out[i] = a.value(i * n + idx[i]);
  }
  return make_op("pick", {m}, std::move(out), {a}, [idx = std::move(idx), n](std::span<const double> g, GradSink& sink) {
    auto ga = sink[0];
    for (std::size_t i = 0; i < idx.size(); ++i) ga[i * n + idx[i]] += g[i];
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  require_matrix(a, "gather_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> out(idx.size() * n);
  const auto v = a.values();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= m) throw DimensionError("gather_rows: row " + std::to_string(idx[r]) + " out of range");
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(idx[r] * n), n, out.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  const std::size_t rows = idx.size();
  return make_op("gather_rows", {rows, n}, std::move(out), {a},
                 [idx = std::move(idx), n](std::span<const double> g, GradSink& sink) {
                   auto ga = sink[0];
                   for (std::size_t r = 0; r < idx.size(); ++r)
                     for (std::size_t j = 0; j < n; ++j) ga[idx[r] * n + j] += g[r * n + j];
                 });
}

Tensor segment_mean_rows(const Tensor& a, std::span<const std::size_t> lengths) {
  require_matrix(a, "segment_mean_rows");
  const std::size_t n = a.dim(1);
  std::size_t total = 0;
  for (std::size_t len : lengths) {
    if (len == 0) throw DimensionError("segment_mean_rows: empty segment");
    total += len;
  }
  if (lengths.empty() || total != a.dim(0))
    throw DimensionError("segment_mean_rows: segment lengths do not cover " + shape_str(a.shape()));
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());
  std::vector<double> out(lens.size() * n, 0.0);
  const auto v = a.values();
  std::size_t r0 = 0;
  for (std::size_t s = 0; s < lens.size(); ++s) {
    for (std::size_t r = r0; r < r0 + lens[s]; ++r)
      for (std::size_t j = 0; j < n; ++j) out[s * n + j] += v[r * n + j];
    for (std::size_t j = 0; j < n; ++j) out[s * n + j] /= static_cast<double>(lens[s]);
    r0 += lens[s];
  }
  const std::size_t segments = lens.size();
  return make_op("segment_mean_rows", {segments, n}, std::move(out), {a},
                 [lens = std::move(lens), n](std::span<const double> g, GradSink& sink) {
                   auto ga = sink[0];
                   std::size_t r0 = 0;
                   for (std::size_t s = 0; s < lens.size(); ++s) {
                     const double w = 1.0 / static_cast<double>(lens[s]);
                     for (std::size_t r = r0; r < r0 + lens[s]; ++r)
                       for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[s * n + j] * w;
                     r0 += lens[s];
                   }
                 });
}

}  // namespace p4q
