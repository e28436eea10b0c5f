// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto shared storage; ops never modify their
// inputs. While a Tape is active on the calling thread (see TapeScope), every
// op that consumes a tensor with requires_grad() set is appended to that tape.
// Tape::backward walks the record in reverse and accumulates gradients into
// the requires_grad leaves. A tape can be consumed exactly once.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace p4q {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor;
class GradSink;
using BackwardFn = std::function<void(std::span<const double> grad_out, GradSink& sink)>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::size_t dim(std::size_t axis) const;
  /// Leading extent for matrices; 1 for vectors and scalars.
  std::size_t rows() const;
  /// Trailing extent; 1 for scalars.
  std::size_t cols() const;

  std::span<const double> values() const;
  /// Writable view of a leaf's storage. Tensors produced by ops are read-only.
  std::span<double> mutable_values();
  double value(std::size_t i) const { return values()[i]; }
  double at(std::size_t r, std::size_t c) const { return values()[r * cols() + c]; }
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Deep copy with no gradient history.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;

  friend class Tape;
  friend class GradSink;
  friend Tensor make_op(const char*, Shape, std::vector<double>, std::vector<Tensor>, BackwardFn);
};

/// Hands a backward closure the gradient buffers of its op's inputs.
class GradSink {
 public:
  /// Zero-initialised accumulation buffer for input i, or an empty span when
  /// that input does not take part in differentiation.
  std::span<double> operator[](std::size_t input);
  bool wants(std::size_t input) const;

 private:
  explicit GradSink(const std::vector<std::shared_ptr<detail::Node>>& inputs) : inputs_(inputs) {}
  const std::vector<std::shared_ptr<detail::Node>>& inputs_;
  friend class Tape;
};

class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable on this tape.
  void backward(const Tensor& loss);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return entries_.size(); }

  /// Tape active on the calling thread, or nullptr.
  static Tape* active();

 private:
  struct Entry {
    const char* op;
    std::vector<std::shared_ptr<detail::Node>> inputs;
    std::shared_ptr<detail::Node> output;
    BackwardFn backward;
  };

  void record(Entry entry);

  std::vector<Entry> entries_;
  std::uint64_t id_;
  bool consumed_ = false;

  friend class TapeScope;
  friend Tensor make_op(const char*, Shape, std::vector<double>, std::vector<Tensor>, BackwardFn);
};

/// Makes a tape the active one on this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// backward() on the thread's active tape.
void backward(const Tensor& loss);

/// Builds an op result and, when needed, records it. Used by every primitive
/// below and by other modules that define their own differentiable ops.
Tensor make_op(const char* op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
               BackwardFn backward);

/// When on, each op checks that finite inputs produced finite outputs.
/// Defaults to on in debug builds.
void set_debug_checks(bool on);
bool debug_checks();

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
/// Adds a length-n vector to every row of an m×n matrix (or to a length-n vector).
Tensor add_bias(const Tensor& a, const Tensor& bias);

Tensor relu(const Tensor& a);
/// Exact GELU, 0.5·x·(1 + erf(x/√2)).
Tensor gelu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

Tensor softmax_rows(const Tensor& a, double temperature = 1.0);
Tensor log_softmax_rows(const Tensor& a, double temperature = 1.0);
/// Normalises over the last axis, then applies gamma/beta.
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps);
/// Scales each row to unit Euclidean norm.
Tensor l2_normalize_rows(const Tensor& a);
/// u·v / (‖u‖‖v‖) as a scalar tensor.
Tensor cosine_similarity(const Tensor& u, const Tensor& v);
double cosine_similarity(std::span<const double> u, std::span<const double> v);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Column means of an m×n matrix, as a length-n vector.
Tensor mean_rows(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
/// Row i of a matrix as a 1×n matrix.
Tensor row(const Tensor& a, std::size_t i);
/// out[i] = a[i, index[i]].
Tensor pick(const Tensor& a, std::span<const std::size_t> index);
/// Rows index[0], index[1], ... of a matrix, stacked.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);
/// Mean of each run of consecutive rows; lengths must sum to the row count.
Tensor segment_mean_rows(const Tensor& a, std::span<const std::size_t> lengths);

}  // namespace p4q
