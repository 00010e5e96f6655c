#pragma once

// Tape-based reverse-mode differentiation over Tensor values.
//
// A Tape is built dynamically by calling the ops below on Var handles. Each
// op evaluates eagerly, records its output plus a local vector-Jacobian
// closure, and returns a Var. `Tape::backward` replays the records in reverse
// and may be called once; the tape refuses further use afterwards.
//
// A Tape (and every Var on it) is confined to one thread. Leaves registered
// with `leaf`/`watch` are held by reference and must outlive the tape.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "zachvit/tensor.hpp"

namespace zachvit {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Borrowed leaf. Differentiable iff `t.requires_grad`.
  Var leaf(const Tensor& t);
  /// Borrowed leaf whose gradient is accumulated into `t.grad` on backward.
  Var watch(Tensor& t);
  /// Owned, non-differentiable value.
  Var constant(Tensor t);

  /// Records an op output. `backward` receives the output node id; it is
  /// dropped when no input requires a gradient.
  Var record(std::string_view op, Tensor value, std::span<const Var> inputs, Backward backward);
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }

  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a node; empty when the node is not differentiable
  /// or backward has not run.
  std::span<const double> grad(Var v) const;
  std::span<double> grad_mut(std::size_t id);

  /// Reverse pass from a scalar loss.
  void backward(Var loss);

  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    Tensor* sink = nullptr;
    bool requires_grad = false;
    std::vector<double> grad;
    Backward backward;
  };

  void check_open() const;
  Var push(Node node);

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Free-function form: `tape.backward(loss)`.
void backward(Var loss, Tape& tape);

namespace ops {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
/// x[M x d] + b[d], broadcast over rows.
Var add_bias(Var x, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var transpose(Var a);
Var reshape(Var a, Shape shape);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t start, std::size_t count);
Var slice_cols(Var a, std::size_t start, std::size_t count);
/// out[i] = a[perm[i]]
Var permute_rows(Var a, std::span<const std::size_t> perm);
/// Column-wise mean / max over rows; result is [1 x d].
Var mean_rows(Var a);
Var max_rows(Var a);
Var sum(Var a);
Var softmax(Var a, std::size_t axis);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var gelu(Var a);
Var relu(Var a);

namespace testing {
/// Fault hook for self-test: when set, softmax's backward drops the
/// normalization term so gradient checks must fail.
void set_softmax_fault(bool on) noexcept;
bool softmax_fault() noexcept;
}  // namespace testing

}  // namespace ops
}  // namespace zachvit
