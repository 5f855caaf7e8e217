#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

#include "sbd/params.hpp"
#include "sbd/tensor.hpp"

namespace sbd::ad {

// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

// Define-by-run reverse-mode tape. Nodes are appended in evaluation order and
// backward() visits them in exactly the reverse order. A tape built with
// record=false only evaluates values (inference).
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }
  bool owns(Var v) const { return v.id < nodes_.size(); }

  Var constant(Tensor<T> value);
  // Leaf bound to a stored parameter; the store must outlive the tape.
  Var parameter(const ParamStore<T>& store, std::string_view name);

  const Tensor<T>& value(Var v) const;
  // Gradient accumulator, allocated lazily (zero-filled) on first access.
  Tensor<T>& grad(Var v);
  bool has_grad(Var v) const { return !nodes_[v.id].grad.empty(); }

  Var push(Tensor<T> value, BackwardFn backward);

  // Seeds d(loss)=1 and propagates in reverse recording order.
  void backward(Var loss);

  // Adds every parameter leaf's gradient into `store` (leaves bound to a
  // different store are skipped).
  void flush_param_grads(ParamStore<T>& store) const;

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    const ParamStore<T>* store = nullptr;
    std::size_t slot = 0;
  };

  bool record_;
  std::vector<Node> nodes_;
};

// backward(loss): zeroes every gradient in `store`, then accumulates the
// gradients reachable from `loss`. Parameters not on the path stay zero.
template <typename T>
void backward(Tape<T>& tape, Var loss, ParamStore<T>& store);

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b);
template <typename T>
Var add(Tape<T>& tape, Var a, Var b);
// x[m x n] + bias[n] broadcast over rows.
template <typename T>
Var add_row(Tape<T>& tape, Var x, Var bias);
template <typename T>
Var scale(Tape<T>& tape, Var x, double s);
template <typename T>
Var mul(Tape<T>& tape, Var a, Var b);
template <typename T>
Var sum(Tape<T>& tape, Var x);
// tanh approximation.
template <typename T>
Var gelu(Tape<T>& tape, Var x);
template <typename T>
Var layer_norm(Tape<T>& tape, Var x, Var gain, Var bias, double eps = 1e-5);
// Gathers rows of `table` by index.
template <typename T>
Var embedding(Tape<T>& tape, Var table, std::span<const int> ids);
template <typename T>
Var slice_rows(Tape<T>& tape, Var x, std::size_t begin, std::size_t end);
template <typename T>
Var slice_cols(Tape<T>& tape, Var x, std::size_t begin, std::size_t end);
template <typename T>
Var concat_rows(Tape<T>& tape, Var a, Var b);
template <typename T>
Var softmax_rows(Tape<T>& tape, Var x);

// Multi-head scaled dot-product attention. q: [m x d], k, v: [n x d], heads
// split d evenly. Query i attends key j iff allow(i, j). For each query the
// allowed keys are visited in ascending index order, so a query's output does
// not depend on keys it may not see.
template <typename T>
Var attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t n_heads, const BoolMatrix& allow);

// sum_i w_i * (-log softmax(logits_i)[target_i]) as a scalar.
template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const int> targets,
                  std::span<const double> weights);

}  // namespace sbd::ad
