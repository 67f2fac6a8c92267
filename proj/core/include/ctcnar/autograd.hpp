// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ctcnar/tensor.hpp"

namespace ctcnar {

/// Thrown when a gradient oracle cannot be trusted (non-deterministic objective).
class OracleInvalid : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
class Tape;

/// A trainable array with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  int dim(int axis) const { return value().dim(axis); }
};

/// Ordered record of forward ops. Inputs of every node precede it, so a
/// reverse sweep is a valid topological order. One tape per thread.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Tensor<T> value);
  /// Borrowed constant; `value` must outlive the tape.
  Var<T> constant_ref(const Tensor<T>& value);
  /// Free leaf whose gradient is kept on the tape.
  Var<T> leaf(Tensor<T> value);
  /// Model parameter; backward() accumulates into `p.grad`.
  Var<T> param(Parameter<T>& p);

  /// Records an op output. `fn` is dropped when no input needs a gradient.
  Var<T> push(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward fn);

  const Tensor<T>& value(int id) const;
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a node, zero-initialised on first access.
  Tensor<T>& grad_buffer(int id);
  /// Gradient of a leaf after backward(); zeros when unreached.
  Tensor<T> grad(Var<T> v) const;

  void backward(Var<T> loss);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> own;
    const Tensor<T>* ext = nullptr;
    Tensor<T> grad;
    Backward fn;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };
  std::deque<Node> nodes_;
  bool record_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

// ---------------------------------------------------------------------------
// Differentiable ops. Broadcasting is limited to a right operand whose shape
// equals the trailing dimensions of the left operand.

template <typename T> Var<T> matmul(Var<T> x, Var<T> w);
/// x @ w + b over the last axis of x.
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b);
/// Batched matmul over all leading axes; b is [.., k, n] or [.., n, k] when transpose_b.
template <typename T> Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
template <typename T> Var<T> permute(Var<T> a, const std::vector<int>& perm);
template <typename T> Var<T> softmax(Var<T> a);
template <typename T> Var<T> log_softmax(Var<T> a);
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));
/// Rows of `table` [V, D] selected by `ids`; result shape is `prefix` + [D].
template <typename T> Var<T> embedding(Var<T> table, const std::vector<int>& ids, Shape prefix);
/// Rows of x viewed as [N, D]; result [indices.size(), D].
template <typename T> Var<T> gather_rows(Var<T> x, const std::vector<int>& indices);
/// Sliding windows over time: [B, T, F] -> [B, ceil(T/stride), kernel*F], zero padded by kernel/2.
template <typename T> Var<T> frame_stack(Var<T> x, int kernel, int stride);
/// Sets blocked entries of [B, H, Q, K] scores to `fill`; allowed is [B, Q, K].
template <typename T> Var<T> mask_fill(Var<T> scores, const std::vector<std::uint8_t>& allowed, T fill);
/// Zeros rows of [B, T, D] where keep[b*T + t] == 0.
template <typename T> Var<T> mask_rows(Var<T> x, const std::vector<std::uint8_t>& keep);
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
template <typename T> Var<T> dropout(Var<T> a, T p, std::mt19937_64& rng);

/// Label-smoothed negative log-likelihood of `log_probs` [..., V], one target per row.
/// Averaged over rows whose target differs from `ignore_id`; 0 when every row is ignored.
template <typename T>
Var<T> label_smoothed_nll(Var<T> log_probs, const std::vector<int>& targets, T smoothing, int ignore_id);

/// Central-difference check of tape gradients for a single free tensor.
/// Returns max |analytic - numeric| / max(1, |analytic|).
double finite_diff_check(const std::function<Var<double>(Tape<double>&, Var<double>)>& f,
                         const Tensor<double>& params, double h);

/// Same check over model parameters perturbed in place.
double finite_diff_check(const std::function<Var<double>(Tape<double>&)>& f,
                         const std::vector<Parameter<double>*>& params, double h);

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace ctcnar
