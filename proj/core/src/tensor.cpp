// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctcnar/tensor.hpp"

#include <algorithm>
#include <limits>
#include <sstream>

namespace ctcnar {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    require(d > 0, "tensor dimensions must be positive, got " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream ss;
  ss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) ss << (i ? ", " : "") << shape[i];
  ss << ']';
  return ss.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  require(data_.size() == shape_numel(shape_),
          "data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
}

template <typename T>
int Tensor<T>::dim(int axis) const {
  if (axis < 0) axis += rank();
  require(axis >= 0 && axis < rank(), "axis out of range");
  return shape_[axis];
}

template <typename T>
std::size_t Tensor<T>::offset(std::initializer_list<int> index) const {
  require(static_cast<int>(index.size()) == rank(), "index rank mismatch");
  std::size_t off = 0;
  int axis = 0;
  for (int i : index) {
    require(i >= 0 && i < shape_[axis], "index out of range");
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<int> index) {
  return data_[offset(index)];
}

template <typename T>
const T& Tensor<T>::at(std::initializer_list<int> index) const {
  return data_[offset(index)];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  require(shape_numel(shape) == data_.size(), "reshape " + shape_str(shape_) + " -> " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

double log_sum_exp(std::span<const double> values) {
  require(!values.empty(), "log_sum_exp of an empty list");
  const double m = *std::max_element(values.begin(), values.end());
  if (m == -std::numeric_limits<double>::infinity()) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

namespace {

// Iterates (outer, inner) pairs for a reduction along `axis`.
template <typename T, typename F>
void for_each_lane(const Tensor<T>& x, int axis, F&& f) {
  if (axis < 0) axis += x.rank();
  require(axis >= 0 && axis < x.rank(), "softmax axis out of range");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t n = x.shape()[axis];
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) f(o * n * inner + in, inner, n);
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits, int axis) {
  if (!logits.all_finite()) throw NumericError("softmax input is not finite");
  Tensor<T> out(logits.shape());
  const T* x = logits.ptr();
  T* y = out.ptr();
  for_each_lane(logits, axis, [&](std::size_t base, std::size_t stride, std::size_t n) {
    T m = x[base];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[base + i * stride]);
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const T e = std::exp(x[base + i * stride] - m);
      y[base + i * stride] = e;
      s += e;
    }
    for (std::size_t i = 0; i < n; ++i) y[base + i * stride] /= s;
  });
  return out;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits, int axis) {
  if (!logits.all_finite()) throw NumericError("log_softmax input is not finite");
  Tensor<T> out(logits.shape());
  const T* x = logits.ptr();
  T* y = out.ptr();
  for_each_lane(logits, axis, [&](std::size_t base, std::size_t stride, std::size_t n) {
    T m = x[base];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[base + i * stride]);
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) s += std::exp(x[base + i * stride] - m);
    const T lse = m + std::log(s);
    for (std::size_t i = 0; i < n; ++i) y[base + i * stride] = x[base + i * stride] - lse;
  });
  return out;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> softmax(const Tensor<float>&, int);
template Tensor<double> softmax(const Tensor<double>&, int);
template Tensor<float> log_softmax(const Tensor<float>&, int);
template Tensor<double> log_softmax(const Tensor<double>&, int);

}  // namespace ctcnar
