// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

// Dense loops shared by the ops. Every output element is accumulated in a
// fixed order that depends only on its own row, so results for a row do not
// change when other rows (batch members, padding) are added.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>

#include "ctcnar/tensor.hpp"

namespace ctcnar::kernels {

/// c[m,n] += a[m,k] * b[k,n]
template <typename T>
inline void gemm(const T* __restrict a, const T* __restrict b, T* __restrict c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* __restrict crow = c + static_cast<std::size_t>(i) * n;
    const T* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* __restrict brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// c[k,n] += a[m,k]^T * b[m,n]
template <typename T>
inline void gemm_tn(const T* __restrict a, const T* __restrict b, T* __restrict c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    const T* __restrict brow = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      T* __restrict crow = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
inline void transpose_into(const T* src, int rows, int cols, T* dst) {
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) dst[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
}

template <typename T>
inline Tensor<T> transpose(const Tensor<T>& m, int rows, int cols) {
  Tensor<T> out(Shape{cols, rows});
  transpose_into(m.ptr(), rows, cols, out.ptr());
  return out;
}

/// y += alpha * x
template <typename T>
inline void axpy(std::size_t n, T alpha, const T* __restrict x, T* __restrict y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

/// Softmax of one row; -inf entries map to exactly 0. A fully blocked row yields zeros.
template <typename T>
inline void softmax_row(const T* x, T* y, int n) {
  T m = -std::numeric_limits<T>::infinity();
  for (int i = 0; i < n; ++i) m = std::max(m, x[i]);
  if (m == -std::numeric_limits<T>::infinity()) {
    std::fill(y, y + n, T(0));
    return;
  }
  T s = 0;
  for (int i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - m);
    s += y[i];
  }
  const T inv = T(1) / s;
  for (int i = 0; i < n; ++i) y[i] *= inv;
}

template <typename T>
inline void log_softmax_row(const T* x, T* y, int n) {
  T m = x[0];
  for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
  T s = 0;
  for (int i = 0; i < n; ++i) s += std::exp(x[i] - m);
  const T lse = m + std::log(s);
  for (int i = 0; i < n; ++i) y[i] = x[i] - lse;
}

}  // namespace ctcnar::kernels
