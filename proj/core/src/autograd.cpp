// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctcnar/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "kernels.hpp"

namespace ctcnar {

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.own = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Tape<T>::constant_ref(const Tensor<T>& value) {
  Node n;
  n.ext = &value;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  Node n;
  n.own = std::move(value);
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  Node n;
  n.ext = &p.value;
  n.param = &p;
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Tape<T>::push(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward fn) {
  Node n;
  n.own = std::move(value);
  if (record_) {
    for (const auto& in : inputs) {
      require(in.tape == this, "op inputs live on different tapes");
      if (nodes_[in.id].requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.fn = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
const Tensor<T>& Tape<T>::value(int id) const {
  const Node& n = nodes_[id];
  return n.ext ? *n.ext : n.own;
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor<T>(value(id).shape());
  return n.grad;
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return Tensor<T>(value(v.id).shape());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  require(loss.tape == this, "loss belongs to another tape");
  require(value(loss.id).size() == 1, "backward() needs a scalar loss, got " + shape_str(value(loss.id).shape()));
  if (!record_) return;
  grad_buffer(loss.id)[0] += T(1);
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.fn || n.grad.empty()) continue;
    n.fn(*this, n.grad);
  }
  for (Node& n : nodes_) {
    if (!n.param || n.grad.empty()) continue;
    if (n.param->grad.shape() != n.param->value.shape()) n.param->zero_grad();
    kernels::axpy(n.grad.size(), T(1), n.grad.ptr(), n.param->grad.ptr());
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace {

template <typename T>
bool trailing_broadcast(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

template <typename T>
std::size_t leading(const Tensor<T>& t, int trailing_dims) {
  std::size_t n = 1;
  for (int i = 0; i + trailing_dims < t.rank(); ++i) n *= t.shape()[i];
  return n;
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> x, Var<T> w) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  require(wv.rank() == 2 && xv.rank() >= 1 && xv.shape().back() == wv.dim(0),
          "matmul shape mismatch " + shape_str(xv.shape()) + " @ " + shape_str(wv.shape()));
  const int k = wv.dim(0), n = wv.dim(1);
  const int m = static_cast<int>(xv.size() / k);
  Shape out_shape = xv.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  kernels::gemm(xv.ptr(), wv.ptr(), out.ptr(), m, k, n);
  return x.tape->push(std::move(out), {x, w}, [x, w, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(x.id)) {
      const Tensor<T> wt = kernels::transpose(t.value(w.id), k, n);
      kernels::gemm(g.ptr(), wt.ptr(), t.grad_buffer(x.id).ptr(), m, n, k);
    }
    if (t.requires_grad(w.id)) kernels::gemm_tn(t.value(x.id).ptr(), g.ptr(), t.grad_buffer(w.id).ptr(), m, k, n);
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  const Tensor<T>& bv = b.value();
  require(wv.rank() == 2 && xv.shape().back() == wv.dim(0) && bv.size() == static_cast<std::size_t>(wv.dim(1)),
          "linear shape mismatch " + shape_str(xv.shape()) + " @ " + shape_str(wv.shape()));
  const int k = wv.dim(0), n = wv.dim(1);
  const int m = static_cast<int>(xv.size() / k);
  Shape out_shape = xv.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  T* o = out.ptr();
  for (int i = 0; i < m; ++i) std::copy(bv.ptr(), bv.ptr() + n, o + static_cast<std::size_t>(i) * n);
  kernels::gemm(xv.ptr(), wv.ptr(), o, m, k, n);
  return x.tape->push(std::move(out), {x, w, b}, [x, w, b, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(x.id)) {
      const Tensor<T> wt = kernels::transpose(t.value(w.id), k, n);
      kernels::gemm(g.ptr(), wt.ptr(), t.grad_buffer(x.id).ptr(), m, n, k);
    }
    if (t.requires_grad(w.id)) kernels::gemm_tn(t.value(x.id).ptr(), g.ptr(), t.grad_buffer(w.id).ptr(), m, k, n);
    if (t.requires_grad(b.id)) {
      T* gb = t.grad_buffer(b.id).ptr();
      for (int i = 0; i < m; ++i) kernels::axpy(n, T(1), g.ptr() + static_cast<std::size_t>(i) * n, gb);
    }
  });
}

template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require(av.rank() >= 2 && av.rank() == bv.rank(), "bmm rank mismatch");
  for (int i = 0; i + 2 < av.rank(); ++i) require(av.shape()[i] == bv.shape()[i], "bmm batch dims differ");
  const int m = av.dim(-2), k = av.dim(-1);
  const int n = transpose_b ? bv.dim(-2) : bv.dim(-1);
  require((transpose_b ? bv.dim(-1) : bv.dim(-2)) == k,
          "bmm inner dims differ " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::size_t groups = leading(av, 2);
  Shape out_shape = av.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  const std::size_t sa = static_cast<std::size_t>(m) * k, sb = static_cast<std::size_t>(k) * n,
                    so = static_cast<std::size_t>(m) * n;
  std::vector<T> scratch(sb);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const T* bp = bv.ptr() + gi * sb;
    if (transpose_b) {
      kernels::transpose_into(bp, n, k, scratch.data());
      bp = scratch.data();
    }
    kernels::gemm(av.ptr() + gi * sa, bp, out.ptr() + gi * so, m, k, n);
  }
  return a.tape->push(std::move(out), {a, b}, [a, b, transpose_b, groups, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    const std::size_t sa = static_cast<std::size_t>(m) * k, sb = static_cast<std::size_t>(k) * n,
                      so = static_cast<std::size_t>(m) * n;
    const T* ap = t.value(a.id).ptr();
    const T* bp = t.value(b.id).ptr();
    const bool need_a = t.requires_grad(a.id), need_b = t.requires_grad(b.id);
    T* ga = need_a ? t.grad_buffer(a.id).ptr() : nullptr;
    T* gb = need_b ? t.grad_buffer(b.id).ptr() : nullptr;
    std::vector<T> scratch(sb);
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const T* gg = g.ptr() + gi * so;
      if (!transpose_b) {
        // y = a b: da = g b^T, db = a^T g
        if (need_a) {
          kernels::transpose_into(bp + gi * sb, k, n, scratch.data());
          kernels::gemm(gg, scratch.data(), ga + gi * sa, m, n, k);
        }
        if (need_b) kernels::gemm_tn(ap + gi * sa, gg, gb + gi * sb, m, k, n);
      } else {
        // y = a b^T with b [n, k]: da = g b, db = g^T a
        if (need_a) kernels::gemm(gg, bp + gi * sb, ga + gi * sa, m, n, k);
        if (need_b) kernels::gemm_tn(gg, ap + gi * sa, gb + gi * sb, m, n, k);
      }
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require(trailing_broadcast<T>(av.shape(), bv.shape()),
          "add shape mismatch " + shape_str(av.shape()) + " + " + shape_str(bv.shape()));
  Tensor<T> out = av;
  const std::size_t n = bv.size(), reps = av.size() / n;
  for (std::size_t r = 0; r < reps; ++r) kernels::axpy(n, T(1), bv.ptr(), out.ptr() + r * n);
  return a.tape->push(std::move(out), {a, b}, [a, b, n, reps](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(a.id)) kernels::axpy(g.size(), T(1), g.ptr(), t.grad_buffer(a.id).ptr());
    if (t.requires_grad(b.id)) {
      T* gb = t.grad_buffer(b.id).ptr();
      for (std::size_t r = 0; r < reps; ++r) kernels::axpy(n, T(1), g.ptr() + r * n, gb);
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require(trailing_broadcast<T>(av.shape(), bv.shape()),
          "mul shape mismatch " + shape_str(av.shape()) + " * " + shape_str(bv.shape()));
  Tensor<T> out(av.shape());
  const std::size_t n = bv.size(), reps = av.size() / n;
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = av[r * n + i] * bv[i];
  return a.tape->push(std::move(out), {a, b}, [a, b, n, reps](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& av = t.value(a.id);
    const Tensor<T>& bv = t.value(b.id);
    if (t.requires_grad(a.id)) {
      T* ga = t.grad_buffer(a.id).ptr();
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < n; ++i) ga[r * n + i] += g[r * n + i] * bv[i];
    }
    if (t.requires_grad(b.id)) {
      T* gb = t.grad_buffer(b.id).ptr();
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[r * n + i] * av[r * n + i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  return a.tape->push(std::move(out), {a}, [a, factor](Tape<T>& t, const Tensor<T>& g) {
    kernels::axpy(g.size(), factor, g.ptr(), t.grad_buffer(a.id).ptr());
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  const int y = static_cast<int>(a.tape->size());
  return a.tape->push(std::move(out), {a}, [a, y](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& yv = t.value(y);
    T* ga = t.grad_buffer(a.id).ptr();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (yv[i] > T(0)) ga[i] += g[i];
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.tape->push(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    kernels::axpy(g.size(), T(1), g.ptr(), t.grad_buffer(a.id).ptr());
  });
}

template <typename T>
Var<T> permute(Var<T> a, const std::vector<int>& perm) {
  const Tensor<T>& av = a.value();
  const int r = av.rank();
  require(static_cast<int>(perm.size()) == r, "permute rank mismatch");
  std::vector<int> seen(r, 0);
  for (int p : perm) {
    require(p >= 0 && p < r && !seen[p], "permute needs a permutation of axes");
    seen[p] = 1;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (int i = r - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * av.shape()[i + 1];
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = av.shape()[perm[i]];
  auto src = std::make_shared<std::vector<std::size_t>>(av.size());
  std::vector<int> idx(r, 0);
  for (std::size_t o = 0; o < av.size(); ++o) {
    std::size_t off = 0;
    for (int i = 0; i < r; ++i) off += idx[i] * in_stride[perm[i]];
    (*src)[o] = off;
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < av.size(); ++o) out[o] = av[(*src)[o]];
  return a.tape->push(std::move(out), {a}, [a, src](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_buffer(a.id).ptr();
    for (std::size_t o = 0; o < g.size(); ++o) ga[(*src)[o]] += g[o];
  });
}

template <typename T>
Var<T> softmax(Var<T> a) {
  const Tensor<T>& av = a.value();
  const int n = av.shape().back();
  const std::size_t rows = av.size() / n;
  Tensor<T> out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) kernels::softmax_row(av.ptr() + r * n, out.ptr() + r * n, n);
  const int y = static_cast<int>(a.tape->size());
  return a.tape->push(std::move(out), {a}, [a, y, n, rows](Tape<T>& t, const Tensor<T>& g) {
    const T* yv = t.value(y).ptr();
    T* ga = t.grad_buffer(a.id).ptr();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * n;
      T dot = 0;
      for (int i = 0; i < n; ++i) dot += g[o + i] * yv[o + i];
      for (int i = 0; i < n; ++i) ga[o + i] += yv[o + i] * (g[o + i] - dot);
    }
  });
}

template <typename T>
Var<T> log_softmax(Var<T> a) {
  const Tensor<T>& av = a.value();
  const int n = av.shape().back();
  const std::size_t rows = av.size() / n;
  Tensor<T> out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) kernels::log_softmax_row(av.ptr() + r * n, out.ptr() + r * n, n);
  const int y = static_cast<int>(a.tape->size());
  return a.tape->push(std::move(out), {a}, [a, y, n, rows](Tape<T>& t, const Tensor<T>& g) {
    const T* yv = t.value(y).ptr();
    T* ga = t.grad_buffer(a.id).ptr();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * n;
      T gs = 0;
      for (int i = 0; i < n; ++i) gs += g[o + i];
      for (int i = 0; i < n; ++i) ga[o + i] += g[o + i] - std::exp(yv[o + i]) * gs;
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const Tensor<T>& xv = x.value();
  const int d = xv.shape().back();
  require(gamma.value().size() == static_cast<std::size_t>(d) && beta.value().size() == static_cast<std::size_t>(d),
          "layer_norm affine size mismatch");
  const std::size_t rows = xv.size() / d;
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  Tensor<T> out(xv.shape());
  const T* gp = gamma.value().ptr();
  const T* bp = beta.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.ptr() + r * d;
    T mu = 0;
    for (int i = 0; i < d; ++i) mu += xr[i];
    mu /= d;
    T var = 0;
    for (int i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= d;
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (int i = 0; i < d; ++i) {
      const T h = (xr[i] - mu) * rs;
      (*xhat)[r * d + i] = h;
      out[r * d + i] = h * gp[i] + bp[i];
    }
  }
  return x.tape->push(std::move(out), {x, gamma, beta},
                      [x, gamma, beta, xhat, rstd, d, rows](Tape<T>& t, const Tensor<T>& g) {
                        const T* gp = t.value(gamma.id).ptr();
                        if (t.requires_grad(gamma.id) || t.requires_grad(beta.id)) {
                          T* gg = t.requires_grad(gamma.id) ? t.grad_buffer(gamma.id).ptr() : nullptr;
                          T* gb = t.requires_grad(beta.id) ? t.grad_buffer(beta.id).ptr() : nullptr;
                          for (std::size_t r = 0; r < rows; ++r)
                            for (int i = 0; i < d; ++i) {
                              if (gg) gg[i] += g[r * d + i] * (*xhat)[r * d + i];
                              if (gb) gb[i] += g[r * d + i];
                            }
                        }
                        if (!t.requires_grad(x.id)) return;
                        T* gx = t.grad_buffer(x.id).ptr();
                        for (std::size_t r = 0; r < rows; ++r) {
                          T m1 = 0, m2 = 0;
                          for (int i = 0; i < d; ++i) {
                            const T dh = g[r * d + i] * gp[i];
                            m1 += dh;
                            m2 += dh * (*xhat)[r * d + i];
                          }
                          m1 /= d;
                          m2 /= d;
                          for (int i = 0; i < d; ++i) {
                            const T dh = g[r * d + i] * gp[i];
                            gx[r * d + i] += (*rstd)[r] * (dh - m1 - (*xhat)[r * d + i] * m2);
                          }
                        }
                      });
}

template <typename T>
Var<T> embedding(Var<T> table, const std::vector<int>& ids, Shape prefix) {
  const Tensor<T>& tv = table.value();
  require(tv.rank() == 2, "embedding table must be 2-D");
  require(shape_numel(prefix) == ids.size(), "embedding prefix does not match id count");
  const int vocab = tv.dim(0), d = tv.dim(1);
  for (int id : ids) require(id >= 0 && id < vocab, "token id " + std::to_string(id) + " outside vocabulary");
  Shape out_shape = std::move(prefix);
  out_shape.push_back(d);
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.ptr() + static_cast<std::size_t>(ids[i]) * d, d, out.ptr() + i * d);
  return table.tape->push(std::move(out), {table}, [table, ids, d](Tape<T>& t, const Tensor<T>& g) {
    T* gt = t.grad_buffer(table.id).ptr();
    for (std::size_t i = 0; i < ids.size(); ++i)
      kernels::axpy(d, T(1), g.ptr() + i * d, gt + static_cast<std::size_t>(ids[i]) * d);
  });
}

template <typename T>
Var<T> gather_rows(Var<T> x, const std::vector<int>& indices) {
  const Tensor<T>& xv = x.value();
  const int d = xv.shape().back();
  const int n = static_cast<int>(xv.size() / d);
  for (int i : indices) require(i >= 0 && i < n, "gather_rows index out of range");
  require(!indices.empty(), "gather_rows needs at least one index");
  Tensor<T> out(Shape{static_cast<int>(indices.size()), d});
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy_n(xv.ptr() + static_cast<std::size_t>(indices[i]) * d, d, out.ptr() + i * d);
  return x.tape->push(std::move(out), {x}, [x, indices, d](Tape<T>& t, const Tensor<T>& g) {
    T* gx = t.grad_buffer(x.id).ptr();
    for (std::size_t i = 0; i < indices.size(); ++i)
      kernels::axpy(d, T(1), g.ptr() + i * d, gx + static_cast<std::size_t>(indices[i]) * d);
  });
}

template <typename T>
Var<T> frame_stack(Var<T> x, int kernel, int stride) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 3, "frame_stack expects [batch, time, feat]");
  require(kernel >= 1 && stride >= 1, "frame_stack kernel/stride must be positive");
  const int b = xv.dim(0), tin = xv.dim(1), f = xv.dim(2);
  const int pad = kernel / 2;
  const int tout = (tin + 2 * pad - kernel) / stride + 1;
  require(tout >= 1, "frame_stack input too short");
  Tensor<T> out(Shape{b, tout, kernel * f});
  for (int bi = 0; bi < b; ++bi)
    for (int to = 0; to < tout; ++to)
      for (int w = 0; w < kernel; ++w) {
        const int ti = to * stride - pad + w;
        if (ti < 0 || ti >= tin) continue;
        std::copy_n(xv.ptr() + (static_cast<std::size_t>(bi) * tin + ti) * f, f,
                    out.ptr() + (static_cast<std::size_t>(bi) * tout + to) * kernel * f + static_cast<std::size_t>(w) * f);
      }
  return x.tape->push(std::move(out), {x}, [x, b, tin, f, tout, kernel, stride, pad](Tape<T>& t, const Tensor<T>& g) {
    T* gx = t.grad_buffer(x.id).ptr();
    for (int bi = 0; bi < b; ++bi)
      for (int to = 0; to < tout; ++to)
        for (int w = 0; w < kernel; ++w) {
          const int ti = to * stride - pad + w;
          if (ti < 0 || ti >= tin) continue;
          kernels::axpy(f, T(1),
                        g.ptr() + (static_cast<std::size_t>(bi) * tout + to) * kernel * f + static_cast<std::size_t>(w) * f,
                        gx + (static_cast<std::size_t>(bi) * tin + ti) * f);
        }
  });
}

template <typename T>
Var<T> mask_fill(Var<T> scores, const std::vector<std::uint8_t>& allowed, T fill) {
  const Tensor<T>& sv = scores.value();
  require(sv.rank() == 4, "mask_fill expects [batch, heads, queries, keys]");
  const int b = sv.dim(0), h = sv.dim(1);
  const std::size_t qk = static_cast<std::size_t>(sv.dim(2)) * sv.dim(3);
  require(allowed.size() == b * qk, "mask_fill mask size mismatch");
  Tensor<T> out = sv;
  for (int bi = 0; bi < b; ++bi)
    for (int hi = 0; hi < h; ++hi) {
      T* o = out.ptr() + (static_cast<std::size_t>(bi) * h + hi) * qk;
      const std::uint8_t* m = allowed.data() + bi * qk;
      for (std::size_t i = 0; i < qk; ++i)
        if (!m[i]) o[i] = fill;
    }
  return scores.tape->push(std::move(out), {scores}, [scores, allowed, b, h, qk](Tape<T>& t, const Tensor<T>& g) {
    T* gs = t.grad_buffer(scores.id).ptr();
    for (int bi = 0; bi < b; ++bi)
      for (int hi = 0; hi < h; ++hi) {
        const std::size_t o = (static_cast<std::size_t>(bi) * h + hi) * qk;
        const std::uint8_t* m = allowed.data() + bi * qk;
        for (std::size_t i = 0; i < qk; ++i)
          if (m[i]) gs[o + i] += g[o + i];
      }
  });
}

template <typename T>
Var<T> mask_rows(Var<T> x, const std::vector<std::uint8_t>& keep) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 3, "mask_rows expects [batch, time, dim]");
  const int d = xv.dim(2);
  require(keep.size() == xv.size() / d, "mask_rows keep size mismatch");
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < keep.size(); ++r)
    if (!keep[r]) std::fill_n(out.ptr() + r * d, d, T(0));
  return x.tape->push(std::move(out), {x}, [x, keep, d](Tape<T>& t, const Tensor<T>& g) {
    T* gx = t.grad_buffer(x.id).ptr();
    for (std::size_t r = 0; r < keep.size(); ++r)
      if (keep[r]) kernels::axpy(d, T(1), g.ptr() + r * d, gx + r * d);
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T v : a.value().data()) s += v;
  return a.tape->push(Tensor<T>(Shape{1}, s), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_buffer(a.id).ptr();
    const std::size_t n = t.value(a.id).size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> dropout(Var<T> a, T p, std::mt19937_64& rng) {
  require(p >= T(0) && p < T(1), "dropout probability must be in [0, 1)");
  if (p == T(0)) return a;
  Tensor<T> keep(a.value().shape());
  std::bernoulli_distribution coin(1.0 - static_cast<double>(p));
  const T s = T(1) / (T(1) - p);
  for (auto& v : keep.data()) v = coin(rng) ? s : T(0);
  return mul(a, a.tape->constant(std::move(keep)));
}

// ---------------------------------------------------------------------------
// Finite differences

double finite_diff_check(const std::function<Var<double>(Tape<double>&, Var<double>)>& f,
                         const Tensor<double>& params, double h) {
  require(h > 0, "finite difference step must be positive");
  Tape<double> tape;
  Var<double> p = tape.leaf(params);
  tape.backward(f(tape, p));
  const Tensor<double> analytic = tape.grad(p);

  auto eval = [&f](const Tensor<double>& q) {
    Tape<double> t(false);
    return f(t, t.constant(q)).value()[0];
  };
  if (eval(params) != eval(params)) throw OracleInvalid("objective is not deterministic");

  double worst = 0;
  Tensor<double> probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    probe[i] = params[i] + h;
    const double up = eval(probe);
    probe[i] = params[i] - h;
    const double down = eval(probe);
    probe[i] = params[i];
    const double numeric = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

double finite_diff_check(const std::function<Var<double>(Tape<double>&)>& f,
                         const std::vector<Parameter<double>*>& params, double h) {
  require(h > 0, "finite difference step must be positive");
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    tape.backward(f(tape));
  }
  auto eval = [&f]() {
    Tape<double> t(false);
    return f(t).value()[0];
  };
  if (eval() != eval()) throw OracleInvalid("objective is not deterministic");

  double worst = 0;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double up = eval();
      p->value[i] = saved - h;
      const double down = eval();
      p->value[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p->grad[i];
      worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic)));
    }
  }
  return worst;
}

template <typename T>
Var<T> label_smoothed_nll(Var<T> log_probs, const std::vector<int>& targets, T smoothing, int ignore_id) {
  require(smoothing >= T(0) && smoothing < T(1), "smoothing must lie in [0, 1)");
  const Tensor<T>& lp = log_probs.value();
  const int vocab = lp.dim(-1);
  const int rows = static_cast<int>(lp.size() / vocab);
  require(static_cast<int>(targets.size()) == rows, "one target per log-prob row expected");
  int counted = 0;
  for (int t : targets) {
    if (t == ignore_id) continue;
    require(t >= 0 && t < vocab, "target id " + std::to_string(t) + " outside vocabulary");
    ++counted;
  }
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    if (targets[r] == ignore_id) continue;
    const T* row = lp.ptr() + static_cast<std::size_t>(r) * vocab;
    double row_sum = 0.0;
    for (int v = 0; v < vocab; ++v) row_sum += row[v];
    total += -(1.0 - smoothing) * row[targets[r]] - smoothing * row_sum / vocab;
  }
  const double loss = counted ? total / counted : 0.0;
  return log_probs.tape->push(
      Tensor<T>(Shape{1}, static_cast<T>(loss)), {log_probs},
      [x = log_probs.id, targets, smoothing, ignore_id, counted, vocab, rows](Tape<T>& tape, const Tensor<T>& g) {
        if (!counted) return;
        Tensor<T>& gx = tape.grad_buffer(x);
        const T per_row = g[0] / static_cast<T>(counted);
        const T spread = smoothing / static_cast<T>(vocab) * per_row;
        for (int r = 0; r < rows; ++r) {
          if (targets[r] == ignore_id) continue;
          T* row = gx.ptr() + static_cast<std::size_t>(r) * vocab;
          for (int v = 0; v < vocab; ++v) row[v] -= spread;
          row[targets[r]] -= (T(1) - smoothing) * per_row;
        }
      });
}

#define CTCNAR_INSTANTIATE_OPS(T)                                                          \
  template Var<T> matmul(Var<T>, Var<T>);                                                  \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                          \
  template Var<T> bmm(Var<T>, Var<T>, bool);                                               \
  template Var<T> add(Var<T>, Var<T>);                                                     \
  template Var<T> mul(Var<T>, Var<T>);                                                     \
  template Var<T> scale(Var<T>, T);                                                        \
  template Var<T> relu(Var<T>);                                                            \
  template Var<T> reshape(Var<T>, Shape);                                                  \
  template Var<T> permute(Var<T>, const std::vector<int>&);                                \
  template Var<T> softmax(Var<T>);                                                         \
  template Var<T> log_softmax(Var<T>);                                                     \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                   \
  template Var<T> embedding(Var<T>, const std::vector<int>&, Shape);                       \
  template Var<T> gather_rows(Var<T>, const std::vector<int>&);                            \
  template Var<T> frame_stack(Var<T>, int, int);                                           \
  template Var<T> mask_fill(Var<T>, const std::vector<std::uint8_t>&, T);                  \
  template Var<T> mask_rows(Var<T>, const std::vector<std::uint8_t>&);                     \
  template Var<T> sum(Var<T>);                                                             \
  template Var<T> mean(Var<T>);                                                            \
  template Var<T> dropout(Var<T>, T, std::mt19937_64&);                                   \
  template Var<T> label_smoothed_nll(Var<T>, const std::vector<int>&, T, int);

CTCNAR_INSTANTIATE_OPS(float)
CTCNAR_INSTANTIATE_OPS(double)
#undef CTCNAR_INSTANTIATE_OPS

template class Tape<float>;
template class Tape<double>;

}  // namespace ctcnar
