// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctcnar/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace ctcnar {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double lse2(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

std::vector<int> interleave(const std::vector<int>& target, int blank) {
  std::vector<int> ext(2 * target.size() + 1, blank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  return ext;
}

void check_inputs(const Tensor<double>& lp, const std::vector<int>& target, int blank) {
  require(lp.rank() == 2, "ctc expects [frames, vocab] log-posteriors");
  for (int t : target) {
    require(t != blank, "target must not contain BLANK");
    require(t >= 0 && t < lp.dim(1), "target id outside vocabulary");
  }
}

// alpha[t * S + s], log domain.
std::vector<double> forward(const double* lp, int frames, int vocab, const std::vector<int>& ext) {
  const int S = static_cast<int>(ext.size());
  std::vector<double> alpha(static_cast<std::size_t>(frames) * S, kNegInf);
  alpha[0] = lp[ext[0]];
  if (S > 1) alpha[1] = lp[ext[1]];
  for (int t = 1; t < frames; ++t) {
    const double* prev = alpha.data() + static_cast<std::size_t>(t - 1) * S;
    double* cur = alpha.data() + static_cast<std::size_t>(t) * S;
    const double* row = lp + static_cast<std::size_t>(t) * vocab;
    for (int s = 0; s < S; ++s) {
      double acc = prev[s];
      if (s >= 1) acc = lse2(acc, prev[s - 1]);
      if (s >= 2 && ext[s] != ext[s - 2]) acc = lse2(acc, prev[s - 2]);
      cur[s] = acc == kNegInf ? kNegInf : acc + row[ext[s]];
    }
  }
  return alpha;
}

double total_log_prob(const std::vector<double>& alpha, int frames, int S) {
  const double* last = alpha.data() + static_cast<std::size_t>(frames - 1) * S;
  return S > 1 ? lse2(last[S - 1], last[S - 2]) : last[0];
}

}  // namespace

int ctc_min_frames(const std::vector<int>& target) {
  int repeats = 0;
  for (std::size_t i = 1; i < target.size(); ++i) repeats += target[i] == target[i - 1];
  return static_cast<int>(target.size()) + repeats;
}

double ctc_loss(const Tensor<double>& log_posteriors, const std::vector<int>& target, int blank) {
  check_inputs(log_posteriors, target, blank);
  const int frames = log_posteriors.dim(0);
  if (ctc_min_frames(target) > frames) return std::numeric_limits<double>::infinity();
  const auto ext = interleave(target, blank);
  const auto alpha = forward(log_posteriors.ptr(), frames, log_posteriors.dim(1), ext);
  return -total_log_prob(alpha, frames, static_cast<int>(ext.size()));
}

CtcLossGrad ctc_loss_grad(const Tensor<double>& log_posteriors, const std::vector<int>& target, int blank) {
  check_inputs(log_posteriors, target, blank);
  const int frames = log_posteriors.dim(0), vocab = log_posteriors.dim(1);
  CtcLossGrad out{std::numeric_limits<double>::infinity(), Tensor<double>(log_posteriors.shape())};
  if (ctc_min_frames(target) > frames) return out;

  const auto ext = interleave(target, blank);
  const int S = static_cast<int>(ext.size());
  const double* lp = log_posteriors.ptr();
  const auto alpha = forward(lp, frames, vocab, ext);
  const double log_p = total_log_prob(alpha, frames, S);
  out.loss = -log_p;
  if (log_p == kNegInf) return out;

  // beta excludes the emission at its own frame.
  std::vector<double> beta(static_cast<std::size_t>(frames) * S, kNegInf);
  double* last = beta.data() + static_cast<std::size_t>(frames - 1) * S;
  last[S - 1] = 0.0;
  if (S > 1) last[S - 2] = 0.0;
  for (int t = frames - 2; t >= 0; --t) {
    const double* next = beta.data() + static_cast<std::size_t>(t + 1) * S;
    double* cur = beta.data() + static_cast<std::size_t>(t) * S;
    const double* row = lp + static_cast<std::size_t>(t + 1) * vocab;
    for (int s = 0; s < S; ++s) {
      double acc = next[s] + row[ext[s]];
      if (s + 1 < S) acc = lse2(acc, next[s + 1] + row[ext[s + 1]]);
      if (s + 2 < S && ext[s + 2] != ext[s]) acc = lse2(acc, next[s + 2] + row[ext[s + 2]]);
      cur[s] = acc;
    }
  }

  double* g = out.grad.ptr();
  for (int t = 0; t < frames; ++t)
    for (int s = 0; s < S; ++s) {
      const std::size_t i = static_cast<std::size_t>(t) * S + s;
      const double occ = alpha[i] + beta[i] - log_p;
      if (occ > kNegInf) g[static_cast<std::size_t>(t) * vocab + ext[s]] -= std::exp(occ);
    }
  return out;
}

template <typename T>
Var<T> ctc_loss(Var<T> log_posteriors, const std::vector<int>& lengths, const std::vector<std::vector<int>>& targets,
                int* feasible, int blank) {
  const Tensor<T>& lp = log_posteriors.value();
  require(lp.rank() == 3, "batched ctc expects [batch, frames, vocab]");
  const int batch = lp.dim(0), frames = lp.dim(1), vocab = lp.dim(2);
  require(static_cast<int>(lengths.size()) == batch && static_cast<int>(targets.size()) == batch,
          "lengths/targets do not match the batch");

  auto grads = std::make_shared<Tensor<T>>(lp.shape());
  double total = 0.0;
  int ok = 0;
  for (int b = 0; b < batch; ++b) {
    require(lengths[b] >= 1 && lengths[b] <= frames, "invalid frame length");
    Tensor<double> row(Shape{lengths[b], vocab});
    const T* src = lp.ptr() + static_cast<std::size_t>(b) * frames * vocab;
    std::copy(src, src + row.size(), row.ptr());
    CtcLossGrad r = ctc_loss_grad(row, targets[b], blank);
    if (!std::isfinite(r.loss)) continue;
    ++ok;
    total += r.loss;
    T* dst = grads->ptr() + static_cast<std::size_t>(b) * frames * vocab;
    for (std::size_t i = 0; i < row.size(); ++i) dst[i] = static_cast<T>(r.grad[i]);
  }
  if (feasible) *feasible = ok;
  const double loss = ok ? total / ok : std::numeric_limits<double>::infinity();
  return log_posteriors.tape->push(Tensor<T>(Shape{1}, static_cast<T>(loss)), {log_posteriors},
                                   [x = log_posteriors.id, grads, ok](Tape<T>& tape, const Tensor<T>& g) {
                                     if (!ok) return;
                                     Tensor<T>& gx = tape.grad_buffer(x);
                                     const T factor = g[0] / static_cast<T>(ok);
                                     for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * (*grads)[i];
                                   });
}

template <typename T>
CtcGreedyResult ctc_greedy(const T* lp, int frames, int vocab, int blank, SpikeMode mode) {
  require(frames >= 1, "ctc_greedy needs at least one valid frame");
  CtcGreedyResult out;
  int run_token = -1;
  for (int t = 0; t < frames; ++t) {
    const T* row = lp + static_cast<std::size_t>(t) * vocab;
    int best = blank;
    for (int v = kFirstContentId; v < vocab; ++v)
      if (row[v] > row[best]) best = v;
    if (best != run_token) {
      run_token = best;
      if (best != blank) {
        out.tokens.push_back(best);
        out.spike_frames.push_back(t);
        out.confidences.push_back(std::exp(static_cast<double>(row[best])));
      }
    } else if (best != blank && mode == SpikeMode::Peak) {
      const double p = std::exp(static_cast<double>(row[best]));
      if (p > out.confidences.back()) {
        out.confidences.back() = p;
        out.spike_frames.back() = t;
      }
    } else if (best != blank) {
      out.confidences.back() = std::max(out.confidences.back(), std::exp(static_cast<double>(row[best])));
    }
  }
  return out;
}

template <typename T>
std::vector<CtcGreedyResult> ctc_greedy(const Tensor<T>& lp, const std::vector<int>& lengths, int blank,
                                        SpikeMode mode) {
  require(lp.rank() == 3 && static_cast<int>(lengths.size()) == lp.dim(0), "ctc_greedy expects [batch, frames, vocab]");
  const int frames = lp.dim(1), vocab = lp.dim(2);
  std::vector<CtcGreedyResult> out;
  out.reserve(lengths.size());
  for (int b = 0; b < lp.dim(0); ++b) {
    require(lengths[b] <= frames, "frame length exceeds padded frames");
    out.push_back(ctc_greedy(lp.ptr() + static_cast<std::size_t>(b) * frames * vocab, lengths[b], vocab, blank, mode));
  }
  return out;
}

double ctc_gradient_check(const Tensor<double>& logits, const std::vector<int>& target, double h) {
  require(logits.rank() == 2, "ctc_gradient_check expects [frames, vocab] logits");
  const int frames = logits.dim(0), vocab = logits.dim(1);
  auto objective = [&](Tape<double>& tape, Var<double> x) {
    (void)tape;
    return ctc_loss(log_softmax(reshape(x, Shape{1, frames, vocab})), {frames}, {target});
  };
  if (ctc_min_frames(target) > frames) {
    // Saturated case: the loss is +inf and the gradient must be exactly zero.
    Tape<double> tape;
    auto x = tape.leaf(logits);
    tape.backward(objective(tape, x));
    const Tensor<double> g = tape.grad(x);
    double worst = 0.0;
    for (double v : g.data()) worst = std::isfinite(v) ? std::max(worst, std::abs(v)) : std::numeric_limits<double>::infinity();
    return worst;
  }
  return finite_diff_check(objective, logits, h);
}

template Var<float> ctc_loss(Var<float>, const std::vector<int>&, const std::vector<std::vector<int>>&, int*, int);
template Var<double> ctc_loss(Var<double>, const std::vector<int>&, const std::vector<std::vector<int>>&, int*, int);
template CtcGreedyResult ctc_greedy(const float*, int, int, int, SpikeMode);
template CtcGreedyResult ctc_greedy(const double*, int, int, int, SpikeMode);
template std::vector<CtcGreedyResult> ctc_greedy(const Tensor<float>&, const std::vector<int>&, int, SpikeMode);
template std::vector<CtcGreedyResult> ctc_greedy(const Tensor<double>&, const std::vector<int>&, int, SpikeMode);

}  // namespace ctcnar
