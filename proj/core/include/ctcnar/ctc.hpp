// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "ctcnar/autograd.hpp"
#include "ctcnar/tensor.hpp"
#include "ctcnar/vocab.hpp"

namespace ctcnar {

/// Collapsed greedy CTC path. tokens.size() is the predicted length T'.
struct CtcGreedyResult {
  std::vector<int> tokens;
  std::vector<int> spike_frames;
  std::vector<double> confidences;

  int length() const { return static_cast<int>(tokens.size()); }
};

/// Where a token's spike sits within its run of identical argmax frames.
enum class SpikeMode { Peak, FirstFrame };

/// Negative log-likelihood and its gradient w.r.t. the log-posteriors.
struct CtcLossGrad {
  double loss = 0.0;
  Tensor<double> grad;  // [frames, vocab]
};

/// -log p(target | x) by the alpha recursion over the blank-interleaved target.
/// Returns +inf when the target cannot fit in `frames` (no exception).
double ctc_loss(const Tensor<double>& log_posteriors, const std::vector<int>& target, int blank = kBlank);

/// Forward-backward pass; gradient is minus the label occupancy, zero when infeasible.
CtcLossGrad ctc_loss_grad(const Tensor<double>& log_posteriors, const std::vector<int>& target, int blank = kBlank);

/// Batched CTC on the tape. `log_posteriors` is [B, F, V]; each row uses its first
/// `lengths[b]` frames. Averaged over feasible rows; `feasible` receives their count.
template <typename T>
Var<T> ctc_loss(Var<T> log_posteriors, const std::vector<int>& lengths, const std::vector<std::vector<int>>& targets,
                int* feasible = nullptr, int blank = kBlank);

/// Frame-wise argmax over `blank` and the content ids (blank, then lowest id, wins
/// ties), collapse repeats, drop blanks.
template <typename T>
CtcGreedyResult ctc_greedy(const T* log_posteriors, int frames, int vocab, int blank = kBlank,
                           SpikeMode mode = SpikeMode::Peak);

/// Greedy result for each batch row of [B, F, V] log-posteriors.
template <typename T>
std::vector<CtcGreedyResult> ctc_greedy(const Tensor<T>& log_posteriors, const std::vector<int>& lengths,
                                        int blank = kBlank, SpikeMode mode = SpikeMode::Peak);

inline int predict_length(const CtcGreedyResult& r) { return r.length(); }

/// Minimum frame count for a target: one per label plus a blank between repeats.
int ctc_min_frames(const std::vector<int>& target);

/// Finite-difference check of the CTC gradient w.r.t. unnormalised logits [frames, vocab]
/// passed through log_softmax.
double ctc_gradient_check(const Tensor<double>& logits, const std::vector<int>& target, double h = 1e-5);

}  // namespace ctcnar
