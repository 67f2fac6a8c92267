// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "ctcnar/ctc.hpp"
#include "ctcnar/data.hpp"
#include "ctcnar/model.hpp"

namespace ctcnar {

enum class Strategy { AR, FixedMask, SpikeCopy, MPCTC, CausalRefine, PMRefine, MaskLen };

std::string to_string(Strategy s);
/// snake_case names: ar, fixed_mask, spike_copy, mp_ctc, causal_refine, pm_refine, mask_len.
Strategy parse_strategy(const std::string& s);
const std::vector<Strategy>& all_strategies();
bool is_single_pass(Strategy s);

struct DecodeConfig {
  Strategy strategy = Strategy::CausalRefine;
  int beam = 1;
  int fixed_len = 24;
  int mp_iterations = 5;
  double mp_threshold = 0.9;
  SpikeMode spike_mode = SpikeMode::Peak;
  /// AR step limit; 0 means frames * 2 + 10.
  int max_steps = 0;

  void validate() const;
};

struct DecodeResult {
  std::string utt_id;
  Strategy strategy = Strategy::CausalRefine;
  std::vector<int> tokens;
  std::vector<double> confidences;
  double score = 0.0;  // summed log-probability of the emitted tokens (and EOS when reached)
  int decoder_passes = 0;
  /// Decoder positions evaluated, summed over passes.
  int decoder_positions = 0;
  double wall_time = 0.0;
  /// No EOS was produced: AR hit its step limit or a NAR pass ran to its last position.
  bool truncated = false;
};

// Each function decodes every row of `enc`. NAR strategies take one CTC result per row.

std::vector<DecodeResult> decode_ar(const Model<float>& model, const EncoderOutput<float>& enc, int beam,
                                    int max_steps = 0);
std::vector<DecodeResult> decode_fixed_mask(const Model<float>& model, const EncoderOutput<float>& enc, int length);
std::vector<DecodeResult> decode_spike_copy(const Model<float>& model, const EncoderOutput<float>& enc,
                                            const std::vector<CtcGreedyResult>& ctc);
std::vector<DecodeResult> decode_mp_ctc(const Model<float>& model, const EncoderOutput<float>& enc,
                                        const std::vector<CtcGreedyResult>& ctc, int iterations, double threshold);
std::vector<DecodeResult> decode_causal_refine(const Model<float>& model, const EncoderOutput<float>& enc,
                                               const std::vector<CtcGreedyResult>& ctc);
std::vector<DecodeResult> decode_pm_refine(const Model<float>& model, const EncoderOutput<float>& enc,
                                           const std::vector<CtcGreedyResult>& ctc);
std::vector<DecodeResult> decode_mask_len(const Model<float>& model, const EncoderOutput<float>& enc,
                                          const std::vector<CtcGreedyResult>& ctc);

/// Forced-prefix incremental decoding: feeds SOS then `prefix` one token at a time and
/// returns the argmax after each step (prefix.size() + 1 tokens, before EOS truncation).
std::vector<int> forced_prefix_argmax(const Model<float>& model, const EncoderOutput<float>& enc, int row,
                                      const std::vector<int>& prefix);

/// Encodes, runs greedy CTC and dispatches on `config.strategy`. Wall time of the
/// whole batch is split evenly over its utterances.
std::vector<DecodeResult> decode_batch(const Model<float>& model, const Batch& batch, const DecodeConfig& config);

/// Dispatch on precomputed encoder output and CTC results (which may be substituted).
std::vector<DecodeResult> decode_with(const Model<float>& model, const EncoderOutput<float>& enc,
                                      const std::vector<CtcGreedyResult>& ctc, const DecodeConfig& config);

/// Argmax over content tokens and EOS; lowest id wins ties.
int restricted_argmax(const float* log_probs, int vocab);

/// One JSON object per line: {utt_id, strategy, tokens, score, decoder_passes, wall_time_s}.
void write_decode_jsonl(std::ostream& out, const std::vector<DecodeResult>& results, const Vocab& vocab);

}  // namespace ctcnar
