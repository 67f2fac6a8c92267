// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctcnar/decode.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

#include <json.hpp>

namespace ctcnar {

namespace {

struct StrategyName {
  Strategy s;
  const char* name;
};

constexpr StrategyName kNames[] = {
    {Strategy::AR, "ar"},          {Strategy::FixedMask, "fixed_mask"},       {Strategy::SpikeCopy, "spike_copy"},
    {Strategy::MPCTC, "mp_ctc"},   {Strategy::CausalRefine, "causal_refine"}, {Strategy::PMRefine, "pm_refine"},
    {Strategy::MaskLen, "mask_len"},
};

const float* row_ptr(const Tensor<float>& lp, int b, int t) {
  return lp.ptr() + (static_cast<std::size_t>(b) * lp.dim(1) + t) * lp.dim(2);
}

// Argmax at each of the first `positions` rows, stopping after the first EOS.
void read_out(const Tensor<float>& lp, int b, int positions, DecodeResult& r) {
  const int vocab = lp.dim(2);
  r.truncated = true;
  for (int t = 0; t < positions; ++t) {
    const float* row = row_ptr(lp, b, t);
    const int best = restricted_argmax(row, vocab);
    r.score += row[best];
    if (best == kEos) {
      r.truncated = false;
      return;
    }
    r.tokens.push_back(best);
    r.confidences.push_back(std::exp(static_cast<double>(row[best])));
  }
}

// Rows with at least one input position; others stay empty.
std::vector<int> nonempty_rows(const std::vector<int>& lengths) {
  std::vector<int> rows;
  for (std::size_t b = 0; b < lengths.size(); ++b)
    if (lengths[b] > 0) rows.push_back(static_cast<int>(b));
  return rows;
}

EncoderOutput<float> select_rows(const EncoderOutput<float>& enc, const std::vector<int>& rows) {
  if (static_cast<int>(rows.size()) == enc.batch()) return enc;
  const int frames = enc.frames(), d = enc.states.dim(2);
  EncoderOutput<float> out{Tensor<float>(Shape{static_cast<int>(rows.size()), frames, d}), {}};
  const std::size_t stride = static_cast<std::size_t>(frames) * d;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(enc.states.ptr() + rows[i] * stride, stride, out.states.ptr() + i * stride);
    out.lengths.push_back(enc.lengths[rows[i]]);
  }
  return out;
}

std::vector<DecodeResult> empty_results(int n, Strategy s) {
  std::vector<DecodeResult> out(n);
  for (auto& r : out) r.strategy = s;
  return out;
}

// Single decoder pass over token rows for the selected encoder rows.
std::vector<DecodeResult> token_pass(const Model<float>& model, const EncoderOutput<float>& enc,
                                     const std::vector<std::vector<int>>& inputs, MaskType mask, Strategy s) {
  auto out = empty_results(enc.batch(), s);
  std::vector<int> lengths;
  for (const auto& in : inputs) lengths.push_back(static_cast<int>(in.size()));
  const auto rows = nonempty_rows(lengths);
  if (rows.empty()) return out;
  std::vector<std::vector<int>> sel;
  for (int b : rows) sel.push_back(inputs[b]);
  const Tensor<float> lp = model.decoder_forward(sel, mask, select_rows(enc, rows));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    DecodeResult& r = out[rows[i]];
    r.decoder_passes = 1;
    r.decoder_positions = lengths[rows[i]];
    read_out(lp, static_cast<int>(i), lengths[rows[i]], r);
  }
  return out;
}

void check_ctc(const EncoderOutput<float>& enc, const std::vector<CtcGreedyResult>& ctc) {
  require(static_cast<int>(ctc.size()) == enc.batch(), "one CTC result per encoder row required");
}

}  // namespace

std::string to_string(Strategy s) {
  for (const auto& e : kNames)
    if (e.s == s) return e.name;
  throw ContractViolation("unknown decoding strategy");
}

Strategy parse_strategy(const std::string& s) {
  for (const auto& e : kNames)
    if (s == e.name) return e.s;
  throw ContractViolation("unknown decoding strategy '" + s + "'");
}

const std::vector<Strategy>& all_strategies() {
  static const std::vector<Strategy> all = [] {
    std::vector<Strategy> out;
    for (const auto& e : kNames) out.push_back(e.s);
    return out;
  }();
  return all;
}

bool is_single_pass(Strategy s) { return s != Strategy::AR && s != Strategy::MPCTC; }

void DecodeConfig::validate() const {
  require(beam >= 1, "beam must be >= 1");
  require(fixed_len >= 1, "fixed_len must be >= 1");
  require(mp_iterations >= 1, "mp_iterations must be >= 1");
  require(mp_threshold > 0.0 && mp_threshold < 1.0, "mp_threshold must lie in (0, 1)");
  require(max_steps >= 0, "max_steps must be >= 0");
}

int restricted_argmax(const float* lp, int vocab) {
  int best = kEos;
  for (int v = kFirstContentId; v < vocab; ++v)
    if (lp[v] > lp[best]) best = v;
  return best;
}

// ---------------------------------------------------------------------------
// Autoregressive beam search, all utterances of the batch stepped together.

std::vector<DecodeResult> decode_ar(const Model<float>& model, const EncoderOutput<float>& enc, int beam,
                                    int max_steps) {
  require(beam >= 1, "beam must be >= 1");
  const int B = enc.batch(), vocab = model.config().vocab_size;

  struct Hyp {
    std::vector<int> tokens;
    std::vector<double> conf;
    double score = 0.0;
  };
  struct Finished {
    Hyp hyp;
    double norm;
  };
  struct Search {
    std::vector<Hyp> active;
    std::vector<Finished> done;
    int steps = 0;
    int limit = 0;
    bool closed = false;
  };

  std::vector<Search> search(B);
  std::vector<int> rows;
  for (int b = 0; b < B; ++b) {
    search[b].active.push_back(Hyp{});
    search[b].limit = max_steps > 0 ? max_steps : enc.lengths[b] * 2 + 10;
    rows.push_back(b);
  }
  DecoderCache<float> cache = model.start_incremental(enc, rows);
  std::vector<int> feed(B, kSos);
  auto out = empty_results(B, Strategy::AR);

  while (cache.hypotheses() > 0) {
    const Tensor<float> lp = model.step(cache, feed);
    std::vector<int> parents, next_feed;
    std::vector<int> new_rows;
    int offset = 0;
    for (int b = 0; b < B; ++b) {
      Search& s = search[b];
      if (s.closed) continue;
      const int n = static_cast<int>(s.active.size());
      ++s.steps;
      out[b].decoder_positions += n;

      struct Cand {
        double score;
        int hyp, token;
      };
      std::vector<Cand> cands;
      for (int i = 0; i < n; ++i) {
        const float* row = lp.ptr() + static_cast<std::size_t>(offset + i) * vocab;
        cands.push_back({s.active[i].score + row[kEos], i, kEos});
        for (int v = kFirstContentId; v < vocab; ++v) cands.push_back({s.active[i].score + row[v], i, v});
      }
      const int keep = std::min<int>(beam, static_cast<int>(cands.size()));
      std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(), [](const Cand& a, const Cand& c) {
        if (a.score != c.score) return a.score > c.score;
        if (a.hyp != c.hyp) return a.hyp < c.hyp;
        return a.token < c.token;
      });

      std::vector<Hyp> next;
      std::vector<int> local_parents;
      for (int k = 0; k < keep; ++k) {
        const Cand& c = cands[k];
        const Hyp& h = s.active[c.hyp];
        const double p = std::exp(c.score - h.score);
        if (c.token == kEos) {
          Hyp f = h;
          f.score = c.score;
          s.done.push_back({std::move(f), c.score / static_cast<double>(h.tokens.size() + 1)});
        } else {
          Hyp nh = h;
          nh.tokens.push_back(c.token);
          nh.conf.push_back(p);
          nh.score = c.score;
          next.push_back(std::move(nh));
          local_parents.push_back(offset + c.hyp);
        }
      }
      offset += n;

      const bool enough = static_cast<int>(s.done.size()) >= beam;
      if (enough || next.empty() || s.steps >= s.limit) {
        s.closed = true;
        DecodeResult& r = out[b];
        r.decoder_passes = s.steps;
        if (!s.done.empty()) {
          const auto best = std::min_element(s.done.begin(), s.done.end(), [](const Finished& a, const Finished& c) {
            return a.norm > c.norm;
          });
          r.tokens = best->hyp.tokens;
          r.confidences = best->hyp.conf;
          r.score = best->hyp.score;
        } else {
          const auto best = std::min_element(next.begin(), next.end(), [](const Hyp& a, const Hyp& c) {
            return a.score / (a.tokens.size() + 1) > c.score / (c.tokens.size() + 1);
          });
          r.tokens = best->tokens;
          r.confidences = best->conf;
          r.score = best->score;
          r.truncated = true;
        }
        continue;
      }
      s.active = std::move(next);
      for (std::size_t i = 0; i < local_parents.size(); ++i) {
        parents.push_back(local_parents[i]);
        next_feed.push_back(s.active[i].tokens.back());
      }
    }
    cache.reorder(parents);
    feed = std::move(next_feed);
  }
  return out;
}

std::vector<int> forced_prefix_argmax(const Model<float>& model, const EncoderOutput<float>& enc, int row,
                                      const std::vector<int>& prefix) {
  require(row >= 0 && row < enc.batch(), "row outside encoder batch");
  DecoderCache<float> cache = model.start_incremental(enc, {row});
  std::vector<int> out;
  int token = kSos;
  for (std::size_t t = 0; t <= prefix.size(); ++t) {
    const Tensor<float> lp = model.step(cache, {token});
    out.push_back(restricted_argmax(lp.ptr(), lp.dim(1)));
    if (t < prefix.size()) token = prefix[t];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Single-pass strategies

std::vector<DecodeResult> decode_fixed_mask(const Model<float>& model, const EncoderOutput<float>& enc, int length) {
  require(length >= 1, "fixed length must be >= 1");
  std::vector<std::vector<int>> inputs(enc.batch(), std::vector<int>(length, kMask));
  return token_pass(model, enc, inputs, MaskType::Padding, Strategy::FixedMask);
}

std::vector<DecodeResult> decode_spike_copy(const Model<float>& model, const EncoderOutput<float>& enc,
                                            const std::vector<CtcGreedyResult>& ctc) {
  check_ctc(enc, ctc);
  auto out = empty_results(enc.batch(), Strategy::SpikeCopy);
  std::vector<int> lengths;
  for (const auto& c : ctc) lengths.push_back(c.length());
  const auto rows = nonempty_rows(lengths);
  if (rows.empty()) return out;

  const int d = enc.states.dim(2), frames = enc.frames();
  const int len = *std::max_element(lengths.begin(), lengths.end());
  Tensor<float> inputs(Shape{static_cast<int>(rows.size()), len, d});
  std::vector<int> sel_lengths;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& spikes = ctc[rows[i]].spike_frames;
    for (std::size_t t = 0; t < spikes.size(); ++t)
      std::copy_n(enc.states.ptr() + (static_cast<std::size_t>(rows[i]) * frames + spikes[t]) * d, d,
                  inputs.ptr() + (i * len + t) * d);
    sel_lengths.push_back(lengths[rows[i]]);
  }
  const Tensor<float> lp = model.decoder_forward_inputs(inputs, sel_lengths, MaskType::Padding, select_rows(enc, rows));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    DecodeResult& r = out[rows[i]];
    r.decoder_passes = 1;
    r.decoder_positions = sel_lengths[i];
    read_out(lp, static_cast<int>(i), sel_lengths[i], r);
  }
  return out;
}

std::vector<DecodeResult> decode_mp_ctc(const Model<float>& model, const EncoderOutput<float>& enc,
                                        const std::vector<CtcGreedyResult>& ctc, int iterations, double threshold) {
  require(iterations >= 1, "mp_iterations must be >= 1");
  check_ctc(enc, ctc);
  const int B = enc.batch(), vocab = model.config().vocab_size;
  auto out = empty_results(B, Strategy::MPCTC);

  std::vector<std::vector<int>> tokens(B);
  std::vector<std::vector<double>> conf(B);
  std::vector<std::vector<double>> logp(B);
  std::vector<int> per_iter(B, 0);
  for (int b = 0; b < B; ++b) {
    tokens[b] = ctc[b].tokens;
    conf[b] = ctc[b].confidences;
    logp[b].resize(tokens[b].size());
    int masked = 0;
    for (std::size_t t = 0; t < tokens[b].size(); ++t) {
      logp[b][t] = std::log(conf[b][t]);
      if (conf[b][t] < threshold) {
        tokens[b][t] = kMask;
        ++masked;
      }
    }
    per_iter[b] = (masked + iterations - 1) / iterations;
  }

  for (int it = 0; it < iterations; ++it) {
    std::vector<int> rows;
    for (int b = 0; b < B; ++b)
      if (std::count(tokens[b].begin(), tokens[b].end(), kMask) > 0) rows.push_back(b);
    if (rows.empty()) break;
    std::vector<std::vector<int>> inputs;
    for (int b : rows) inputs.push_back(tokens[b]);
    const Tensor<float> lp = model.decoder_forward(inputs, MaskType::Padding, select_rows(enc, rows));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const int b = rows[i];
      ++out[b].decoder_passes;
      out[b].decoder_positions += static_cast<int>(tokens[b].size());
      struct Pred {
        float lp;
        int pos, token;
      };
      std::vector<Pred> preds;
      for (int t = 0; t < static_cast<int>(tokens[b].size()); ++t) {
        if (tokens[b][t] != kMask) continue;
        const float* row = row_ptr(lp, static_cast<int>(i), t);
        const int best = restricted_argmax(row, vocab);
        preds.push_back({row[best], t, best});
      }
      std::stable_sort(preds.begin(), preds.end(), [](const Pred& a, const Pred& c) { return a.lp > c.lp; });
      const int commit = it + 1 == iterations ? static_cast<int>(preds.size())
                                              : std::min<int>(per_iter[b], static_cast<int>(preds.size()));
      for (int k = 0; k < commit; ++k) {
        tokens[b][preds[k].pos] = preds[k].token;
        conf[b][preds[k].pos] = std::exp(static_cast<double>(preds[k].lp));
        logp[b][preds[k].pos] = preds[k].lp;
      }
    }
  }

  for (int b = 0; b < B; ++b) {
    DecodeResult& r = out[b];
    for (std::size_t t = 0; t < tokens[b].size(); ++t) {
      if (tokens[b][t] == kEos) break;
      r.tokens.push_back(tokens[b][t]);
      r.confidences.push_back(conf[b][t]);
      r.score += logp[b][t];
    }
  }
  return out;
}

std::vector<DecodeResult> decode_causal_refine(const Model<float>& model, const EncoderOutput<float>& enc,
                                               const std::vector<CtcGreedyResult>& ctc) {
  check_ctc(enc, ctc);
  std::vector<std::vector<int>> inputs;
  for (const auto& c : ctc) {
    std::vector<int> in{kSos};
    in.insert(in.end(), c.tokens.begin(), c.tokens.end());
    inputs.push_back(std::move(in));
  }
  return token_pass(model, enc, inputs, MaskType::Causal, Strategy::CausalRefine);
}

std::vector<DecodeResult> decode_pm_refine(const Model<float>& model, const EncoderOutput<float>& enc,
                                           const std::vector<CtcGreedyResult>& ctc) {
  check_ctc(enc, ctc);
  std::vector<std::vector<int>> inputs;
  for (const auto& c : ctc) inputs.push_back(c.tokens);
  return token_pass(model, enc, inputs, MaskType::Padding, Strategy::PMRefine);
}

std::vector<DecodeResult> decode_mask_len(const Model<float>& model, const EncoderOutput<float>& enc,
                                          const std::vector<CtcGreedyResult>& ctc) {
  check_ctc(enc, ctc);
  std::vector<std::vector<int>> inputs;
  for (const auto& c : ctc) inputs.emplace_back(c.length(), kMask);
  return token_pass(model, enc, inputs, MaskType::Padding, Strategy::MaskLen);
}

// ---------------------------------------------------------------------------

std::vector<DecodeResult> decode_with(const Model<float>& model, const EncoderOutput<float>& enc,
                                      const std::vector<CtcGreedyResult>& ctc, const DecodeConfig& c) {
  c.validate();
  switch (c.strategy) {
    case Strategy::AR: return decode_ar(model, enc, c.beam, c.max_steps);
    case Strategy::FixedMask: return decode_fixed_mask(model, enc, c.fixed_len);
    case Strategy::SpikeCopy: return decode_spike_copy(model, enc, ctc);
    case Strategy::MPCTC: return decode_mp_ctc(model, enc, ctc, c.mp_iterations, c.mp_threshold);
    case Strategy::CausalRefine: return decode_causal_refine(model, enc, ctc);
    case Strategy::PMRefine: return decode_pm_refine(model, enc, ctc);
    case Strategy::MaskLen: return decode_mask_len(model, enc, ctc);
  }
  throw ContractViolation("unknown decoding strategy");
}

std::vector<DecodeResult> decode_batch(const Model<float>& model, const Batch& batch, const DecodeConfig& config) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const EncoderOutput<float> enc = model.encode(batch.features, batch.feature_lengths);
  std::vector<CtcGreedyResult> ctc;
  if (config.strategy != Strategy::AR && config.strategy != Strategy::FixedMask)
    ctc = ctc_greedy(model.ctc_head(enc), enc.lengths, kBlank, config.spike_mode);
  auto results = decode_with(model, enc, ctc, config);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (int b = 0; b < batch.size(); ++b) {
    results[b].utt_id = batch.utt_ids[b];
    results[b].wall_time = seconds / batch.size();
  }
  return results;
}

void write_decode_jsonl(std::ostream& out, const std::vector<DecodeResult>& results, const Vocab& vocab) {
  for (const auto& r : results) {
    nlohmann::json j;
    j["utt_id"] = r.utt_id;
    j["strategy"] = to_string(r.strategy);
    auto& toks = j["tokens"] = nlohmann::json::array();
    for (int t : r.tokens) toks.push_back(vocab.token(t));
    j["score"] = r.score;
    j["decoder_passes"] = r.decoder_passes;
    j["wall_time_s"] = r.wall_time;
    out << j.dump() << '\n';
  }
}

}  // namespace ctcnar
