// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

// Randomised model and decoder property checks shared by the unit tests and the
// acceptance runner. Each case returns an empty string on success and a short
// description of the first violation otherwise.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ctcnar/decode.hpp"
#include "ctcnar/model.hpp"
#include "oracles.hpp"

namespace ctcnar::props {

inline int draw(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

inline std::vector<int> random_content(std::mt19937_64& rng, int length, int vocab) {
  std::vector<int> out(length);
  for (auto& v : out) v = draw(rng, kFirstContentId, vocab - 1);
  return out;
}

/// Random batch of utterances with unequal lengths; padded frames hold garbage.
struct RandomBatch {
  Tensor<float> features;
  std::vector<int> lengths;
};

inline RandomBatch random_batch(std::mt19937_64& rng, int batch, int feat, int min_frames, int max_frames) {
  RandomBatch b;
  for (int i = 0; i < batch; ++i) b.lengths.push_back(draw(rng, min_frames, max_frames));
  const int frames = *std::max_element(b.lengths.begin(), b.lengths.end());
  b.features = oracle::random_features(rng, batch, frames, feat);
  return b;
}

/// Copies row `r` of `src` (its first `frames` frames) into a batch of one with `total` frames.
inline Tensor<float> single_row(const Tensor<float>& src, int r, int frames, int total, std::mt19937_64& rng,
                                float pad_value) {
  const int feat = src.dim(2);
  Tensor<float> out(Shape{1, total, feat}, pad_value);
  std::copy_n(src.ptr() + static_cast<std::size_t>(r) * src.dim(1) * feat, static_cast<std::size_t>(frames) * feat,
              out.ptr());
  if (std::isnan(pad_value)) {
    std::normal_distribution<float> n(0.0f, 50.0f);
    for (std::size_t i = static_cast<std::size_t>(frames) * feat; i < out.size(); ++i) out[i] = n(rng);
  }
  return out;
}

inline double max_abs_diff(const float* a, const float* b, std::size_t n) {
  double m = 0.0;
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, static_cast<double>(std::abs(a[i] - b[i])));
  return m;
}

/// Under the causal mask, changing tokens at positions >= t leaves outputs before t bitwise unchanged.
inline std::string causality_case(const Model<float>& model, std::mt19937_64& rng) {
  const ModelConfig& c = model.config();
  const RandomBatch rb = random_batch(rng, draw(rng, 1, 3), c.feat_dim, 4, 40);
  const EncoderOutput<float> enc = model.encode(rb.features, rb.lengths);
  std::vector<std::vector<int>> tokens;
  const int length = draw(rng, 2, 14);
  for (int b = 0; b < enc.batch(); ++b) {
    std::vector<int> row{kSos};
    const auto body = random_content(rng, length - 1, c.vocab_size);
    row.insert(row.end(), body.begin(), body.end());
    tokens.push_back(row);
  }
  const int t = draw(rng, 1, length - 1);
  auto perturbed = tokens;
  for (auto& row : perturbed)
    for (int i = t; i < length; ++i) row[i] = draw(rng, 0, c.vocab_size - 1);
  const Tensor<float> a = model.decoder_forward(tokens, MaskType::Causal, enc);
  const Tensor<float> b = model.decoder_forward(perturbed, MaskType::Causal, enc);
  const std::size_t v = static_cast<std::size_t>(c.vocab_size);
  for (int r = 0; r < enc.batch(); ++r) {
    const std::size_t off = static_cast<std::size_t>(r) * length * v;
    if (std::memcmp(a.ptr() + off, b.ptr() + off, static_cast<std::size_t>(t) * v * sizeof(float)) != 0) {
      std::ostringstream s;
      s << "row " << r << ": outputs before position " << t << " changed";
      return s.str();
    }
  }
  return {};
}

/// Extra padded frames and padded token positions change nothing at real positions (tolerance 1e-5).
inline std::string padding_case(const Model<float>& model, std::mt19937_64& rng) {
  const ModelConfig& c = model.config();
  const int frames = draw(rng, 4, 40);
  const RandomBatch rb = random_batch(rng, 1, c.feat_dim, frames, frames);
  const EncoderOutput<float> plain = model.encode(rb.features, {frames});
  const Tensor<float> longer = single_row(rb.features, 0, frames, frames + 4, rng, std::nanf(""));
  const EncoderOutput<float> padded = model.encode(longer, {frames});
  const int sub = subsampled_length(frames);
  if (padded.lengths[0] != sub || plain.lengths[0] != sub) return "subsampled length mismatch";
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  if (const double e = max_abs_diff(plain.states.ptr(), padded.states.ptr(), sub * d); e >= 1e-5)
    return "encoder states moved by " + std::to_string(e);

  const Tensor<float> ctc_plain = model.ctc_head(plain);
  const Tensor<float> ctc_padded = model.ctc_head(padded);
  const std::size_t v = static_cast<std::size_t>(c.vocab_size);
  if (const double e = max_abs_diff(ctc_plain.ptr(), ctc_padded.ptr(), sub * v); e >= 1e-5)
    return "ctc posteriors moved by " + std::to_string(e);

  // Decoder: same tokens alone and next to a longer row, over plain and padded encoder states.
  const int length = draw(rng, 1, 10);
  std::vector<int> row{kSos};
  const auto body = random_content(rng, length - 1, c.vocab_size);
  row.insert(row.end(), body.begin(), body.end());
  const std::vector<int> other = random_content(rng, length + draw(rng, 1, 5), c.vocab_size);

  EncoderOutput<float> pair;
  pair.states = Tensor<float>(Shape{2, padded.frames(), c.d_model});
  std::copy_n(padded.states.ptr(), padded.states.size(), pair.states.ptr());
  std::copy_n(padded.states.ptr(), padded.states.size(), pair.states.ptr() + padded.states.size());
  pair.lengths = {sub, sub};
  for (MaskType mask : {MaskType::Causal, MaskType::Padding}) {
    const Tensor<float> alone = model.decoder_forward({row}, mask, plain);
    const Tensor<float> batched = model.decoder_forward({row, other}, mask, pair);
    if (const double e = max_abs_diff(alone.ptr(), batched.ptr(), static_cast<std::size_t>(length) * v); e >= 1e-5)
      return to_string(mask) + " decoder outputs moved by " + std::to_string(e);
  }
  return {};
}

/// One causal pass over [SOS, y...] equals stepping the cached decoder token by token.
inline std::string incremental_case(const Model<float>& model, std::mt19937_64& rng) {
  const ModelConfig& c = model.config();
  const RandomBatch rb = random_batch(rng, 2, c.feat_dim, 8, 40);
  const EncoderOutput<float> enc = model.encode(rb.features, rb.lengths);
  const int length = draw(rng, 1, 12);
  std::vector<std::vector<int>> tokens;
  for (int b = 0; b < 2; ++b) {
    std::vector<int> row{kSos};
    const auto body = random_content(rng, length - 1, c.vocab_size);
    row.insert(row.end(), body.begin(), body.end());
    tokens.push_back(row);
  }
  const Tensor<float> full = model.decoder_forward(tokens, MaskType::Causal, enc);
  DecoderCache<float> cache = model.start_incremental(enc, {0, 1});
  const std::size_t v = static_cast<std::size_t>(c.vocab_size);
  for (int t = 0; t < length; ++t) {
    const Tensor<float> step = model.step(cache, {tokens[0][t], tokens[1][t]});
    for (int b = 0; b < 2; ++b) {
      const float* want = full.ptr() + (static_cast<std::size_t>(b) * length + t) * v;
      if (const double e = max_abs_diff(want, step.ptr() + b * v, v); e >= 1e-5)
        return "step " + std::to_string(t) + " differs by " + std::to_string(e);
    }
  }
  return {};
}

/// Forced-prefix AR oracle written against the cache API directly: feed SOS and the
/// prefix one token at a time, take the argmax over {EOS} and content ids, stop at EOS.
inline std::vector<int> forced_prefix_oracle(const Model<float>& model, const EncoderOutput<float>& enc, int row,
                                             const std::vector<int>& prefix) {
  const int vocab = model.config().vocab_size;
  DecoderCache<float> cache = model.start_incremental(enc, {row});
  std::vector<int> out;
  for (std::size_t t = 0; t <= prefix.size(); ++t) {
    const Tensor<float> lp = model.step(cache, {t == 0 ? kSos : prefix[t - 1]});
    int best = kEos;
    for (int v = kFirstContentId; v < vocab; ++v)
      if (lp[v] > lp[best]) best = v;
    if (best == kEos) break;
    out.push_back(best);
  }
  return out;
}

/// CausalRefine on random CTC hypotheses reproduces forced-prefix AR decoding token for token.
inline std::string causal_refine_case(const Model<float>& model, std::mt19937_64& rng) {
  const ModelConfig& c = model.config();
  const RandomBatch rb = random_batch(rng, draw(rng, 1, 8), c.feat_dim, 8, 60);
  const EncoderOutput<float> enc = model.encode(rb.features, rb.lengths);
  std::vector<CtcGreedyResult> ctc(enc.batch());
  for (auto& r : ctc) {
    r.tokens = random_content(rng, draw(rng, 0, 12), c.vocab_size);
    r.confidences.assign(r.tokens.size(), 1.0);
    r.spike_frames.resize(r.tokens.size());
  }
  const auto results = decode_causal_refine(model, enc, ctc);
  for (int b = 0; b < enc.batch(); ++b) {
    const auto want = forced_prefix_oracle(model, enc, b, ctc[b].tokens);
    if (results[b].tokens != want) return "row " + std::to_string(b) + " differs from forced-prefix decoding";
    if (results[b].decoder_passes != 1) return "decoder_passes != 1";
  }
  return {};
}

}  // namespace ctcnar::props
