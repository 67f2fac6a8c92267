// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "ctcnar/tensor.hpp"
#include "ctcnar/vocab.hpp"

namespace ctcnar {

inline constexpr double kFrameSeconds = 0.01;

struct Utterance {
  std::string utt_id;
  Tensor<float> features;  // [frames, feat_dim]
  std::vector<int> target;  // content ids

  int frames() const { return features.dim(0); }
  double duration() const { return frames() * kFrameSeconds; }
};

/// Generator recipe. The corpus is never stored; it is regenerated from these values.
struct CorpusConfig {
  std::uint64_t seed = 1234;
  int n_train = 1200;
  int n_test = 200;
  int content_tokens = 20;
  int feat_dim = 16;
  int min_len = 4;
  int max_len = 12;
  int min_frames_per_token = 4;
  int max_frames_per_token = 8;
  double noise_std = 0.3;
  /// Spread of the per-token prototype vectors.
  double prototype_std = 1.0;
  /// Each token is followed by one of this many fixed successors (a bigram source);
  /// 0 draws every token uniformly.
  int successors = 4;

  void validate() const;
  int vocab_size() const { return content_tokens + kFirstContentId; }
};

/// Target sequence distribution. The first token is uniform over content ids; later
/// tokens are uniform over the successor list of the previous token, or over all
/// content ids when `successors` is empty.
struct TokenSource {
  std::vector<std::vector<int>> successors;  // indexed by token id

  static TokenSource uniform() { return {}; }
  /// `branching` distinct successors per content token, drawn from `seed`. A token is
  /// never its own successor: identical neighbours would merge into one segment.
  static TokenSource bigram(std::uint64_t seed, int vocab_size, int branching);
  int next(int previous, int vocab_size, std::mt19937_64& rng) const;
};

struct Corpus {
  std::vector<Utterance> train;
  std::vector<Utterance> test;
  Tensor<float> prototypes;  // [vocab, feat_dim], rows of reserved ids unused
  TokenSource source;
};

/// Deterministic synthetic corpus: each token is its prototype vector held for
/// a random number of frames, plus Gaussian noise.
Corpus generate_corpus(const CorpusConfig& config);

/// Lower-level form: `n_utts` utterances with ids "<prefix>_%05d".
std::vector<Utterance> generate_utterances(std::uint64_t seed, int n_utts, const Tensor<float>& prototypes,
                                           const TokenSource& source,
                                           int min_len, int max_len, int min_fpt, int max_fpt, double noise_std,
                                           const std::string& prefix);

Tensor<float> make_prototypes(std::uint64_t seed, int vocab_size, int feat_dim, double stddev);

struct SpecAugmentConfig {
  int n_time_masks = 1;
  int time_width = 2;
  int n_feat_masks = 1;
  int feat_width = 2;
};

/// Zeroes `n_time_masks` spans of `time_width` frames and `n_feat_masks` bands of
/// `feat_width` channels at random positions. Shape is preserved.
Tensor<float> spec_augment(const Tensor<float>& features, const SpecAugmentConfig& config, std::mt19937_64& rng);

struct Batch {
  std::vector<std::string> utt_ids;
  Tensor<float> features;               // [batch, max_frames, feat_dim], zero padded
  std::vector<int> feature_lengths;
  std::vector<std::vector<int>> targets;  // unpadded
  std::vector<int> target_grid;          // [batch * max_target], PAD after each target
  int max_target = 0;
  double audio_seconds = 0.0;

  int size() const { return static_cast<int>(utt_ids.size()); }
};

std::vector<Batch> make_batches(const std::vector<Utterance>& utts, int batch_size, bool sort_by_frames);
Batch make_batch(const std::vector<const Utterance*>& utts);

// -- manifest --------------------------------------------------------------

/// One JSON object per line: {"utt_id", "frames", "target"}.
void write_manifest(std::ostream& out, const std::vector<Utterance>& utts, const Vocab& vocab);

struct ManifestEntry {
  std::string utt_id;
  int frames = 0;
  std::vector<int> target;
};
std::vector<ManifestEntry> read_manifest(std::istream& in, const Vocab& vocab);

}  // namespace ctcnar
