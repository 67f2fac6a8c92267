// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <random>
#include <string>
#include <vector>

#include "ctcnar/autograd.hpp"
#include "ctcnar/tensor.hpp"

namespace ctcnar {

/// Decoder self-attention regime.
enum class MaskType { Causal, Padding };

std::string to_string(MaskType m);
MaskType parse_mask_type(const std::string& s);

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 128;
  int encoder_layers = 6;
  int decoder_layers = 3;
  float dropout = 0.1f;
  int vocab_size = 25;
  int feat_dim = 16;
  /// Weight of the CTC term in the joint objective.
  float ctc_weight = 0.3f;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// allowed[q * keys + k] says whether query q may attend to key k.
struct AttentionMask {
  int queries = 0;
  int keys = 0;
  std::vector<std::uint8_t> allowed;

  bool at(int q, int k) const { return allowed[static_cast<std::size_t>(q) * keys + k] != 0; }
};

AttentionMask build_causal_mask(int length);
/// One mask per batch row; keys at or beyond the row length are blocked.
std::vector<AttentionMask> build_padding_mask(const std::vector<int>& lengths, int length);

/// Number of encoder frames after the two stride-2 blocks.
inline int subsampled_length(int frames) { return (((frames + 1) / 2) + 1) / 2; }

/// Encoder states materialised for inference.
template <typename T>
struct EncoderOutput {
  Tensor<T> states;          // [batch, frames, d_model]
  std::vector<int> lengths;  // valid frames per row

  int batch() const { return states.dim(0); }
  int frames() const { return states.dim(1); }
  std::vector<std::uint8_t> frame_mask() const;
  /// Single row as its own batch of one (trimmed to its valid frames).
  EncoderOutput row(int b) const;
};

/// Encoder states recorded on a tape (training path).
template <typename T>
struct EncodedVar {
  Var<T> states;
  std::vector<int> lengths;
};

struct ForwardOptions {
  bool train = false;
  std::mt19937_64* rng = nullptr;
};

template <typename T>
class DecoderCache;

/// Transformer encoder-decoder with a CTC head on the encoder.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter<T>*> parameters() const;
  Parameter<T>* find(const std::string& name) const;
  std::size_t parameter_count() const;

  /// Copy of this model in another precision.
  template <typename U>
  Model<U> converted() const {
    Model<U> out(config_, 0);
    for (auto* p : out.parameters()) {
      const Parameter<T>* src = find(p->name);
      p->value = src->value.template cast<U>();
    }
    return out;
  }

  // -- tape level ----------------------------------------------------------
  EncodedVar<T> encode(Tape<T>& tape, const Tensor<T>& features, const std::vector<int>& lengths,
                       const ForwardOptions& opts) const;
  Var<T> ctc_head(Tape<T>& tape, const EncodedVar<T>& enc) const;
  /// Token embeddings for a padded [batch, L] token grid (PAD beyond each row).
  Var<T> embed(Tape<T>& tape, const std::vector<std::vector<int>>& tokens) const;
  /// Decoder over precomputed input rows [batch, L, d_model]; returns log-probs [batch, L, vocab].
  Var<T> decode_inputs(Tape<T>& tape, Var<T> inputs, const std::vector<int>& input_lengths, MaskType mask,
                       const EncodedVar<T>& enc, const ForwardOptions& opts) const;
  Var<T> decode_tokens(Tape<T>& tape, const std::vector<std::vector<int>>& tokens, MaskType mask,
                       const EncodedVar<T>& enc, const ForwardOptions& opts) const;

  // -- inference -----------------------------------------------------------
  EncoderOutput<T> encode(const Tensor<T>& features, const std::vector<int>& lengths) const;
  Tensor<T> ctc_head(const EncoderOutput<T>& enc) const;
  Tensor<T> decoder_forward(const std::vector<std::vector<int>>& tokens, MaskType mask,
                            const EncoderOutput<T>& enc) const;
  /// Decoder pass whose input rows are given directly (no token embedding).
  Tensor<T> decoder_forward_inputs(const Tensor<T>& inputs, const std::vector<int>& input_lengths, MaskType mask,
                                   const EncoderOutput<T>& enc) const;

  /// Starts incremental causal decoding; `rows` maps each hypothesis to an encoder batch row.
  DecoderCache<T> start_incremental(const EncoderOutput<T>& enc, const std::vector<int>& rows) const;
  /// Feeds one token per hypothesis; returns next-token log-probs [hyps, vocab].
  Tensor<T> step(DecoderCache<T>& cache, const std::vector<int>& tokens) const;

 private:
  struct Attention {
    Parameter<T>*wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  };
  struct FeedForward {
    Parameter<T>*w1, *b1, *w2, *b2;
  };
  struct Norm {
    Parameter<T>*gamma, *beta;
  };
  struct EncoderLayer {
    Norm ln1, ln2;
    Attention self_attn;
    FeedForward ff;
  };
  struct DecoderLayer {
    Norm ln1, ln2, ln3;
    Attention self_attn, cross_attn;
    FeedForward ff;
  };

  Parameter<T>* make(const std::string& name, Shape shape);
  Attention make_attention(const std::string& prefix);
  FeedForward make_ff(const std::string& prefix);
  Norm make_norm(const std::string& prefix);
  void initialise(std::uint64_t seed);

  Var<T> attend(Tape<T>& tape, const Attention& a, Var<T> query, Var<T> memory,
                const std::vector<std::uint8_t>& allowed) const;
  Var<T> feed_forward(Tape<T>& tape, const FeedForward& f, Var<T> x, const ForwardOptions& opts) const;
  Var<T> norm(Tape<T>& tape, const Norm& n, Var<T> x) const;
  Var<T> drop(Var<T> x, const ForwardOptions& opts) const;

  ModelConfig config_;
  std::deque<Parameter<T>> params_;

  Parameter<T>*conv1_w, *conv1_b, *conv2_w, *conv2_b, *in_proj_w, *in_proj_b;
  std::vector<EncoderLayer> enc_layers_;
  Norm enc_norm_;
  Parameter<T>*ctc_w, *ctc_b;
  Parameter<T>* embed_;
  std::vector<DecoderLayer> dec_layers_;
  Norm dec_norm_;
  Parameter<T>*out_w, *out_b;

  friend class DecoderCache<T>;
};

/// Key/value cache for incremental causal decoding. Rows can be reordered
/// between steps to follow beam-search survivors.
template <typename T>
class DecoderCache {
 public:
  int hypotheses() const { return static_cast<int>(rows_.size()); }
  int length() const { return length_; }
  /// Keeps hypotheses `parents` (indices into the current set), in that order.
  void reorder(const std::vector<int>& parents);

 private:
  friend class Model<T>;
  std::vector<int> rows_;  // encoder batch row per hypothesis
  int length_ = 0;
  std::vector<Tensor<T>> self_k, self_v;    // per layer [hyps, heads, length, dh]
  std::vector<Tensor<T>> cross_k, cross_v;  // per layer [enc batch, heads, frames, dh]
  std::vector<int> enc_lengths;
  int frames = 0;
};

/// Sinusoidal positional table [length, d].
template <typename T>
Tensor<T> positional_encoding(int length, int d);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace ctcnar
