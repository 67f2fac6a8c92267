// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctcnar/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ctcnar/random.hpp"
#include "ctcnar/vocab.hpp"
#include "kernels.hpp"

namespace ctcnar {

std::string to_string(MaskType m) { return m == MaskType::Causal ? "CM" : "PM"; }

MaskType parse_mask_type(const std::string& s) {
  if (s == "CM" || s == "cm" || s == "causal") return MaskType::Causal;
  if (s == "PM" || s == "pm" || s == "padding") return MaskType::Padding;
  throw ContractViolation("unknown mask type '" + s + "'");
}

void ModelConfig::validate() const {
  require(d_model > 0 && n_heads > 0 && d_ff > 0, "model sizes must be positive");
  require(encoder_layers > 0 && decoder_layers > 0, "layer counts must be positive");
  require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  require(dropout >= 0.0f && dropout < 1.0f, "dropout must be in [0, 1)");
  require(vocab_size >= kFirstContentId, "vocab_size must leave room for the reserved symbols");
  require(feat_dim > 0, "feat_dim must be positive");
  require(ctc_weight >= 0.0f && ctc_weight <= 1.0f, "ctc_weight must be in [0, 1]");
}

AttentionMask build_causal_mask(int length) {
  require(length >= 1, "causal mask length must be >= 1");
  AttentionMask m{length, length, std::vector<std::uint8_t>(static_cast<std::size_t>(length) * length, 0)};
  for (int q = 0; q < length; ++q)
    for (int k = 0; k <= q; ++k) m.allowed[static_cast<std::size_t>(q) * length + k] = 1;
  return m;
}

std::vector<AttentionMask> build_padding_mask(const std::vector<int>& lengths, int length) {
  std::vector<AttentionMask> out;
  out.reserve(lengths.size());
  for (int len : lengths) {
    require(len >= 1 && len <= length, "padding mask row length must be in [1, L]");
    AttentionMask m{length, length, std::vector<std::uint8_t>(static_cast<std::size_t>(length) * length, 0)};
    for (int q = 0; q < length; ++q)
      for (int k = 0; k < len; ++k) m.allowed[static_cast<std::size_t>(q) * length + k] = 1;
    out.push_back(std::move(m));
  }
  return out;
}

template <typename T>
Tensor<T> positional_encoding(int length, int d) {
  Tensor<T> pe(Shape{length, d});
  for (int pos = 0; pos < length; ++pos)
    for (int i = 0; i < d; i += 2) {
      const double angle = pos / std::pow(10000.0, static_cast<double>(i) / d);
      pe[static_cast<std::size_t>(pos) * d + i] = static_cast<T>(std::sin(angle));
      if (i + 1 < d) pe[static_cast<std::size_t>(pos) * d + i + 1] = static_cast<T>(std::cos(angle));
    }
  return pe;
}

template <typename T>
std::vector<std::uint8_t> EncoderOutput<T>::frame_mask() const {
  const int b = batch(), f = frames();
  std::vector<std::uint8_t> m(static_cast<std::size_t>(b) * f, 0);
  for (int i = 0; i < b; ++i)
    for (int t = 0; t < lengths[i]; ++t) m[static_cast<std::size_t>(i) * f + t] = 1;
  return m;
}

template <typename T>
EncoderOutput<T> EncoderOutput<T>::row(int b) const {
  require(b >= 0 && b < batch(), "encoder row out of range");
  const int len = lengths[b], d = states.dim(2);
  Tensor<T> s(Shape{1, len, d});
  std::copy_n(states.ptr() + static_cast<std::size_t>(b) * frames() * d, static_cast<std::size_t>(len) * d, s.ptr());
  return {std::move(s), {len}};
}

namespace {

std::vector<std::uint8_t> key_mask(const std::vector<int>& key_lengths, int queries, int keys) {
  const std::size_t qk = static_cast<std::size_t>(queries) * keys;
  std::vector<std::uint8_t> allowed(key_lengths.size() * qk, 0);
  for (std::size_t b = 0; b < key_lengths.size(); ++b)
    for (int q = 0; q < queries; ++q)
      for (int k = 0; k < key_lengths[b]; ++k) allowed[b * qk + static_cast<std::size_t>(q) * keys + k] = 1;
  return allowed;
}

std::vector<std::uint8_t> row_keep(const std::vector<int>& lengths, int frames) {
  std::vector<std::uint8_t> keep(lengths.size() * frames, 0);
  for (std::size_t b = 0; b < lengths.size(); ++b)
    for (int t = 0; t < std::min(lengths[b], frames); ++t) keep[b * frames + t] = 1;
  return keep;
}

}  // namespace

// ---------------------------------------------------------------------------
// Construction

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const int d = config_.d_model, f = config_.feat_dim, v = config_.vocab_size;
  conv1_w = make("frontend.conv1.w", {3 * f, d});
  conv1_b = make("frontend.conv1.b", {d});
  conv2_w = make("frontend.conv2.w", {3 * d, d});
  conv2_b = make("frontend.conv2.b", {d});
  in_proj_w = make("frontend.proj.w", {d, d});
  in_proj_b = make("frontend.proj.b", {d});
  for (int l = 0; l < config_.encoder_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l) + ".";
    enc_layers_.push_back({make_norm(p + "ln1"), make_norm(p + "ln2"), make_attention(p + "self_attn"), make_ff(p + "ff")});
  }
  enc_norm_ = make_norm("encoder.norm");
  ctc_w = make("ctc.w", {d, v});
  ctc_b = make("ctc.b", {v});
  embed_ = make("decoder.embed", {v, d});
  for (int l = 0; l < config_.decoder_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l) + ".";
    dec_layers_.push_back({make_norm(p + "ln1"), make_norm(p + "ln2"), make_norm(p + "ln3"),
                           make_attention(p + "self_attn"), make_attention(p + "cross_attn"), make_ff(p + "ff")});
  }
  dec_norm_ = make_norm("decoder.norm");
  out_w = make("decoder.out.w", {d, v});
  out_b = make("decoder.out.b", {v});
  initialise(seed);
}

template <typename T>
Parameter<T>* Model<T>::make(const std::string& name, Shape shape) {
  params_.push_back(Parameter<T>{name, Tensor<T>(shape), Tensor<T>(shape)});
  return &params_.back();
}

template <typename T>
typename Model<T>::Attention Model<T>::make_attention(const std::string& p) {
  const int d = config_.d_model;
  return {make(p + ".wq", {d, d}), make(p + ".bq", {d}), make(p + ".wk", {d, d}), make(p + ".bk", {d}),
          make(p + ".wv", {d, d}), make(p + ".bv", {d}), make(p + ".wo", {d, d}), make(p + ".bo", {d})};
}

template <typename T>
typename Model<T>::FeedForward Model<T>::make_ff(const std::string& p) {
  const int d = config_.d_model, h = config_.d_ff;
  return {make(p + ".w1", {d, h}), make(p + ".b1", {h}), make(p + ".w2", {h, d}), make(p + ".b2", {d})};
}

template <typename T>
typename Model<T>::Norm Model<T>::make_norm(const std::string& p) {
  const int d = config_.d_model;
  return {make(p + ".gamma", {d}), make(p + ".beta", {d})};
}

template <typename T>
void Model<T>::initialise(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : params_) {
    const auto& n = p.name;
    if (n.ends_with(".gamma")) {
      p.value.fill(T(1));
    } else if (p.value.rank() == 1) {
      p.value.fill(T(0));
    } else if (n == "decoder.embed") {
      const double sd = 1.0 / std::sqrt(static_cast<double>(config_.d_model));
      for (auto& x : p.value.data()) x = static_cast<T>(sd * normal(rng));
    } else {
      const double limit = std::sqrt(6.0 / (p.value.dim(0) + p.value.dim(1)));
      for (auto& x : p.value.data()) x = static_cast<T>(uniform(rng, -limit, limit));
    }
    p.zero_grad();
  }
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::parameters() const {
  std::vector<Parameter<T>*> out;
  for (auto& p : params_) out.push_back(const_cast<Parameter<T>*>(&p));
  return out;
}

template <typename T>
Parameter<T>* Model<T>::find(const std::string& name) const {
  for (auto& p : params_)
    if (p.name == name) return const_cast<Parameter<T>*>(&p);
  return nullptr;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (auto& p : params_) n += p.value.size();
  return n;
}

// ---------------------------------------------------------------------------
// Tape-level forward

template <typename T>
Var<T> Model<T>::drop(Var<T> x, const ForwardOptions& opts) const {
  if (!opts.train || config_.dropout <= 0.0f) return x;
  require(opts.rng != nullptr, "training forward needs an rng for dropout");
  return dropout(x, static_cast<T>(config_.dropout), *opts.rng);
}

template <typename T>
Var<T> Model<T>::norm(Tape<T>& tape, const Norm& n, Var<T> x) const {
  return layer_norm(x, tape.param(*n.gamma), tape.param(*n.beta));
}

template <typename T>
Var<T> Model<T>::feed_forward(Tape<T>& tape, const FeedForward& f, Var<T> x, const ForwardOptions& opts) const {
  Var<T> h = relu(linear(x, tape.param(*f.w1), tape.param(*f.b1)));
  return linear(drop(h, opts), tape.param(*f.w2), tape.param(*f.b2));
}

template <typename T>
Var<T> Model<T>::attend(Tape<T>& tape, const Attention& a, Var<T> query, Var<T> memory,
                        const std::vector<std::uint8_t>& allowed) const {
  const int b = query.dim(0), lq = query.dim(1), lk = memory.dim(1);
  const int h = config_.n_heads, dh = config_.d_model / h;
  auto heads = [&](Var<T> x, int len) { return permute(reshape(x, {b, len, h, dh}), {0, 2, 1, 3}); };
  Var<T> q = heads(linear(query, tape.param(*a.wq), tape.param(*a.bq)), lq);
  q = scale(q, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  Var<T> k = heads(linear(memory, tape.param(*a.wk), tape.param(*a.bk)), lk);
  Var<T> v = heads(linear(memory, tape.param(*a.wv), tape.param(*a.bv)), lk);
  Var<T> s = mask_fill(bmm(q, k, true), allowed, -std::numeric_limits<T>::infinity());
  Var<T> o = bmm(softmax(s), v, false);
  o = reshape(permute(o, {0, 2, 1, 3}), {b, lq, config_.d_model});
  return linear(o, tape.param(*a.wo), tape.param(*a.bo));
}

template <typename T>
EncodedVar<T> Model<T>::encode(Tape<T>& tape, const Tensor<T>& features, const std::vector<int>& lengths,
                               const ForwardOptions& opts) const {
  require(features.rank() == 3 && features.dim(2) == config_.feat_dim,
          "features must be [batch, frames, " + std::to_string(config_.feat_dim) + "], got " +
              shape_str(features.shape()));
  const int b = features.dim(0), frames = features.dim(1);
  require(static_cast<int>(lengths.size()) == b, "one length per utterance required");
  for (int len : lengths) {
    require(len >= 1, "zero-length utterance");
    require(len <= frames, "utterance length exceeds padded frames");
  }
  if (!features.all_finite()) throw NumericError("features are not finite");

  std::vector<int> len1(b), len2(b);
  for (int i = 0; i < b; ++i) {
    len1[i] = (lengths[i] + 1) / 2;
    len2[i] = (len1[i] + 1) / 2;
  }
  const int f1 = (frames + 1) / 2, f2 = (f1 + 1) / 2;

  Var<T> x = mask_rows(tape.constant_ref(features), row_keep(lengths, frames));
  x = relu(linear(frame_stack(x, 3, 2), tape.param(*conv1_w), tape.param(*conv1_b)));
  x = mask_rows(x, row_keep(len1, f1));
  x = relu(linear(frame_stack(x, 3, 2), tape.param(*conv2_w), tape.param(*conv2_b)));
  x = mask_rows(x, row_keep(len2, f2));
  x = linear(x, tape.param(*in_proj_w), tape.param(*in_proj_b));
  x = drop(add(x, tape.constant(positional_encoding<T>(f2, config_.d_model))), opts);

  const auto allowed = key_mask(len2, f2, f2);
  for (const auto& layer : enc_layers_) {
    Var<T> hn = norm(tape, layer.ln1, x);
    x = add(x, drop(attend(tape, layer.self_attn, hn, hn, allowed), opts));
    hn = norm(tape, layer.ln2, x);
    x = add(x, drop(feed_forward(tape, layer.ff, hn, opts), opts));
  }
  return {norm(tape, enc_norm_, x), len2};
}

template <typename T>
Var<T> Model<T>::ctc_head(Tape<T>& tape, const EncodedVar<T>& enc) const {
  return log_softmax(linear(enc.states, tape.param(*ctc_w), tape.param(*ctc_b)));
}

template <typename T>
Var<T> Model<T>::embed(Tape<T>& tape, const std::vector<std::vector<int>>& tokens) const {
  require(!tokens.empty(), "decoder needs at least one row");
  std::size_t len = 0;
  for (const auto& row : tokens) len = std::max(len, row.size());
  require(len >= 1, "decoder input length must be >= 1");
  std::vector<int> ids(tokens.size() * len, kPad);
  for (std::size_t b = 0; b < tokens.size(); ++b) {
    require(!tokens[b].empty(), "decoder input row is empty");
    for (std::size_t t = 0; t < tokens[b].size(); ++t) {
      require(tokens[b][t] >= 0 && tokens[b][t] < config_.vocab_size, "token id outside vocabulary");
      ids[b * len + t] = tokens[b][t];
    }
  }
  Var<T> e = embedding(tape.param(*embed_), ids, {static_cast<int>(tokens.size()), static_cast<int>(len)});
  return scale(e, static_cast<T>(std::sqrt(static_cast<double>(config_.d_model))));
}

template <typename T>
Var<T> Model<T>::decode_inputs(Tape<T>& tape, Var<T> inputs, const std::vector<int>& input_lengths, MaskType mask,
                               const EncodedVar<T>& enc, const ForwardOptions& opts) const {
  require(inputs.value().rank() == 3 && inputs.dim(2) == config_.d_model, "decoder inputs must be [batch, L, d_model]");
  const int b = inputs.dim(0), len = inputs.dim(1), frames = enc.states.dim(1);
  require(static_cast<int>(input_lengths.size()) == b && static_cast<int>(enc.lengths.size()) == b,
          "decoder/encoder batch mismatch");
  if (mask != MaskType::Causal && mask != MaskType::Padding) throw ContractViolation("unknown mask type");

  std::vector<std::uint8_t> self_allowed = key_mask(input_lengths, len, len);
  if (mask == MaskType::Causal) {
    const auto causal = build_causal_mask(len);
    const std::size_t qk = static_cast<std::size_t>(len) * len;
    for (int i = 0; i < b; ++i)
      for (std::size_t j = 0; j < qk; ++j) self_allowed[i * qk + j] &= causal.allowed[j];
  }
  const auto cross_allowed = key_mask(enc.lengths, len, frames);

  Var<T> x = drop(add(inputs, tape.constant(positional_encoding<T>(len, config_.d_model))), opts);
  for (const auto& layer : dec_layers_) {
    Var<T> hn = norm(tape, layer.ln1, x);
    x = add(x, drop(attend(tape, layer.self_attn, hn, hn, self_allowed), opts));
    hn = norm(tape, layer.ln2, x);
    x = add(x, drop(attend(tape, layer.cross_attn, hn, enc.states, cross_allowed), opts));
    hn = norm(tape, layer.ln3, x);
    x = add(x, drop(feed_forward(tape, layer.ff, hn, opts), opts));
  }
  x = norm(tape, dec_norm_, x);
  return log_softmax(linear(x, tape.param(*out_w), tape.param(*out_b)));
}

template <typename T>
Var<T> Model<T>::decode_tokens(Tape<T>& tape, const std::vector<std::vector<int>>& tokens, MaskType mask,
                               const EncodedVar<T>& enc, const ForwardOptions& opts) const {
  std::vector<int> lengths;
  for (const auto& row : tokens) lengths.push_back(static_cast<int>(row.size()));
  return decode_inputs(tape, embed(tape, tokens), lengths, mask, enc, opts);
}

// ---------------------------------------------------------------------------
// Inference wrappers

template <typename T>
EncoderOutput<T> Model<T>::encode(const Tensor<T>& features, const std::vector<int>& lengths) const {
  Tape<T> tape(false);
  EncodedVar<T> e = encode(tape, features, lengths, {});
  return {e.states.value(), e.lengths};
}

template <typename T>
Tensor<T> Model<T>::ctc_head(const EncoderOutput<T>& enc) const {
  Tape<T> tape(false);
  return ctc_head(tape, EncodedVar<T>{tape.constant_ref(enc.states), enc.lengths}).value();
}

template <typename T>
Tensor<T> Model<T>::decoder_forward(const std::vector<std::vector<int>>& tokens, MaskType mask,
                                    const EncoderOutput<T>& enc) const {
  Tape<T> tape(false);
  return decode_tokens(tape, tokens, mask, EncodedVar<T>{tape.constant_ref(enc.states), enc.lengths}, {}).value();
}

template <typename T>
Tensor<T> Model<T>::decoder_forward_inputs(const Tensor<T>& inputs, const std::vector<int>& input_lengths,
                                           MaskType mask, const EncoderOutput<T>& enc) const {
  Tape<T> tape(false);
  return decode_inputs(tape, tape.constant_ref(inputs), input_lengths, mask,
                       EncodedVar<T>{tape.constant_ref(enc.states), enc.lengths}, {})
      .value();
}

// ---------------------------------------------------------------------------
// Incremental causal decoding. Plain row arithmetic with a key/value cache;
// kept separate from the tape path so the two can check each other.

namespace {

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Parameter<T>& w, const Parameter<T>& b) {
  const int k = w.value.dim(0), n = w.value.dim(1);
  const int m = static_cast<int>(x.size() / k);
  Tensor<T> out(Shape{m, n});
  for (int i = 0; i < m; ++i) std::copy_n(b.value.ptr(), n, out.ptr() + static_cast<std::size_t>(i) * n);
  kernels::gemm(x.ptr(), w.value.ptr(), out.ptr(), m, k, n);
  return out;
}

template <typename T>
Tensor<T> norm_rows(const Tensor<T>& x, const Parameter<T>& gamma, const Parameter<T>& beta) {
  const int d = gamma.value.dim(0);
  const std::size_t rows = x.size() / d;
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * d;
    T mu = 0, var = 0;
    for (int i = 0; i < d; ++i) mu += xr[i];
    mu /= d;
    for (int i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= d;
    const T rs = T(1) / std::sqrt(var + T(1e-5));
    for (int i = 0; i < d; ++i) out[r * d + i] = (xr[i] - mu) * rs * gamma.value[i] + beta.value[i];
  }
  return out;
}

// [rows, d] -> [rows, heads, 1, dh] is a pure reshape; this splits [rows, len, d] to [rows, heads, len, dh].
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int rows, int len, int heads, int dh) {
  Tensor<T> out(Shape{rows, heads, len, dh});
  for (int r = 0; r < rows; ++r)
    for (int t = 0; t < len; ++t)
      for (int h = 0; h < heads; ++h)
        std::copy_n(x.ptr() + ((static_cast<std::size_t>(r) * len + t) * heads + h) * dh, dh,
                    out.ptr() + ((static_cast<std::size_t>(r) * heads + h) * len + t) * dh);
  return out;
}

// Single-query attention: q [heads, dh] against keys/values [heads, len, dh] (first `valid` keys).
template <typename T>
void attend_one(const T* q, const T* k, const T* v, int heads, int len, int valid, int dh, T* out) {
  std::vector<T> s(len), p(len);
  const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (int h = 0; h < heads; ++h) {
    const T* kh = k + static_cast<std::size_t>(h) * len * dh;
    const T* vh = v + static_cast<std::size_t>(h) * len * dh;
    for (int j = 0; j < len; ++j) {
      if (j >= valid) {
        s[j] = -std::numeric_limits<T>::infinity();
        continue;
      }
      T acc = 0;
      for (int c = 0; c < dh; ++c) acc += (q[h * dh + c] * inv) * kh[static_cast<std::size_t>(j) * dh + c];
      s[j] = acc;
    }
    kernels::softmax_row(s.data(), p.data(), len);
    T* oh = out + h * dh;
    std::fill_n(oh, dh, T(0));
    for (int j = 0; j < valid; ++j) kernels::axpy(dh, p[j], vh + static_cast<std::size_t>(j) * dh, oh);
  }
}

}  // namespace

template <typename T>
DecoderCache<T> Model<T>::start_incremental(const EncoderOutput<T>& enc, const std::vector<int>& rows) const {
  DecoderCache<T> c;
  const int h = config_.n_heads, dh = config_.d_model / h;
  const int b = enc.batch(), frames = enc.frames();
  for (int r : rows) require(r >= 0 && r < b, "hypothesis row outside encoder batch");
  c.rows_ = rows;
  c.enc_lengths = enc.lengths;
  c.frames = frames;
  const int hyps = static_cast<int>(rows.size());
  for (const auto& layer : dec_layers_) {
    c.cross_k.push_back(split_heads(dense(enc.states, *layer.cross_attn.wk, *layer.cross_attn.bk), b, frames, h, dh));
    c.cross_v.push_back(split_heads(dense(enc.states, *layer.cross_attn.wv, *layer.cross_attn.bv), b, frames, h, dh));
    c.self_k.emplace_back();
    c.self_v.emplace_back();
  }
  (void)hyps;
  return c;
}

template <typename T>
void DecoderCache<T>::reorder(const std::vector<int>& parents) {
  const int old = hypotheses();
  for (int p : parents) require(p >= 0 && p < old, "reorder parent out of range");
  std::vector<int> rows;
  for (int p : parents) rows.push_back(rows_[p]);
  rows_ = std::move(rows);
  if (length_ == 0) return;
  if (parents.empty()) {
    for (auto& t : self_k) t = Tensor<T>();
    for (auto& t : self_v) t = Tensor<T>();
    return;
  }
  auto gather = [&](Tensor<T>& t) {
    Shape s = t.shape();
    const std::size_t stride = t.size() / s[0];
    s[0] = static_cast<int>(parents.size());
    Tensor<T> out(s);
    for (std::size_t i = 0; i < parents.size(); ++i)
      std::copy_n(t.ptr() + parents[i] * stride, stride, out.ptr() + i * stride);
    t = std::move(out);
  };
  for (auto& t : self_k) gather(t);
  for (auto& t : self_v) gather(t);
}

template <typename T>
Tensor<T> Model<T>::step(DecoderCache<T>& cache, const std::vector<int>& tokens) const {
  const int n = cache.hypotheses();
  require(static_cast<int>(tokens.size()) == n, "one token per hypothesis required");
  const int d = config_.d_model, h = config_.n_heads, dh = d / h, pos = cache.length_;
  const T emb_scale = static_cast<T>(std::sqrt(static_cast<double>(d)));
  const Tensor<T> pe = positional_encoding<T>(pos + 1, d);

  Tensor<T> x(Shape{n, d});
  for (int i = 0; i < n; ++i) {
    require(tokens[i] >= 0 && tokens[i] < config_.vocab_size, "token id outside vocabulary");
    for (int c = 0; c < d; ++c)
      x[static_cast<std::size_t>(i) * d + c] =
          embed_->value[static_cast<std::size_t>(tokens[i]) * d + c] * emb_scale + pe[static_cast<std::size_t>(pos) * d + c];
  }

  const int len = pos + 1;
  Tensor<T> attn(Shape{n, d});
  for (std::size_t l = 0; l < dec_layers_.size(); ++l) {
    const auto& layer = dec_layers_[l];
    // self attention over the cached prefix plus this position
    Tensor<T> hn = norm_rows(x, *layer.ln1.gamma, *layer.ln1.beta);
    const Tensor<T> q = dense(hn, *layer.self_attn.wq, *layer.self_attn.bq);
    const Tensor<T> kn = dense(hn, *layer.self_attn.wk, *layer.self_attn.bk);
    const Tensor<T> vn = dense(hn, *layer.self_attn.wv, *layer.self_attn.bv);
    Tensor<T> k(Shape{n, h, len, dh}), v(Shape{n, h, len, dh});
    for (int i = 0; i < n; ++i)
      for (int hh = 0; hh < h; ++hh) {
        const std::size_t dst = (static_cast<std::size_t>(i) * h + hh) * len * dh;
        if (pos > 0) {
          const std::size_t src = (static_cast<std::size_t>(i) * h + hh) * pos * dh;
          std::copy_n(cache.self_k[l].ptr() + src, static_cast<std::size_t>(pos) * dh, k.ptr() + dst);
          std::copy_n(cache.self_v[l].ptr() + src, static_cast<std::size_t>(pos) * dh, v.ptr() + dst);
        }
        std::copy_n(kn.ptr() + static_cast<std::size_t>(i) * d + hh * dh, dh, k.ptr() + dst + static_cast<std::size_t>(pos) * dh);
        std::copy_n(vn.ptr() + static_cast<std::size_t>(i) * d + hh * dh, dh, v.ptr() + dst + static_cast<std::size_t>(pos) * dh);
      }
    for (int i = 0; i < n; ++i)
      attend_one(q.ptr() + static_cast<std::size_t>(i) * d, k.ptr() + static_cast<std::size_t>(i) * h * len * dh,
                 v.ptr() + static_cast<std::size_t>(i) * h * len * dh, h, len, len, dh,
                 attn.ptr() + static_cast<std::size_t>(i) * d);
    cache.self_k[l] = std::move(k);
    cache.self_v[l] = std::move(v);
    Tensor<T> o = dense(attn, *layer.self_attn.wo, *layer.self_attn.bo);
    kernels::axpy(x.size(), T(1), o.ptr(), x.ptr());

    // cross attention against the hypothesis' encoder row
    hn = norm_rows(x, *layer.ln2.gamma, *layer.ln2.beta);
    const Tensor<T> qc = dense(hn, *layer.cross_attn.wq, *layer.cross_attn.bq);
    for (int i = 0; i < n; ++i) {
      const int r = cache.rows_[i];
      const std::size_t off = static_cast<std::size_t>(r) * h * cache.frames * dh;
      attend_one(qc.ptr() + static_cast<std::size_t>(i) * d, cache.cross_k[l].ptr() + off, cache.cross_v[l].ptr() + off,
                 h, cache.frames, cache.enc_lengths[r], dh, attn.ptr() + static_cast<std::size_t>(i) * d);
    }
    o = dense(attn, *layer.cross_attn.wo, *layer.cross_attn.bo);
    kernels::axpy(x.size(), T(1), o.ptr(), x.ptr());

    hn = norm_rows(x, *layer.ln3.gamma, *layer.ln3.beta);
    Tensor<T> f = dense(hn, *layer.ff.w1, *layer.ff.b1);
    for (auto& val : f.data()) val = val > T(0) ? val : T(0);
    o = dense(f, *layer.ff.w2, *layer.ff.b2);
    kernels::axpy(x.size(), T(1), o.ptr(), x.ptr());
  }
  cache.length_ = len;
  const Tensor<T> logits = dense(norm_rows(x, *dec_norm_.gamma, *dec_norm_.beta), *out_w, *out_b);
  return log_softmax(logits, 1);
}

template Tensor<float> positional_encoding<float>(int, int);
template Tensor<double> positional_encoding<double>(int, int);
template struct EncoderOutput<float>;
template struct EncoderOutput<double>;
template class DecoderCache<float>;
template class DecoderCache<double>;
template class Model<float>;
template class Model<double>;

}  // namespace ctcnar
