// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctcnar/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace ctcnar {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <typename V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename V>
V get(std::istream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  require(static_cast<bool>(in), "truncated checkpoint");
  return v;
}

std::string get_string(std::istream& in) {
  const auto n = get<std::uint32_t>(in);
  require(n < (1u << 20), "implausible string length in checkpoint");
  std::string s(n, '\0');
  in.read(s.data(), n);
  require(static_cast<bool>(in), "truncated checkpoint");
  return s;
}

}  // namespace

void save_checkpoint(std::ostream& out, const Model<float>& model, const CheckpointMeta& meta) {
  const ModelConfig& c = model.config();
  out.write(kCheckpointMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  for (int v : {c.d_model, c.n_heads, c.d_ff, c.encoder_layers, c.decoder_layers, c.vocab_size, c.feat_dim})
    put<std::int32_t>(out, v);
  put<float>(out, c.dropout);
  put<float>(out, c.ctc_weight);

  put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    put_string(out, k);
    put_string(out, v);
  }

  const auto params = model.parameters();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    put_string(out, p->name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->value.rank()));
    for (int d : p->value.shape()) put<std::int32_t>(out, d);
    out.write(reinterpret_cast<const char*>(p->value.ptr()),
              static_cast<std::streamsize>(p->value.size() * sizeof(float)));
  }
  require(static_cast<bool>(out), "failed to write checkpoint");
}

void save_checkpoint(const std::string& path, const Model<float>& model, const CheckpointMeta& meta) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot open '" + path + "' for writing");
  save_checkpoint(out, model, meta);
}

Checkpoint load_checkpoint(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  require(in && std::memcmp(magic, kCheckpointMagic, 4) == 0, "not a ctcnar checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(in);
  require(version == kCheckpointVersion, "unsupported checkpoint version " + std::to_string(version));

  ModelConfig c;
  c.d_model = get<std::int32_t>(in);
  c.n_heads = get<std::int32_t>(in);
  c.d_ff = get<std::int32_t>(in);
  c.encoder_layers = get<std::int32_t>(in);
  c.decoder_layers = get<std::int32_t>(in);
  c.vocab_size = get<std::int32_t>(in);
  c.feat_dim = get<std::int32_t>(in);
  c.dropout = get<float>(in);
  c.ctc_weight = get<float>(in);
  c.validate();

  CheckpointMeta meta;
  const auto n_meta = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = get_string(in);
    meta[k] = get_string(in);
  }

  Model<float> model(c, 0);
  const auto n_params = get<std::uint32_t>(in);
  require(n_params == model.parameters().size(), "checkpoint parameter count does not match its config");
  for (std::uint32_t i = 0; i < n_params; ++i) {
    const std::string name = get_string(in);
    Parameter<float>* p = model.find(name);
    require(p != nullptr, "unknown parameter '" + name + "' in checkpoint");
    const auto rank = get<std::uint32_t>(in);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(get<std::int32_t>(in));
    require(shape == p->value.shape(), "shape mismatch for '" + name + "'");
    in.read(reinterpret_cast<char*>(p->value.ptr()), static_cast<std::streamsize>(p->value.size() * sizeof(float)));
    require(static_cast<bool>(in), "truncated checkpoint");
    require(p->value.all_finite(), "non-finite weights in '" + name + "'");
  }
  return {std::move(model), std::move(meta)};
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open checkpoint '" + path + "'");
  return load_checkpoint(in);
}

}  // namespace ctcnar
