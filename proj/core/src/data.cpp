// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctcnar/data.hpp"

#include <algorithm>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "ctcnar/ctc.hpp"
#include "ctcnar/model.hpp"
#include "ctcnar/random.hpp"

namespace ctcnar {

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab(int content_tokens) {
  require(content_tokens >= 1, "vocabulary needs at least one content token");
  std::vector<std::string> names;
  for (int i = 0; i < content_tokens; ++i)
    names.push_back(i < 26 ? std::string(1, static_cast<char>('a' + i)) : "t" + std::to_string(i));
  *this = Vocab(std::move(names));
}

Vocab::Vocab(std::vector<std::string> content_names) {
  names_ = {"<pad>", "<blank>", "<sos>", "<eos>", "<mask>"};
  for (auto& n : content_names) names_.push_back(std::move(n));
  for (int i = 0; i < size(); ++i) {
    const bool inserted = ids_.emplace(names_[i], i).second;
    require(inserted, "duplicate token '" + names_[i] + "'");
  }
}

const std::string& Vocab::token(int id) const {
  require(id >= 0 && id < size(), "token id " + std::to_string(id) + " outside vocabulary");
  return names_[id];
}

int Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  require(it != ids_.end(), "unknown token '" + token + "'");
  return it->second;
}

std::string Vocab::render(const std::vector<int>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i && token(ids[i]).size() > 1) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generator

void CorpusConfig::validate() const {
  require(n_train >= 0 && n_test >= 0, "utterance counts must be non-negative");
  require(content_tokens >= 1, "vocab_size must be >= 6 (at least one content token)");
  require(feat_dim >= 1, "feat_dim must be positive");
  require(min_len >= 1 && max_len >= min_len, "invalid target length range");
  require(min_frames_per_token >= 4 && max_frames_per_token >= min_frames_per_token,
          "frames-per-token range must start at 4 or more");
  require(noise_std >= 0.0 && prototype_std > 0.0, "invalid noise/prototype spread");
  require(successors >= 0 && (successors == 0 || successors < content_tokens), "successors must be in [0, content_tokens)");
}

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

Tensor<float> make_prototypes(std::uint64_t seed, int vocab_size, int feat_dim, double stddev) {
  std::mt19937_64 rng(mix(seed ^ 0x70726f746fULL));
  Tensor<float> protos(Shape{vocab_size, feat_dim});
  for (int v = kFirstContentId; v < vocab_size; ++v)
    for (int f = 0; f < feat_dim; ++f)
      protos[static_cast<std::size_t>(v) * feat_dim + f] = static_cast<float>(stddev * normal(rng));
  return protos;
}

TokenSource TokenSource::bigram(std::uint64_t seed, int vocab_size, int branching) {
  require(vocab_size > kFirstContentId, "vocab_size must be >= 6");
  require(branching >= 1 && branching < vocab_size - kFirstContentId, "branching must be in [1, content tokens)");
  std::mt19937_64 rng(seed);
  TokenSource s;
  s.successors.resize(vocab_size);
  for (int v = kFirstContentId; v < vocab_size; ++v) {
    std::vector<int> others;
    for (int u = kFirstContentId; u < vocab_size; ++u)
      if (u != v) others.push_back(u);
    shuffle(others, rng);
    s.successors[v].assign(others.begin(), others.begin() + branching);
  }
  return s;
}

int TokenSource::next(int previous, int vocab_size, std::mt19937_64& rng) const {
  if (successors.empty() || previous < kFirstContentId) return uniform_int(rng, kFirstContentId, vocab_size - 1);
  const auto& options = successors.at(previous);
  return options[uniform_int(rng, 0, static_cast<int>(options.size()) - 1)];
}

std::vector<Utterance> generate_utterances(std::uint64_t seed, int n_utts, const Tensor<float>& prototypes,
                                           const TokenSource& source,
                                           int min_len, int max_len, int min_fpt, int max_fpt, double noise_std,
                                           const std::string& prefix) {
  require(min_len >= 1 && max_len >= min_len, "invalid target length range");
  require(min_fpt >= 1 && max_fpt >= min_fpt, "invalid frames-per-token range");
  const int vocab = prototypes.dim(0), feat = prototypes.dim(1);
  require(vocab > kFirstContentId, "vocab_size must be >= 6");
  std::mt19937_64 rng(seed);
  std::vector<Utterance> out;
  out.reserve(n_utts);
  for (int u = 0; u < n_utts; ++u) {
    const int len = uniform_int(rng, min_len, max_len);
    std::vector<int> target(len);
    int prev = kPad;
    for (auto& t : target) prev = t = source.next(prev, vocab, rng);

    // Durations are redrawn until the utterance is CTC-feasible after 4x subsampling.
    std::vector<int> dur(len);
    int frames = 0;
    for (int attempt = 0;; ++attempt) {
      require(attempt < 1000, "frames-per-token range cannot fit the target after subsampling");
      for (auto& d : dur) d = uniform_int(rng, min_fpt, max_fpt);
      frames = std::accumulate(dur.begin(), dur.end(), 0);
      if (frames >= 4 * len && subsampled_length(frames) >= ctc_min_frames(target)) break;
    }

    Tensor<float> feats(Shape{frames, feat});
    int t = 0;
    for (int i = 0; i < len; ++i)
      for (int k = 0; k < dur[i]; ++k, ++t)
        for (int f = 0; f < feat; ++f) {
          const float proto = prototypes[static_cast<std::size_t>(target[i]) * feat + f];
          feats[static_cast<std::size_t>(t) * feat + f] =
              noise_std > 0 ? static_cast<float>(proto + noise_std * normal(rng)) : proto;
        }
    char id[64];
    std::snprintf(id, sizeof id, "%s_%05d", prefix.c_str(), u);
    out.push_back({id, std::move(feats), std::move(target)});
  }
  return out;
}

Corpus generate_corpus(const CorpusConfig& c) {
  c.validate();
  Corpus corpus;
  corpus.prototypes = make_prototypes(c.seed, c.vocab_size(), c.feat_dim, c.prototype_std);
  corpus.source = c.successors > 0 ? TokenSource::bigram(mix(c.seed ^ 0x6269677261ULL), c.vocab_size(), c.successors)
                                   : TokenSource::uniform();
  corpus.train = generate_utterances(mix(c.seed ^ 0x747261696eULL), c.n_train, corpus.prototypes, corpus.source, c.min_len, c.max_len,
                                     c.min_frames_per_token, c.max_frames_per_token, c.noise_std, "train");
  corpus.test = generate_utterances(mix(c.seed ^ 0x74657374ULL), c.n_test, corpus.prototypes, corpus.source, c.min_len, c.max_len,
                                    c.min_frames_per_token, c.max_frames_per_token, c.noise_std, "test");
  return corpus;
}

// ---------------------------------------------------------------------------
// Augmentation

Tensor<float> spec_augment(const Tensor<float>& features, const SpecAugmentConfig& c, std::mt19937_64& rng) {
  require(features.rank() == 2, "spec_augment expects [frames, feat_dim]");
  const int frames = features.dim(0), feat = features.dim(1);
  require(c.n_time_masks >= 0 && c.n_feat_masks >= 0, "mask counts must be non-negative");
  require(c.n_time_masks == 0 || (c.time_width >= 1 && c.time_width < frames), "time mask width must be < frames");
  require(c.n_feat_masks == 0 || (c.feat_width >= 1 && c.feat_width < feat), "feature mask width must be < feat_dim");
  Tensor<float> out = features;
  for (int i = 0; i < c.n_time_masks; ++i) {
    const int t0 = uniform_int(rng, 0, frames - c.time_width);
    std::fill_n(out.ptr() + static_cast<std::size_t>(t0) * feat, static_cast<std::size_t>(c.time_width) * feat, 0.0f);
  }
  for (int i = 0; i < c.n_feat_masks; ++i) {
    const int f0 = uniform_int(rng, 0, feat - c.feat_width);
    for (int t = 0; t < frames; ++t)
      std::fill_n(out.ptr() + static_cast<std::size_t>(t) * feat + f0, c.feat_width, 0.0f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

Batch make_batch(const std::vector<const Utterance*>& utts) {
  require(!utts.empty(), "empty batch");
  Batch b;
  int max_frames = 0, feat = utts.front()->features.dim(1);
  for (const auto* u : utts) {
    require(u->features.dim(1) == feat, "feature dims differ within a batch");
    max_frames = std::max(max_frames, u->frames());
    b.max_target = std::max(b.max_target, static_cast<int>(u->target.size()));
  }
  b.features = Tensor<float>(Shape{static_cast<int>(utts.size()), max_frames, feat});
  b.target_grid.assign(utts.size() * b.max_target, kPad);
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const auto* u = utts[i];
    b.utt_ids.push_back(u->utt_id);
    b.feature_lengths.push_back(u->frames());
    b.targets.push_back(u->target);
    b.audio_seconds += u->duration();
    std::copy(u->features.data().begin(), u->features.data().end(),
              b.features.ptr() + i * static_cast<std::size_t>(max_frames) * feat);
    std::copy(u->target.begin(), u->target.end(), b.target_grid.begin() + i * b.max_target);
  }
  return b;
}

std::vector<Batch> make_batches(const std::vector<Utterance>& utts, int batch_size, bool sort_by_frames) {
  require(batch_size >= 1, "batch_size must be >= 1");
  std::vector<std::size_t> order(utts.size());
  std::iota(order.begin(), order.end(), 0);
  if (sort_by_frames)
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return utts[a].frames() < utts[b].frames(); });
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    std::vector<const Utterance*> group;
    for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) group.push_back(&utts[order[i]]);
    out.push_back(make_batch(group));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

void write_manifest(std::ostream& out, const std::vector<Utterance>& utts, const Vocab& vocab) {
  for (const auto& u : utts) {
    nlohmann::json j;
    j["utt_id"] = u.utt_id;
    j["frames"] = u.frames();
    auto& tokens = j["target"] = nlohmann::json::array();
    for (int id : u.target) tokens.push_back(vocab.token(id));
    out << j.dump() << '\n';
  }
}

std::vector<ManifestEntry> read_manifest(std::istream& in, const Vocab& vocab) {
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    ManifestEntry e;
    e.utt_id = j.at("utt_id").get<std::string>();
    e.frames = j.at("frames").get<int>();
    for (const auto& t : j.at("target")) e.target.push_back(vocab.id(t.get<std::string>()));
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace ctcnar
