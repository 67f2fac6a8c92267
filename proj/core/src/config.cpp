// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctcnar/config.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>

namespace ctcnar {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Shortest text that reads back to the same value.
template <typename F>
std::string exact(F v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

KeyValues KeyValues::parse(std::istream& in) {
  KeyValues kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    require(!key.empty(), "config line " + std::to_string(lineno) + ": empty key");
    kv.values_[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::load(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot open config '" + path + "'");
  return parse(in);
}

const std::string* KeyValues::find(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return nullptr;
  used_.insert(key);
  return &it->second;
}

std::string KeyValues::get(const std::string& key, const std::string& fallback) const {
  const std::string* v = find(key);
  return v ? *v : fallback;
}

long long KeyValues::get_int(const std::string& key, long long fallback) const {
  const std::string* v = find(key);
  if (!v) return fallback;
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  require(ec == std::errc() && ptr == v->data() + v->size(), "config key '" + key + "' expects an integer");
  return out;
}

double KeyValues::get_double(const std::string& key, double fallback) const {
  const std::string* v = find(key);
  if (!v) return fallback;
  std::size_t pos = 0;
  double out = 0.0;
  try {
    out = std::stod(*v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  require(pos == v->size() && pos > 0, "config key '" + key + "' expects a number");
  return out;
}

bool KeyValues::get_bool(const std::string& key, bool fallback) const {
  const std::string* v = find(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  throw ContractViolation("config key '" + key + "' expects true/false");
}

std::set<std::string> KeyValues::unused() const {
  std::set<std::string> out;
  for (const auto& [k, v] : values_)
    if (!used_.count(k)) out.insert(k);
  return out;
}

void apply(const KeyValues& kv, CorpusConfig& c) {
  c.seed = static_cast<std::uint64_t>(kv.get_int("corpus.seed", static_cast<long long>(c.seed)));
  c.n_train = static_cast<int>(kv.get_int("corpus.n_train", c.n_train));
  c.n_test = static_cast<int>(kv.get_int("corpus.n_test", c.n_test));
  c.content_tokens = static_cast<int>(kv.get_int("corpus.content_tokens", c.content_tokens));
  c.feat_dim = static_cast<int>(kv.get_int("corpus.feat_dim", c.feat_dim));
  c.min_len = static_cast<int>(kv.get_int("corpus.min_len", c.min_len));
  c.max_len = static_cast<int>(kv.get_int("corpus.max_len", c.max_len));
  c.min_frames_per_token = static_cast<int>(kv.get_int("corpus.min_frames_per_token", c.min_frames_per_token));
  c.max_frames_per_token = static_cast<int>(kv.get_int("corpus.max_frames_per_token", c.max_frames_per_token));
  c.noise_std = kv.get_double("corpus.noise_std", c.noise_std);
  c.prototype_std = kv.get_double("corpus.prototype_std", c.prototype_std);
  c.successors = static_cast<int>(kv.get_int("corpus.successors", c.successors));
  c.validate();
}

void apply(const KeyValues& kv, ModelConfig& c) {
  c.d_model = static_cast<int>(kv.get_int("model.d_model", c.d_model));
  c.n_heads = static_cast<int>(kv.get_int("model.n_heads", c.n_heads));
  c.d_ff = static_cast<int>(kv.get_int("model.d_ff", c.d_ff));
  c.encoder_layers = static_cast<int>(kv.get_int("model.encoder_layers", c.encoder_layers));
  c.decoder_layers = static_cast<int>(kv.get_int("model.decoder_layers", c.decoder_layers));
  c.dropout = static_cast<float>(kv.get_double("model.dropout", c.dropout));
  c.vocab_size = static_cast<int>(kv.get_int("model.vocab_size", c.vocab_size));
  c.feat_dim = static_cast<int>(kv.get_int("model.feat_dim", c.feat_dim));
  c.ctc_weight = static_cast<float>(kv.get_double("model.ctc_weight", c.ctc_weight));
  c.validate();
}

void apply(const KeyValues& kv, TrainConfig& c) {
  if (kv.has("train.strategy")) c.strategy.kind = parse_train_kind(kv.get("train.strategy", ""));
  c.strategy.length_tolerance = static_cast<int>(kv.get_int("train.length_tolerance", c.strategy.length_tolerance));
  c.strategy.fixed_len = static_cast<int>(kv.get_int("train.fixed_len", c.strategy.fixed_len));
  c.epochs = static_cast<int>(kv.get_int("train.epochs", c.epochs));
  c.batch_size = static_cast<int>(kv.get_int("train.batch_size", c.batch_size));
  c.label_smoothing = static_cast<float>(kv.get_double("train.label_smoothing", c.label_smoothing));
  c.sampling_start_epoch = static_cast<int>(kv.get_int("train.sampling_start_epoch", c.sampling_start_epoch));
  c.spec_augment = kv.get_bool("train.spec_augment", c.spec_augment);
  c.augment.n_time_masks = static_cast<int>(kv.get_int("train.n_time_masks", c.augment.n_time_masks));
  c.augment.time_width = static_cast<int>(kv.get_int("train.time_width", c.augment.time_width));
  c.augment.n_feat_masks = static_cast<int>(kv.get_int("train.n_feat_masks", c.augment.n_feat_masks));
  c.augment.feat_width = static_cast<int>(kv.get_int("train.feat_width", c.augment.feat_width));
  c.seed = static_cast<std::uint64_t>(kv.get_int("train.seed", static_cast<long long>(c.seed)));
  c.optimizer.peak_lr = kv.get_double("train.peak_lr", c.optimizer.peak_lr);
  c.optimizer.warmup_steps = static_cast<int>(kv.get_int("train.warmup_steps", c.optimizer.warmup_steps));
  c.optimizer.clip_norm = kv.get_double("train.clip_norm", c.optimizer.clip_norm);
  c.validate();
}

void apply(const KeyValues& kv, DecodeConfig& c) {
  if (kv.has("decode.strategy")) c.strategy = parse_strategy(kv.get("decode.strategy", ""));
  c.beam = static_cast<int>(kv.get_int("decode.beam", c.beam));
  c.fixed_len = static_cast<int>(kv.get_int("decode.fixed_len", c.fixed_len));
  c.mp_iterations = static_cast<int>(kv.get_int("decode.mp_iterations", c.mp_iterations));
  c.mp_threshold = kv.get_double("decode.mp_threshold", c.mp_threshold);
  if (kv.has("decode.spike_mode")) {
    const std::string m = kv.get("decode.spike_mode", "");
    require(m == "peak" || m == "first", "decode.spike_mode must be peak or first");
    c.spike_mode = m == "peak" ? SpikeMode::Peak : SpikeMode::FirstFrame;
  }
  c.validate();
}

void write(std::ostream& out, const CorpusConfig& c) {
  out << "corpus.seed = " << c.seed << "\ncorpus.n_train = " << c.n_train << "\ncorpus.n_test = " << c.n_test
      << "\ncorpus.content_tokens = " << c.content_tokens << "\ncorpus.feat_dim = " << c.feat_dim
      << "\ncorpus.min_len = " << c.min_len << "\ncorpus.max_len = " << c.max_len
      << "\ncorpus.min_frames_per_token = " << c.min_frames_per_token
      << "\ncorpus.max_frames_per_token = " << c.max_frames_per_token << "\ncorpus.noise_std = " << exact(c.noise_std)
      << "\ncorpus.prototype_std = " << exact(c.prototype_std)
      << "\ncorpus.successors = " << c.successors << '\n';
}

void write(std::ostream& out, const ModelConfig& c) {
  out << "model.d_model = " << c.d_model << "\nmodel.n_heads = " << c.n_heads << "\nmodel.d_ff = " << c.d_ff
      << "\nmodel.encoder_layers = " << c.encoder_layers << "\nmodel.decoder_layers = " << c.decoder_layers
      << "\nmodel.dropout = " << exact(c.dropout) << "\nmodel.vocab_size = " << c.vocab_size
      << "\nmodel.feat_dim = " << c.feat_dim << "\nmodel.ctc_weight = " << exact(c.ctc_weight) << '\n';
}

void write(std::ostream& out, const TrainConfig& c) {
  out << "train.strategy = " << to_string(c.strategy.kind) << "\ntrain.length_tolerance = "
      << c.strategy.length_tolerance << "\ntrain.fixed_len = " << c.strategy.fixed_len << "\ntrain.epochs = " << c.epochs
      << "\ntrain.batch_size = " << c.batch_size << "\ntrain.label_smoothing = " << exact(c.label_smoothing)
      << "\ntrain.sampling_start_epoch = " << c.sampling_start_epoch
      << "\ntrain.spec_augment = " << (c.spec_augment ? "true" : "false")
      << "\ntrain.n_time_masks = " << c.augment.n_time_masks << "\ntrain.time_width = " << c.augment.time_width
      << "\ntrain.n_feat_masks = " << c.augment.n_feat_masks << "\ntrain.feat_width = " << c.augment.feat_width
      << "\ntrain.seed = " << c.seed << "\ntrain.peak_lr = " << exact(c.optimizer.peak_lr)
      << "\ntrain.warmup_steps = " << c.optimizer.warmup_steps << "\ntrain.clip_norm = " << exact(c.optimizer.clip_norm)
      << '\n';
}

void write_corpus_dir(const std::string& dir, const CorpusConfig& config, const Corpus& corpus) {
  std::filesystem::create_directories(dir);
  const Vocab vocab(config.content_tokens);
  auto open = [&](const std::string& name) {
    std::ofstream out(dir + "/" + name);
    require(static_cast<bool>(out), "cannot write '" + dir + "/" + name + "'");
    return out;
  };
  {
    auto out = open("corpus.cfg");
    write(out, config);
  }
  {
    auto out = open("train.jsonl");
    write_manifest(out, corpus.train, vocab);
  }
  auto out = open("test.jsonl");
  write_manifest(out, corpus.test, vocab);
}

namespace {

void check_manifest(const std::string& path, const std::vector<Utterance>& utts, const Vocab& vocab) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot open manifest '" + path + "'");
  const auto entries = read_manifest(in, vocab);
  require(entries.size() == utts.size(), "manifest '" + path + "' has " + std::to_string(entries.size()) +
                                             " entries, corpus.cfg generates " + std::to_string(utts.size()));
  for (std::size_t i = 0; i < utts.size(); ++i)
    require(entries[i].utt_id == utts[i].utt_id && entries[i].frames == utts[i].frames() &&
                entries[i].target == utts[i].target,
            "manifest '" + path + "' disagrees with corpus.cfg at " + entries[i].utt_id);
}

}  // namespace

Corpus read_corpus_dir(const std::string& dir, CorpusConfig* config) {
  CorpusConfig c;
  const KeyValues kv = KeyValues::load(dir + "/corpus.cfg");
  apply(kv, c);
  Corpus corpus = generate_corpus(c);
  const Vocab vocab(c.content_tokens);
  check_manifest(dir + "/train.jsonl", corpus.train, vocab);
  check_manifest(dir + "/test.jsonl", corpus.test, vocab);
  if (config) *config = c;
  return corpus;
}

}  // namespace ctcnar
