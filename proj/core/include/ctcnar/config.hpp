// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <map>
#include <set>
#include <string>

#include "ctcnar/data.hpp"
#include "ctcnar/decode.hpp"
#include "ctcnar/model.hpp"
#include "ctcnar/train.hpp"

namespace ctcnar {

/// Flat `key = value` text. '#' starts a comment; blank lines are ignored.
class KeyValues {
 public:
  static KeyValues parse(std::istream& in);
  static KeyValues load(const std::string& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Keys never read through a getter.
  std::set<std::string> unused() const;

 private:
  const std::string* find(const std::string& key) const;
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

// Keys are prefixed by section: corpus.*, model.*, train.*, decode.*.
void apply(const KeyValues& kv, CorpusConfig& c);
void apply(const KeyValues& kv, ModelConfig& c);
void apply(const KeyValues& kv, TrainConfig& c);
void apply(const KeyValues& kv, DecodeConfig& c);

void write(std::ostream& out, const CorpusConfig& c);
void write(std::ostream& out, const ModelConfig& c);
void write(std::ostream& out, const TrainConfig& c);

// -- corpus directories ----------------------------------------------------
// <dir>/corpus.cfg holds the generator settings; train.jsonl and test.jsonl are
// manifests. Features are regenerated from corpus.cfg and checked against them.

void write_corpus_dir(const std::string& dir, const CorpusConfig& config, const Corpus& corpus);
/// Throws ContractViolation if the directory is incomplete or the manifests disagree
/// with the regenerated corpus.
Corpus read_corpus_dir(const std::string& dir, CorpusConfig* config = nullptr);

}  // namespace ctcnar
