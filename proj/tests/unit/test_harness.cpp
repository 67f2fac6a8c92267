// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <random>
#include <sstream>

#include "ctcnar/checkpoint.hpp"
#include "ctcnar/config.hpp"
#include "ctcnar/harness.hpp"
#include "oracles.hpp"

using namespace ctcnar;
namespace fs = std::filesystem;

namespace {

std::vector<int> random_string(std::mt19937_64& rng, int max_len) {
  std::uniform_int_distribution<int> len(0, max_len), tok(5, 8);
  std::vector<int> s(len(rng));
  for (auto& v : s) v = tok(rng);
  return s;
}

ModelConfig small_model() {
  ModelConfig m;
  m.d_model = 16;
  m.n_heads = 2;
  m.d_ff = 32;
  m.encoder_layers = 1;
  m.decoder_layers = 1;
  return m;
}

CorpusConfig small_corpus() {
  CorpusConfig c;
  c.n_train = 8;
  c.n_test = 12;
  return c;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("cer examples") {
  CHECK(cer({5, 6, 7}, {5, 6, 7}) == 0.0);
  CHECK(cer({}, {5, 6, 7}) == 1.0);
  CHECK(cer({5, 9, 7}, {5, 6, 7}) == doctest::Approx(1.0 / 3.0));
  CHECK(cer({5, 6, 7, 8, 9, 10}, {5}) == 5.0);
  CHECK_THROWS_AS(cer({5}, {}), ContractViolation);
  CHECK(rtf(1.0, 100.0) == doctest::Approx(0.01));
  CHECK_THROWS_AS(rtf(1.0, 0.0), ContractViolation);
}

TEST_CASE("edit distance matches the recursive oracle and is a metric") {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 300; ++i) {
    const auto a = random_string(rng, 8), b = random_string(rng, 8), c = random_string(rng, 8);
    const int ab = edit_distance(a, b);
    CHECK(ab == oracle::levenshtein(a, b));
    CHECK(ab == edit_distance(b, a));
    CHECK(edit_distance(a, a) == 0);
    CHECK(edit_distance(a, c) <= ab + edit_distance(b, c));
  }
}

TEST_CASE("length histogram rates") {
  LengthHistogram h;
  h.counts = {{-3, 1}, {0, 6}, {1, 2}, {4, 1}};
  h.total = 10;
  CHECK(h.exact_rate() == doctest::Approx(0.6));
  CHECK(h.nonpositive_mass() == doctest::Approx(0.7));
  CHECK(h.within(2) == doctest::Approx(0.8));
  LengthHistogram perfect;
  perfect.counts = {{0, 4}};
  perfect.total = 4;
  CHECK(perfect.exact_rate() == 1.0);
}

TEST_CASE("decode labels round trip") {
  for (const std::string label : {"ar:beam1", "ar:beam10", "fixed_mask:len24", "spike_copy", "mp_ctc",
                                   "causal_refine", "pm_refine", "mask_len"})
    CHECK(decode_label(parse_decode_label(label)) == label);
  CHECK(parse_decode_label("ar:beam10").beam == 10);
  CHECK(parse_decode_label("fixed_mask:len7").fixed_len == 7);
  CHECK_THROWS(parse_decode_label("ar:wide"));
  CHECK_THROWS(parse_decode_label("nothing"));
}

TEST_CASE("ground truth for mask predict keeps alignment and confidences") {
  CtcGreedyResult ctc;
  ctc.tokens = {5, 9, 7, 8};  // one substitution, one insertion against 5 6 7
  ctc.confidences = {0.99, 0.2, 0.95, 0.4};
  ctc.spike_frames = {0, 1, 2, 3};
  const CtcGreedyResult gt = ground_truth_for_mask_predict(ctc, {5, 6, 7});
  CHECK(gt.tokens == std::vector<int>{5, 6, 7, 8});
  CHECK(gt.confidences == ctc.confidences);
  const CtcGreedyResult plain = ground_truth_input({5, 6});
  CHECK(plain.tokens == std::vector<int>{5, 6});
  CHECK(plain.confidences == std::vector<double>{1.0, 1.0});
}

TEST_CASE("evaluation is deterministic and batch invariant") {
  const Corpus corpus = generate_corpus(small_corpus());
  const Model<float> model(small_model(), 3);
  for (const std::string label : {"ar:beam3", "causal_refine", "mp_ctc", "spike_copy", "fixed_mask:len10"}) {
    const DecodeConfig dc = parse_decode_label(label);
    EvalOptions one, many;
    one.batch_size = 1;
    many.batch_size = 8;
    const EvalRun a = evaluate(model, corpus.test, dc, one);
    const EvalRun b = evaluate(model, corpus.test, dc, many);
    const EvalRun c = evaluate(model, corpus.test, dc, many);
    REQUIRE(a.results.size() == corpus.test.size());
    for (std::size_t i = 0; i < a.results.size(); ++i) {
      CHECK(a.results[i].utt_id == corpus.test[i].utt_id);
      CHECK_MESSAGE(a.results[i].tokens == b.results[i].tokens, label);
    }
    CHECK(b.cer() == c.cer());
    CHECK(b.edits == a.edits);
    CHECK(b.audio_seconds == doctest::Approx(a.audio_seconds));
    CHECK(b.rtf() > 0.0);
    if (is_single_pass(dc.strategy) && dc.strategy != Strategy::SpikeCopy) CHECK(b.mean_decoder_passes() == 1.0);
  }
}

TEST_CASE("length histogram totals the test set") {
  const Corpus corpus = generate_corpus(small_corpus());
  const Model<float> model(small_model(), 4);
  const LengthHistogram h = run_length_histogram(model, corpus.test);
  int sum = 0;
  for (const auto& [diff, n] : h.counts) sum += n;
  CHECK(sum == h.total);
  CHECK(h.total == static_cast<int>(corpus.test.size()));
}

TEST_CASE("strategy table skips missing checkpoints with a warning") {
  const Corpus corpus = generate_corpus(small_corpus());
  TempDir dir("ctcnar_table_test");
  const Model<float> model(small_model(), 5);
  const std::string path = (dir.path / "m.ckpt").string();
  save_checkpoint(path, model, {{"train.strategy", "teacher_forcing_cm"}});
  std::vector<TableEntry> entries{{"ok", path, parse_decode_label("causal_refine")},
                                  {"missing", (dir.path / "none.ckpt").string(), parse_decode_label("mask_len")}};
  std::ostringstream warn;
  const auto rows = run_strategy_table(entries, corpus.test, {}, &warn);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].label == "ok");
  CHECK(rows[0].train_strategy == "teacher_forcing_cm");
  CHECK(rows[0].mean_decoder_passes == 1.0);
  CHECK(warn.str().find("missing") != std::string::npos);

  std::ostringstream csv;
  write_table1_csv(csv, rows);
  CHECK(csv.str().rfind("label,", 0) == 0);
  const auto robust = run_robustness_table(
      {{"cr", path, parse_decode_label("causal_refine")}, {"gone", "/nonexistent.ckpt", parse_decode_label("mp_ctc")}},
      corpus.test, 8, &warn);
  REQUIRE(robust.size() == 1);
  CHECK(robust[0].cer_with_gt_input >= 0.0);
}

TEST_CASE("suite layout") {
  CHECK(checkpoint_path("models", TrainKind::CtcSamplingCM) == (fs::path("models") / "ctc_sampling_cm.ckpt").string());
  CHECK(suite_train_kinds().size() == 7);
  const auto entries = default_table_entries("m");
  CHECK(entries.size() == 9);
  int beams = 0;
  for (const auto& e : entries) beams += e.decode.strategy == Strategy::AR;
  CHECK(beams == 2);
  CHECK(default_robustness_entries("m").size() == 4);
}

TEST_CASE("checkpoint round trip and corruption") {
  const Model<float> model(small_model(), 6);
  std::stringstream buf;
  save_checkpoint(buf, model, {{"train.seed", "7"}});
  const std::string bytes = buf.str();
  std::istringstream in(bytes);
  const Checkpoint ck = load_checkpoint(in);
  CHECK(ck.meta.at("train.seed") == "7");
  CHECK(ck.model.config() == model.config());
  const auto a = model.parameters(), b = ck.model.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i]->name == b[i]->name);
    CHECK(a[i]->value == b[i]->value);
  }
  std::stringstream again;
  save_checkpoint(again, ck.model, ck.meta);
  CHECK(again.str() == bytes);

  std::string bad = bytes;
  bad[0] = 'X';
  std::istringstream bad_in(bad);
  CHECK_THROWS_AS(load_checkpoint(bad_in), ContractViolation);
  std::istringstream cut(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(cut), ContractViolation);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/file.ckpt"), ContractViolation);
}

TEST_CASE("config text round trips through apply") {
  CorpusConfig corpus;
  corpus.noise_std = 0.123456789;
  corpus.successors = 3;
  ModelConfig model;
  model.dropout = 0.15f;
  TrainConfig train;
  train.optimizer.peak_lr = 1.7e-3;
  train.strategy.kind = TrainKind::MaskForcingPM;
  std::stringstream text;
  write(text, corpus);
  write(text, model);
  write(text, train);
  const KeyValues kv = KeyValues::parse(text);
  CorpusConfig c2;
  ModelConfig m2;
  TrainConfig t2;
  apply(kv, c2);
  apply(kv, m2);
  apply(kv, t2);
  CHECK(c2.noise_std == corpus.noise_std);
  CHECK(c2.successors == 3);
  CHECK(m2 == model);
  CHECK(t2.optimizer.peak_lr == train.optimizer.peak_lr);
  CHECK(t2.strategy.kind == TrainKind::MaskForcingPM);
  CHECK(kv.unused().empty());

  std::istringstream odd("# comment\n  decode.beam = 4  # trailing\n\n");
  const KeyValues k2 = KeyValues::parse(odd);
  DecodeConfig dc;
  apply(k2, dc);
  CHECK(dc.beam == 4);
  std::istringstream broken("decode.beam 4\n");
  CHECK_THROWS_AS(KeyValues::parse(broken), ContractViolation);
  std::istringstream nonnum("decode.beam = four\n");
  CHECK_THROWS(apply(KeyValues::parse(nonnum), dc));
}

TEST_CASE("corpus directory round trip") {
  TempDir dir("ctcnar_corpus_test");
  CorpusConfig c = small_corpus();
  c.successors = 4;
  const Corpus corpus = generate_corpus(c);
  write_corpus_dir(dir.path.string(), c, corpus);
  CHECK(fs::exists(dir.path / "corpus.cfg"));
  CHECK(fs::exists(dir.path / "train.jsonl"));
  CHECK(fs::exists(dir.path / "test.jsonl"));
  CorpusConfig back;
  const Corpus again = read_corpus_dir(dir.path.string(), &back);
  CHECK(back.successors == 4);
  REQUIRE(again.test.size() == corpus.test.size());
  for (std::size_t i = 0; i < again.test.size(); ++i) CHECK(again.test[i].features == corpus.test[i].features);
  CHECK_THROWS(read_corpus_dir((dir.path / "nothing").string()));
}
