// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

// Command line driver: corpus generation, training, decoding and the reports.
// Every flag is a shortcut for a config key, so a `--config` file can carry any
// of them; flags win over `--set`, which wins over the file.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ctcnar/checkpoint.hpp"
#include "ctcnar/config.hpp"
#include "ctcnar/harness.hpp"
#include "ctcnar/train.hpp"

namespace {

using namespace ctcnar;

constexpr int kUsageExit = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Invocation {
  std::string config_path;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;
  std::vector<std::string> rows;  // report rows, LABEL=CHECKPOINT

  KeyValues assemble() const {
    KeyValues kv;
    if (!config_path.empty()) kv = KeyValues::load(config_path);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw UsageError("--set expects KEY=VALUE, got '" + s + "'");
      kv.set(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [k, v] : flags) kv.set(k, v);
    return kv;
  }
};

// Adds `--name` that stores its value under config key `key`.
CLI::Option* keyed(CLI::App* app, Invocation& inv, const std::string& name, const std::string& key,
                   const std::string& help) {
  return app->add_option_function<std::string>(
      name, [&inv, key](const std::string& v) { inv.flags[key] = v; }, help + " [" + key + "]");
}

void add_common(CLI::App* app, Invocation& inv) {
  app->add_option("-c,--config", inv.config_path, "flat key = value config file")->check(CLI::ExistingFile);
  app->add_option("--set", inv.sets, "override a config key, KEY=VALUE (repeatable)");
}

CLI::Validator train_kind_name() {
  return CLI::Validator(
      [](std::string& s) -> std::string {
        try {
          parse_train_kind(s);
        } catch (const std::exception& e) {
          return e.what();
        }
        return {};
      },
      "TRAIN_KIND");
}

CLI::Validator strategy_name() {
  return CLI::Validator(
      [](std::string& s) -> std::string {
        try {
          parse_strategy(s);
        } catch (const std::exception& e) {
          return e.what();
        }
        return {};
      },
      "STRATEGY");
}

// Everything a command needs, resolved from the merged key/value set.
struct Settings {
  KeyValues kv;
  CorpusConfig corpus;
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;
  EvalOptions eval;
  std::string data_dir;
  std::string checkpoint;
  std::string models_dir;
  std::string out;
  std::string log;
  std::string strategies;
  int save_every = 0;
};

Settings resolve(const Invocation& inv) {
  Settings s;
  s.kv = inv.assemble();
  const KeyValues& kv = s.kv;
  try {
    apply(kv, s.corpus);
    apply(kv, s.model);
    apply(kv, s.train);
    apply(kv, s.decode);
    s.eval.batch_size = static_cast<int>(kv.get_int("eval.batch_size", s.eval.batch_size));
    s.eval.threads = static_cast<int>(kv.get_int("eval.threads", s.eval.threads));
    s.eval.warmup = kv.get_bool("eval.warmup", s.eval.warmup);
    s.save_every = static_cast<int>(kv.get_int("train.save_every", 0));
  } catch (const ContractViolation& e) {
    throw UsageError(e.what());
  }
  s.data_dir = kv.get("data", "");
  s.checkpoint = kv.get("checkpoint", "");
  s.models_dir = kv.get("models", "");
  s.out = kv.get("out", "");
  s.log = kv.get("log", "");
  s.strategies = kv.get("strategies", "");
  if (s.eval.batch_size < 1) throw UsageError("eval.batch_size must be >= 1");
  if (s.save_every < 0) throw UsageError("train.save_every must be >= 0");
  if (const auto unused = kv.unused(); !unused.empty()) throw UsageError("unknown config key '" + *unused.begin() + "'");
  return s;
}

Corpus load_corpus(Settings& s) {
  if (!s.data_dir.empty()) return read_corpus_dir(s.data_dir, &s.corpus);
  return generate_corpus(s.corpus);
}

const std::vector<Utterance>& require_test(const Corpus& c) {
  require(!c.test.empty(), "the test split is empty");
  return c.test;
}

Checkpoint load_required(const std::string& path) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  return load_checkpoint(path);
}

std::ostream& output(const std::string& path, std::unique_ptr<std::ofstream>& holder) {
  if (path.empty() || path == "-") return std::cout;
  if (const auto parent = std::filesystem::path(path).parent_path(); !parent.empty())
    std::filesystem::create_directories(parent);
  holder = std::make_unique<std::ofstream>(path);
  require(static_cast<bool>(*holder), "cannot write '" + path + "'");
  return *holder;
}

std::string train_meta(const CheckpointMeta& meta) {
  const auto it = meta.find("train.strategy");
  return it == meta.end() ? "" : it->second;
}

// -- commands -------------------------------------------------------------

int cmd_gen_data(Settings& s) {
  if (s.out.empty()) throw UsageError("gen-data needs --out DIR");
  const Corpus corpus = generate_corpus(s.corpus);
  write_corpus_dir(s.out, s.corpus, corpus);
  std::cout << "wrote " << corpus.train.size() << " train and " << corpus.test.size() << " test utterances to "
            << s.out << '\n';
  return 0;
}

int cmd_train(Settings& s) {
  const Corpus corpus = load_corpus(s);
  require(!corpus.train.empty(), "the train split is empty");
  s.model.vocab_size = s.corpus.vocab_size();
  s.model.feat_dim = s.corpus.feat_dim;
  const std::string out = s.out.empty() ? to_string(s.train.strategy.kind) + ".ckpt" : s.out;

  CheckpointMeta meta;
  {
    std::ostringstream cfg;
    write(cfg, s.corpus);
    write(cfg, s.model);
    write(cfg, s.train);
    meta["config"] = cfg.str();
  }
  meta["train.strategy"] = to_string(s.train.strategy.kind);
  meta["train.seed"] = std::to_string(s.train.seed);
  meta["corpus.seed"] = std::to_string(s.corpus.seed);

  std::unique_ptr<std::ofstream> log_file;
  TrainHooks hooks;
  if (!s.log.empty()) hooks.csv_log = &output(s.log, log_file);
  hooks.on_epoch = [&](const EpochSummary& e, const Model<float>& m) {
    std::cerr << "epoch " << e.epoch << " loss " << e.loss << " ctc " << e.ctc << " att " << e.att
              << " ctc_input_ratio " << e.ctc_input_ratio << " (" << e.seconds << " s)\n";
    if (s.save_every > 0 && e.epoch % s.save_every == 0 && e.epoch < s.train.epochs) {
      CheckpointMeta m2 = meta;
      m2["epoch"] = std::to_string(e.epoch);
      save_checkpoint(out + ".ep" + std::to_string(e.epoch), m, m2);
    }
  };
  Model<float> model(s.model, s.train.seed);
  train_model(model, corpus.train, s.train, hooks);
  meta["epoch"] = std::to_string(s.train.epochs);
  if (const auto parent = std::filesystem::path(out).parent_path(); !parent.empty())
    std::filesystem::create_directories(parent);
  save_checkpoint(out, model, meta);
  std::cerr << "saved " << out << '\n';
  return 0;
}

int cmd_decode(Settings& s) {
  const Checkpoint ck = load_required(s.checkpoint);
  const Corpus corpus = load_corpus(s);
  const EvalRun run = evaluate(ck.model, require_test(corpus), s.decode, s.eval);
  std::unique_ptr<std::ofstream> file;
  write_decode_jsonl(output(s.out, file), run.results, Vocab(s.corpus.content_tokens));
  return 0;
}

int cmd_eval(Settings& s) {
  const Checkpoint ck = load_required(s.checkpoint);
  const Corpus corpus = load_corpus(s);
  const StrategyRow row =
      evaluate_row(decode_label(s.decode), ck.model, train_meta(ck.meta), require_test(corpus), s.decode, s.eval);
  write_table1_text(std::cout, {row}, host_description());
  if (!s.out.empty()) {
    std::unique_ptr<std::ofstream> file;
    write_table1_csv(output(s.out, file), {row});
  }
  return 0;
}

std::vector<std::pair<std::string, std::string>> split_rows(const std::vector<std::string>& rows) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& r : rows) {
    const auto eq = r.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == r.size())
      throw UsageError("--row expects DECODE_LABEL=CHECKPOINT, got '" + r + "'");
    out.emplace_back(r.substr(0, eq), r.substr(eq + 1));
  }
  return out;
}

DecodeConfig row_decode(const std::string& label, const DecodeConfig& base) {
  DecodeConfig c;
  try {
    c = parse_decode_label(label);
  } catch (const ContractViolation& e) {
    throw UsageError(e.what());
  }
  c.mp_iterations = base.mp_iterations;
  c.mp_threshold = base.mp_threshold;
  c.spike_mode = base.spike_mode;
  return c;
}

void write_reports(const Settings& s, const std::function<void(std::ostream&)>& text,
                   const std::function<void(std::ostream&)>& csv) {
  text(std::cout);
  if (!s.out.empty()) {
    std::unique_ptr<std::ofstream> file;
    csv(output(s.out, file));
  }
}

int cmd_table1(Settings& s, const Invocation& inv) {
  std::vector<TableEntry> entries;
  for (const auto& [label, path] : split_rows(inv.rows)) entries.push_back({label, path, row_decode(label, s.decode)});
  if (entries.empty()) {
    if (s.models_dir.empty()) throw UsageError("report-table1 needs --models DIR or --row");
    entries = default_table_entries(s.models_dir);
  }
  const Corpus corpus = load_corpus(s);
  const auto rows = run_strategy_table(entries, require_test(corpus), s.eval, &std::cerr);
  write_reports(
      s, [&](std::ostream& o) { write_table1_text(o, rows, host_description()); },
      [&](std::ostream& o) { write_table1_csv(o, rows); });
  return 0;
}

int cmd_fig2(Settings& s, const Invocation& inv) {
  std::vector<RobustnessEntry> entries;
  for (const auto& [label, path] : split_rows(inv.rows)) entries.push_back({label, path, row_decode(label, s.decode)});
  if (entries.empty()) {
    if (s.models_dir.empty()) throw UsageError("report-fig2 needs --models DIR or --row");
    entries = default_robustness_entries(s.models_dir);
  }
  const Corpus corpus = load_corpus(s);
  const auto rows = run_robustness_table(entries, require_test(corpus), s.eval.batch_size, &std::cerr);
  for (const auto& r : rows)
    if (!r.gap_nonnegative()) std::cerr << "warning: " << r.label << " is better with CTC input than ground truth\n";
  write_reports(
      s, [&](std::ostream& o) { write_fig2_text(o, rows); }, [&](std::ostream& o) { write_fig2_csv(o, rows); });
  return 0;
}

int cmd_fig3(Settings& s) {
  const Checkpoint ck = load_required(s.checkpoint);
  const Corpus corpus = load_corpus(s);
  const LengthHistogram h = run_length_histogram(ck.model, require_test(corpus), s.eval.batch_size);
  write_reports(
      s, [&](std::ostream& o) { write_fig3_text(o, h); }, [&](std::ostream& o) { write_fig3_csv(o, h); });
  return 0;
}

int cmd_table3(Settings& s) {
  const Checkpoint ck = load_required(s.checkpoint);
  const Corpus corpus = load_corpus(s);
  const CtcVsDecoder r = run_ctc_vs_decoder(ck.model, require_test(corpus), s.decode, s.eval.batch_size);
  write_reports(
      s, [&](std::ostream& o) { write_table3_text(o, r); }, [&](std::ostream& o) { write_table3_csv(o, r); });
  return 0;
}

int cmd_bench_rtf(Settings& s) {
  const Checkpoint ck = load_required(s.checkpoint);
  std::vector<DecodeConfig> configs;
  std::stringstream list(s.strategies.empty() ? "ar:beam10,causal_refine" : s.strategies);
  for (std::string label; std::getline(list, label, ',');)
    if (!label.empty()) configs.push_back(row_decode(label, s.decode));
  const Corpus corpus = load_corpus(s);
  const auto& test = require_test(corpus);
  const int threads = s.eval.threads > 0 ? s.eval.threads : decode_threads();

  std::unique_ptr<std::ofstream> file;
  std::ostream& out = output(s.out, file);
  out << "strategy,rtf,wall_time_s,audio_s,cer,mean_decoder_passes,batch_size,threads\n";
  for (const auto& c : configs) {
    const EvalRun run = evaluate(ck.model, test, c, s.eval);
    out << decode_label(c) << ',' << run.rtf() << ',' << run.wall_time << ',' << run.audio_seconds << ','
        << run.cer() << ',' << run.mean_decoder_passes() << ',' << s.eval.batch_size << ',' << threads << '\n';
  }
  std::cerr << "# host: " << host_description() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ctcnar: CTC-guided non-autoregressive ASR workbench"};
  app.require_subcommand(1);
  Invocation inv;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus into a directory");
  add_common(gen, inv);
  keyed(gen, inv, "-o,--out", "out", "output directory")->required();
  keyed(gen, inv, "--seed", "corpus.seed", "corpus seed");
  keyed(gen, inv, "--n-train", "corpus.n_train", "training utterances");
  keyed(gen, inv, "--n-test", "corpus.n_test", "test utterances");

  auto* train = app.add_subcommand("train", "train one model");
  add_common(train, inv);
  keyed(train, inv, "--strategy", "train.strategy", "training strategy")->check(train_kind_name());
  keyed(train, inv, "--seed", "train.seed", "initialisation and shuffling seed");
  keyed(train, inv, "--epochs", "train.epochs", "epochs");
  keyed(train, inv, "--data", "data", "corpus directory from gen-data (default: generate from corpus.*)");
  keyed(train, inv, "-o,--out", "out", "checkpoint path (default <strategy>.ckpt)");
  keyed(train, inv, "--log", "log", "per-step CSV log");
  keyed(train, inv, "--save-every", "train.save_every", "also checkpoint every N epochs");

  auto decode_flags = [&](CLI::App* sub) {
    keyed(sub, inv, "--checkpoint", "checkpoint", "model checkpoint");
    keyed(sub, inv, "--strategy", "decode.strategy", "decoding strategy")->check(strategy_name());
    keyed(sub, inv, "--beam", "decode.beam", "AR beam width");
    keyed(sub, inv, "--fixed-len", "decode.fixed_len", "fixed_mask length");
    keyed(sub, inv, "--iterations", "decode.mp_iterations", "mp_ctc iterations");
    keyed(sub, inv, "--threshold", "decode.mp_threshold", "mp_ctc confidence threshold");
  };
  auto data_flags = [&](CLI::App* sub) {
    keyed(sub, inv, "--data,--test", "data", "corpus directory (test split is used)");
    keyed(sub, inv, "--batch-size", "eval.batch_size", "decode batch size");
    keyed(sub, inv, "-o,--out", "out", "output file (CSV or JSONL)");
  };

  auto* decode = app.add_subcommand("decode", "decode the test split to JSONL");
  add_common(decode, inv);
  decode_flags(decode);
  data_flags(decode);

  auto* eval = app.add_subcommand("eval", "CER, RTF and decoder passes of one strategy");
  add_common(eval, inv);
  decode_flags(eval);
  data_flags(eval);

  auto* t1 = app.add_subcommand("report-table1", "strategy table");
  auto* f2 = app.add_subcommand("report-fig2", "robustness to the decoder input");
  for (auto* sub : {t1, f2}) {
    add_common(sub, inv);
    data_flags(sub);
    keyed(sub, inv, "--models", "models", "directory of <train_kind>.ckpt files");
    sub->add_option("--row", inv.rows, "DECODE_LABEL=CHECKPOINT (repeatable, replaces the default rows)");
  }

  auto* f3 = app.add_subcommand("report-fig3", "CTC length-error histogram");
  add_common(f3, inv);
  data_flags(f3);
  keyed(f3, inv, "--checkpoint", "checkpoint", "model checkpoint");

  auto* t3 = app.add_subcommand("report-table3", "CTC greedy vs decoder CER");
  add_common(t3, inv);
  data_flags(t3);
  decode_flags(t3);

  auto* bench = app.add_subcommand("bench-rtf", "RTF of several strategies on one checkpoint");
  add_common(bench, inv);
  data_flags(bench);
  keyed(bench, inv, "--checkpoint", "checkpoint", "model checkpoint");
  keyed(bench, inv, "--strategies", "strategies", "comma-separated decode labels, e.g. ar:beam10,causal_refine");
  keyed(bench, inv, "--threads", "eval.threads", "decode threads (default NAR_THREADS)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\nrun with --help for usage\n";
    return kUsageExit;
  }

  try {
    Settings s = resolve(inv);
    if (*gen) return cmd_gen_data(s);
    if (*train) return cmd_train(s);
    if (*decode) return cmd_decode(s);
    if (*eval) return cmd_eval(s);
    if (*t1) return cmd_table1(s, inv);
    if (*f2) return cmd_fig2(s, inv);
    if (*f3) return cmd_fig3(s);
    if (*t3) return cmd_table3(s);
    if (*bench) return cmd_bench_rtf(s);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsageExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kUsageExit;
}
