// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctcnar/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "ctcnar/checkpoint.hpp"

namespace ctcnar {

int edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double cer(const std::vector<int>& hyp, const std::vector<int>& ref) {
  require(!ref.empty(), "cer needs a non-empty reference");
  return static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(ref.size());
}

double rtf(double decode_seconds, double audio_seconds) {
  require(audio_seconds > 0.0, "rtf needs a positive audio duration");
  return decode_seconds / audio_seconds;
}

int decode_threads() {
  const char* env = std::getenv("NAR_THREADS");
  if (!env || !*env) return 1;
  const int n = std::atoi(env);
  return n >= 1 ? n : 1;
}

double EvalRun::mean_decoder_passes() const {
  if (results.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : results) total += r.decoder_passes;
  return total / static_cast<double>(results.size());
}

namespace {

// Length-sorted groups of test indices.
std::vector<std::vector<std::size_t>> sorted_groups(const std::vector<Utterance>& utts, int batch_size) {
  require(batch_size >= 1, "batch_size must be >= 1");
  std::vector<std::size_t> order(utts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return utts[a].frames() < utts[b].frames(); });
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    groups.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + batch_size));
  return groups;
}

Batch group_batch(const std::vector<Utterance>& utts, const std::vector<std::size_t>& group) {
  std::vector<const Utterance*> ptrs;
  for (std::size_t i : group) ptrs.push_back(&utts[i]);
  return make_batch(ptrs);
}

template <typename Fn>
void for_each_group(const std::vector<Utterance>& utts, int batch_size, Fn&& fn) {
  for (const auto& g : sorted_groups(utts, batch_size)) {
    const Batch batch = group_batch(utts, g);
    fn(g, batch);
  }
}

}  // namespace

EvalRun evaluate(const Model<float>& model, const std::vector<Utterance>& test, const DecodeConfig& config,
                 const EvalOptions& options) {
  config.validate();
  require(!test.empty(), "empty test set");
  const auto groups = sorted_groups(test, options.batch_size);
  std::vector<Batch> batches;
  for (const auto& g : groups) batches.push_back(group_batch(test, g));

  if (options.warmup) (void)decode_batch(model, batches.front(), config);

  EvalRun run;
  run.results.resize(test.size());
  const int threads = std::max(1, std::min<int>(options.threads > 0 ? options.threads : decode_threads(),
                                                 static_cast<int>(batches.size())));
  const auto start = std::chrono::steady_clock::now();
  if (threads == 1) {
    for (std::size_t g = 0; g < batches.size(); ++g) {
      auto res = decode_batch(model, batches[g], config);
      for (std::size_t i = 0; i < res.size(); ++i) run.results[groups[g][i]] = std::move(res[i]);
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t g = next++; g < batches.size(); g = next++) {
          auto res = decode_batch(model, batches[g], config);
          for (std::size_t i = 0; i < res.size(); ++i) run.results[groups[g][i]] = std::move(res[i]);
        }
      });
    for (auto& th : pool) th.join();
  }
  run.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  for (std::size_t i = 0; i < test.size(); ++i) {
    run.edits += edit_distance(run.results[i].tokens, test[i].target);
    run.ref_tokens += static_cast<long long>(test[i].target.size());
    run.audio_seconds += test[i].duration();
  }
  return run;
}

StrategyRow evaluate_row(const std::string& label, const Model<float>& model, const std::string& train_strategy,
                         const std::vector<Utterance>& test, const DecodeConfig& config, const EvalOptions& options) {
  const EvalRun run = evaluate(model, test, config, options);
  StrategyRow row;
  row.label = label;
  row.train_strategy = train_strategy;
  row.decode = config;
  row.cer = run.cer();
  row.rtf = run.rtf();
  row.mean_decoder_passes = run.mean_decoder_passes();
  double positions = 0.0;
  for (const auto& r : run.results) positions += r.decoder_positions;
  row.mean_decoder_positions = positions / static_cast<double>(run.results.size());
  return row;
}

std::vector<StrategyRow> run_strategy_table(const std::vector<TableEntry>& entries, const std::vector<Utterance>& test,
                                            const EvalOptions& options, std::ostream* warnings) {
  std::vector<StrategyRow> rows;
  for (const auto& e : entries) {
    std::optional<Checkpoint> ck;
    try {
      ck.emplace(load_checkpoint(e.checkpoint));
    } catch (const std::exception& ex) {
      if (warnings) *warnings << "warning: skipping row '" << e.label << "': " << ex.what() << '\n';
      continue;
    }
    const auto it = ck->meta.find("train.strategy");
    rows.push_back(evaluate_row(e.label, ck->model, it == ck->meta.end() ? "" : it->second, test, e.decode, options));
  }
  return rows;
}

// ---------------------------------------------------------------------------

CtcGreedyResult ground_truth_input(const std::vector<int>& ref) {
  CtcGreedyResult r;
  r.tokens = ref;
  r.confidences.assign(ref.size(), 1.0);
  r.spike_frames.resize(ref.size());
  std::iota(r.spike_frames.begin(), r.spike_frames.end(), 0);
  return r;
}

CtcGreedyResult ground_truth_for_mask_predict(const CtcGreedyResult& ctc, const std::vector<int>& ref) {
  const auto& hyp = ctc.tokens;
  const std::size_t n = hyp.size(), m = ref.size();
  std::vector<std::vector<int>> d(n + 1, std::vector<int>(m + 1));
  for (std::size_t i = 0; i <= n; ++i) d[i][0] = static_cast<int>(i);
  for (std::size_t j = 0; j <= m; ++j) d[0][j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (hyp[i - 1] != ref[j - 1])});

  CtcGreedyResult out = ctc;
  std::size_t i = n, j = m;
  while (i > 0 && j > 0) {
    if (d[i][j] == d[i - 1][j - 1] + (hyp[i - 1] != ref[j - 1])) {
      out.tokens[i - 1] = ref[j - 1];
      --i;
      --j;
    } else if (d[i][j] == d[i - 1][j] + 1) {
      --i;
    } else {
      --j;
    }
  }
  return out;
}

RobustnessRow run_robustness(const std::string& label, const Model<float>& model, const std::vector<Utterance>& test,
                             const DecodeConfig& config, int batch_size) {
  config.validate();
  require(config.strategy != Strategy::AR && config.strategy != Strategy::FixedMask,
          "robustness needs a strategy that consumes CTC output");
  long long edits_gt = 0, edits_ctc = 0, ref_tokens = 0;
  for_each_group(test, batch_size, [&](const std::vector<std::size_t>& group, const Batch& batch) {
    const EncoderOutput<float> enc = model.encode(batch.features, batch.feature_lengths);
    const auto ctc = ctc_greedy(model.ctc_head(enc), enc.lengths, kBlank, config.spike_mode);
    std::vector<CtcGreedyResult> gt;
    for (std::size_t i = 0; i < group.size(); ++i)
      gt.push_back(config.strategy == Strategy::MPCTC ? ground_truth_for_mask_predict(ctc[i], batch.targets[i])
                                                      : ground_truth_input(batch.targets[i]));
    const auto with_ctc = decode_with(model, enc, ctc, config);
    const auto with_gt = decode_with(model, enc, gt, config);
    for (std::size_t i = 0; i < group.size(); ++i) {
      edits_ctc += edit_distance(with_ctc[i].tokens, batch.targets[i]);
      edits_gt += edit_distance(with_gt[i].tokens, batch.targets[i]);
      ref_tokens += static_cast<long long>(batch.targets[i].size());
    }
  });
  RobustnessRow row;
  row.label = label;
  row.cer_with_ctc_input = static_cast<double>(edits_ctc) / ref_tokens;
  row.cer_with_gt_input = static_cast<double>(edits_gt) / ref_tokens;
  return row;
}

// ---------------------------------------------------------------------------

double LengthHistogram::exact_rate() const {
  const auto it = counts.find(0);
  return total && it != counts.end() ? static_cast<double>(it->second) / total : 0.0;
}

double LengthHistogram::nonpositive_mass() const {
  int n = 0;
  for (const auto& [diff, c] : counts)
    if (diff <= 0) n += c;
  return total ? static_cast<double>(n) / total : 0.0;
}

double LengthHistogram::within(int tolerance) const {
  int n = 0;
  for (const auto& [diff, c] : counts)
    if (std::abs(diff) <= tolerance) n += c;
  return total ? static_cast<double>(n) / total : 0.0;
}

LengthHistogram run_length_histogram(const Model<float>& model, const std::vector<Utterance>& test, int batch_size) {
  LengthHistogram h;
  for_each_group(test, batch_size, [&](const std::vector<std::size_t>& group, const Batch& batch) {
    const EncoderOutput<float> enc = model.encode(batch.features, batch.feature_lengths);
    const auto ctc = ctc_greedy(model.ctc_head(enc), enc.lengths);
    for (std::size_t i = 0; i < group.size(); ++i) {
      ++h.counts[static_cast<int>(batch.targets[i].size()) - predict_length(ctc[i])];
      ++h.total;
    }
  });
  return h;
}

CtcVsDecoder run_ctc_vs_decoder(const Model<float>& model, const std::vector<Utterance>& test,
                                const DecodeConfig& config, int batch_size) {
  long long e_ctc = 0, e_dec = 0, ref_tokens = 0;
  for_each_group(test, batch_size, [&](const std::vector<std::size_t>& group, const Batch& batch) {
    const EncoderOutput<float> enc = model.encode(batch.features, batch.feature_lengths);
    const auto ctc = ctc_greedy(model.ctc_head(enc), enc.lengths, kBlank, config.spike_mode);
    const auto dec = decode_with(model, enc, ctc, config);
    for (std::size_t i = 0; i < group.size(); ++i) {
      e_ctc += edit_distance(ctc[i].tokens, batch.targets[i]);
      e_dec += edit_distance(dec[i].tokens, batch.targets[i]);
      ref_tokens += static_cast<long long>(batch.targets[i].size());
    }
  });
  return {static_cast<double>(e_ctc) / ref_tokens, static_cast<double>(e_dec) / ref_tokens};
}

// ---------------------------------------------------------------------------

std::string checkpoint_path(const std::string& models_dir, TrainKind kind) {
  return models_dir + "/" + to_string(kind) + ".ckpt";
}

const std::vector<TrainKind>& suite_train_kinds() {
  static const std::vector<TrainKind> kinds{TrainKind::TeacherForcingCM, TrainKind::CtcSamplingCM,
                                            TrainKind::CtcSamplingPM,    TrainKind::MaskForcingPM,
                                            TrainKind::MaskPredictPM,    TrainKind::SpikeCopyPM,
                                            TrainKind::FixedMaskPM};
  return kinds;
}

std::vector<TableEntry> default_table_entries(const std::string& models_dir) {
  const std::vector<std::pair<TrainKind, std::string>> rows{
      {TrainKind::TeacherForcingCM, "ar:beam1"},      {TrainKind::TeacherForcingCM, "ar:beam10"},
      {TrainKind::FixedMaskPM, "fixed_mask:len24"},   {TrainKind::SpikeCopyPM, "spike_copy"},
      {TrainKind::MaskPredictPM, "mp_ctc"},           {TrainKind::MaskForcingPM, "mask_len"},
      {TrainKind::CtcSamplingPM, "pm_refine"},        {TrainKind::CtcSamplingCM, "causal_refine"},
      {TrainKind::TeacherForcingCM, "causal_refine"},
  };
  std::vector<TableEntry> out;
  for (const auto& [kind, label] : rows)
    out.push_back({to_string(kind) + "/" + label, checkpoint_path(models_dir, kind), parse_decode_label(label)});
  return out;
}

std::vector<RobustnessEntry> default_robustness_entries(const std::string& models_dir) {
  const std::vector<std::pair<TrainKind, std::string>> rows{
      {TrainKind::TeacherForcingCM, "causal_refine"},
      {TrainKind::CtcSamplingCM, "causal_refine"},
      {TrainKind::CtcSamplingPM, "pm_refine"},
      {TrainKind::MaskPredictPM, "mp_ctc"},
  };
  std::vector<RobustnessEntry> out;
  for (const auto& [kind, label] : rows)
    out.push_back({to_string(kind) + "/" + label, checkpoint_path(models_dir, kind), parse_decode_label(label)});
  return out;
}

std::vector<RobustnessRow> run_robustness_table(const std::vector<RobustnessEntry>& entries,
                                                const std::vector<Utterance>& test, int batch_size,
                                                std::ostream* warnings) {
  std::vector<RobustnessRow> rows;
  for (const auto& e : entries) {
    std::optional<Checkpoint> ck;
    try {
      ck.emplace(load_checkpoint(e.checkpoint));
    } catch (const std::exception& ex) {
      if (warnings) *warnings << "warning: skipping row '" << e.label << "': " << ex.what() << '\n';
      continue;
    }
    rows.push_back(run_robustness(e.label, ck->model, test, e.decode, batch_size));
  }
  return rows;
}

std::string host_description() {
  std::string model = "unknown cpu";
  std::ifstream cpu("/proc/cpuinfo");
  for (std::string line; std::getline(cpu, line);)
    if (line.rfind("model name", 0) == 0) {
      model = line.substr(line.find(':') + 2);
      break;
    }
  return model + ", " + std::to_string(std::max(1u, std::thread::hardware_concurrency())) + " hw threads, " +
         std::to_string(decode_threads()) + " decode threads";
}

std::string decode_label(const DecodeConfig& c) {
  std::string s = to_string(c.strategy);
  if (c.strategy == Strategy::AR) s += ":beam" + std::to_string(c.beam);
  if (c.strategy == Strategy::FixedMask) s += ":len" + std::to_string(c.fixed_len);
  return s;
}

DecodeConfig parse_decode_label(const std::string& label) {
  DecodeConfig c;
  const auto colon = label.find(':');
  c.strategy = parse_strategy(label.substr(0, colon));
  if (colon != std::string::npos) {
    const std::string opt = label.substr(colon + 1);
    auto number = [&](const std::string& prefix) {
      require(opt.rfind(prefix, 0) == 0 && opt.size() > prefix.size(), "bad decode option '" + opt + "'");
      const std::string digits = opt.substr(prefix.size());
      require(digits.find_first_not_of("0123456789") == std::string::npos, "bad decode option '" + opt + "'");
      return std::stoi(digits);
    };
    if (c.strategy == Strategy::AR)
      c.beam = number("beam");
    else if (c.strategy == Strategy::FixedMask)
      c.fixed_len = number("len");
    else
      throw ContractViolation("strategy '" + to_string(c.strategy) + "' takes no option");
  }
  c.validate();
  return c;
}

namespace {

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

// Columns padded to their widest cell.
void aligned(std::ostream& out, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (width.size() <= c) width.push_back(0);
      width[c] = std::max(width[c], r[c].size());
    }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < rows[i].size(); ++c)
      out << (c ? "  " : "") << std::left << std::setw(static_cast<int>(width[c])) << rows[i][c];
    out << '\n';
    if (i == 0) {
      std::size_t total = 0;
      for (std::size_t w : width) total += w + 2;
      out << std::string(total - 2, '-') << '\n';
    }
  }
}

}  // namespace

void write_table1_csv(std::ostream& out, const std::vector<StrategyRow>& rows) {
  out << "label,train_strategy,decode,cer,rtf,mean_decoder_passes,mean_decoder_positions\n";
  for (const auto& r : rows)
    out << r.label << ',' << r.train_strategy << ',' << decode_label(r.decode) << ',' << fmt(r.cer, 6) << ','
        << fmt(r.rtf, 6) << ',' << fmt(r.mean_decoder_passes, 3) << ',' << fmt(r.mean_decoder_positions, 3) << '\n';
}

void write_table1_text(std::ostream& out, const std::vector<StrategyRow>& rows, const std::string& host) {
  out << "# host: " << host << '\n';
  std::vector<std::vector<std::string>> cells{{"system", "training", "decode", "CER(%)", "RTF", "passes"}};
  for (const auto& r : rows)
    cells.push_back({r.label, r.train_strategy, decode_label(r.decode), fmt(100.0 * r.cer, 2), fmt(r.rtf, 4),
                     fmt(r.mean_decoder_passes, 2)});
  aligned(out, cells);
}

void write_fig2_csv(std::ostream& out, const std::vector<RobustnessRow>& rows) {
  out << "strategy,cer_with_gt_input,cer_with_ctc_input,gap,gap_nonnegative\n";
  for (const auto& r : rows)
    out << r.label << ',' << fmt(r.cer_with_gt_input, 6) << ',' << fmt(r.cer_with_ctc_input, 6) << ','
        << fmt(r.gap(), 6) << ',' << (r.gap_nonnegative() ? "true" : "false") << '\n';
}

void write_fig2_text(std::ostream& out, const std::vector<RobustnessRow>& rows) {
  std::vector<std::vector<std::string>> cells{{"strategy", "CER gt input(%)", "CER ctc input(%)", "gap", "note"}};
  for (const auto& r : rows)
    cells.push_back({r.label, fmt(100.0 * r.cer_with_gt_input, 2), fmt(100.0 * r.cer_with_ctc_input, 2),
                     fmt(100.0 * r.gap(), 2), r.gap_nonnegative() ? "" : "warning: negative gap"});
  aligned(out, cells);
}

void write_fig3_csv(std::ostream& out, const LengthHistogram& h) {
  out << "t_minus_t_pred,count\n";
  for (const auto& [diff, c] : h.counts) out << diff << ',' << c << '\n';
}

void write_fig3_text(std::ostream& out, const LengthHistogram& h) {
  std::vector<std::vector<std::string>> cells{{"T-T'", "count", "share"}};
  for (const auto& [diff, c] : h.counts)
    cells.push_back({std::to_string(diff), std::to_string(c), fmt(static_cast<double>(c) / h.total, 4)});
  aligned(out, cells);
  out << "exact: " << fmt(h.exact_rate(), 4) << "  <=0: " << fmt(h.nonpositive_mass(), 4)
      << "  |diff|<=2: " << fmt(h.within(2), 4) << "  total: " << h.total << '\n';
}

void write_table3_csv(std::ostream& out, const CtcVsDecoder& r) {
  out << "source,cer\nctc_greedy," << fmt(r.cer_ctc_greedy, 6) << "\ndecoder," << fmt(r.cer_decoder, 6) << '\n';
}

void write_table3_text(std::ostream& out, const CtcVsDecoder& r) {
  aligned(out, {{"prediction", "CER(%)"},
                {"CTC greedy", fmt(100.0 * r.cer_ctc_greedy, 2)},
                {"NAR decoder", fmt(100.0 * r.cer_decoder, 2)}});
}

}  // namespace ctcnar
