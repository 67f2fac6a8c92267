// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ctcnar/decode.hpp"
#include "ctcnar/train.hpp"

namespace ctcnar {

/// Unit-cost Levenshtein distance.
int edit_distance(const std::vector<int>& a, const std::vector<int>& b);
/// edit_distance(hyp, ref) / |ref|; ref must be non-empty.
double cer(const std::vector<int>& hyp, const std::vector<int>& ref);
double rtf(double decode_seconds, double audio_seconds);

/// Decode parallelism from NAR_THREADS (default 1).
int decode_threads();

struct EvalOptions {
  int batch_size = 8;
  /// First batch is decoded once untimed before the measured pass.
  bool warmup = true;
  int threads = 0;  // 0: decode_threads()
};

struct EvalRun {
  std::vector<DecodeResult> results;  // test-set order
  long long edits = 0;
  long long ref_tokens = 0;
  double wall_time = 0.0;
  double audio_seconds = 0.0;

  double cer() const { return ref_tokens ? static_cast<double>(edits) / ref_tokens : 0.0; }
  double rtf() const { return ctcnar::rtf(wall_time, audio_seconds); }
  double mean_decoder_passes() const;
};

EvalRun evaluate(const Model<float>& model, const std::vector<Utterance>& test, const DecodeConfig& config,
                 const EvalOptions& options = {});

// -- strategy table ----------------------------------------------------------

struct StrategyRow {
  std::string label;
  std::string train_strategy;
  DecodeConfig decode;
  double cer = 0.0;
  double rtf = 0.0;
  double mean_decoder_passes = 0.0;
  double mean_decoder_positions = 0.0;
};

struct TableEntry {
  std::string label;
  std::string checkpoint;  // path
  DecodeConfig decode;
};

/// One row per entry; entries whose checkpoint cannot be loaded are skipped with a warning.
std::vector<StrategyRow> run_strategy_table(const std::vector<TableEntry>& entries, const std::vector<Utterance>& test,
                                            const EvalOptions& options = {}, std::ostream* warnings = nullptr);

StrategyRow evaluate_row(const std::string& label, const Model<float>& model, const std::string& train_strategy,
                         const std::vector<Utterance>& test, const DecodeConfig& config, const EvalOptions& options = {});

// -- robustness to the decoder input -----------------------------------------

struct RobustnessRow {
  std::string label;
  double cer_with_gt_input = 0.0;
  double cer_with_ctc_input = 0.0;
  double gap() const { return cer_with_ctc_input - cer_with_gt_input; }
  /// Soft check: ground-truth input should not be worse.
  bool gap_nonnegative() const { return gap() >= 0.0; }
};

/// Replaces CTC tokens by the reference tokens they align to (match or substitution);
/// insertions keep the CTC token. Confidences are kept so the masking pattern is unchanged.
CtcGreedyResult ground_truth_for_mask_predict(const CtcGreedyResult& ctc, const std::vector<int>& ref);

/// Ground-truth decoder input: the reference itself, confidence 1.
CtcGreedyResult ground_truth_input(const std::vector<int>& ref);

RobustnessRow run_robustness(const std::string& label, const Model<float>& model, const std::vector<Utterance>& test,
                             const DecodeConfig& config, int batch_size = 8);

// -- length histogram --------------------------------------------------------

struct LengthHistogram {
  std::map<int, int> counts;  // (T - T') -> utterances
  int total = 0;

  double exact_rate() const;
  /// Mass at T - T' <= 0.
  double nonpositive_mass() const;
  double within(int tolerance) const;
};

LengthHistogram run_length_histogram(const Model<float>& model, const std::vector<Utterance>& test, int batch_size = 8);

// -- CTC vs decoder ----------------------------------------------------------

struct CtcVsDecoder {
  double cer_ctc_greedy = 0.0;
  double cer_decoder = 0.0;
};

CtcVsDecoder run_ctc_vs_decoder(const Model<float>& model, const std::vector<Utterance>& test,
                                const DecodeConfig& config, int batch_size = 8);

// -- Desk suite layout -------------------------------------------------------

/// Checkpoint file for a training kind inside a models directory: <dir>/<kind>.ckpt.
std::string checkpoint_path(const std::string& models_dir, TrainKind kind);

/// Training kinds the default reports read.
const std::vector<TrainKind>& suite_train_kinds();

/// Default strategy-table rows: every decoding strategy next to the model trained for it.
std::vector<TableEntry> default_table_entries(const std::string& models_dir);

struct RobustnessEntry {
  std::string label;
  std::string checkpoint;
  DecodeConfig decode;
};

/// teacher_forcing_cm/causal_refine, ctc_sampling_cm/causal_refine, ctc_sampling_pm/pm_refine, mask_predict_pm/mp_ctc.
std::vector<RobustnessEntry> default_robustness_entries(const std::string& models_dir);

/// Unloadable checkpoints are skipped with a warning.
std::vector<RobustnessRow> run_robustness_table(const std::vector<RobustnessEntry>& entries,
                                                const std::vector<Utterance>& test, int batch_size = 8,
                                                std::ostream* warnings = nullptr);

// -- Report output ------------------------------------------------------------

struct EvalReport {
  std::string host;
  std::vector<StrategyRow> strategy_rows;
  std::vector<RobustnessRow> robustness;
  std::optional<LengthHistogram> length_histogram;
  std::optional<CtcVsDecoder> ctc_vs_decoder;
};

/// Short host description for report headers.
std::string host_description();

void write_table1_csv(std::ostream& out, const std::vector<StrategyRow>& rows);
void write_table1_text(std::ostream& out, const std::vector<StrategyRow>& rows, const std::string& host);
void write_fig2_csv(std::ostream& out, const std::vector<RobustnessRow>& rows);
void write_fig2_text(std::ostream& out, const std::vector<RobustnessRow>& rows);
void write_fig3_csv(std::ostream& out, const LengthHistogram& h);
void write_fig3_text(std::ostream& out, const LengthHistogram& h);
void write_table3_csv(std::ostream& out, const CtcVsDecoder& r);
void write_table3_text(std::ostream& out, const CtcVsDecoder& r);

/// Label such as "ar:beam10" or "causal_refine".
std::string decode_label(const DecodeConfig& c);
/// Inverse of decode_label.
DecodeConfig parse_decode_label(const std::string& label);

}  // namespace ctcnar
