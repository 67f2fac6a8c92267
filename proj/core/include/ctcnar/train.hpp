// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ctcnar/ctc.hpp"
#include "ctcnar/data.hpp"
#include "ctcnar/model.hpp"

namespace ctcnar {

/// Decoder-input regimes. The last three train the non-autoregressive baselines.
enum class TrainKind {
  TeacherForcingCM,
  CtcSamplingCM,
  CtcSamplingPM,
  MaskForcingPM,
  MaskPredictPM,
  SpikeCopyPM,
  FixedMaskPM,
};

std::string to_string(TrainKind k);
/// Accepts the snake_case names, e.g. "teacher_forcing_cm".
TrainKind parse_train_kind(const std::string& s);
const std::vector<TrainKind>& all_train_kinds();

struct TrainStrategy {
  TrainKind kind = TrainKind::TeacherForcingCM;
  /// CTC input is used when |T - T'| <= length_tolerance.
  int length_tolerance = 2;
  /// Off during the CTC warm-up epochs; sampling kinds then fall back to ground truth.
  bool sampling_enabled = true;
  /// Decoder length for FixedMaskPM.
  int fixed_len = 24;

  void validate() const;
};

/// Decoder input and target for one utterance.
struct DecoderIO {
  std::vector<int> input;
  std::vector<int> target;  // kPad entries are ignored by the loss
  MaskType mask = MaskType::Causal;
  bool ctc_input = false;
  /// SpikeCopyPM: encoder frames whose states replace the input embeddings.
  std::vector<int> copy_frames;
};

/// Truncates `hyp` to `length` or pads it with EOS.
std::vector<int> adjust_length(const std::vector<int>& hyp, int length);

/// `ctc` is required for the sampling and spike-copy kinds, `rng` for MaskPredictPM.
DecoderIO build_decoder_io(const TrainStrategy& strategy, const std::vector<int>& target, const CtcGreedyResult* ctc,
                           int encoder_frames = 0, std::mt19937_64* rng = nullptr);

struct JointLoss {
  Var<float> loss;
  double ctc = 0.0;
  double att = 0.0;
  double joint = 0.0;
  int ctc_inputs = 0;  // utterances whose decoder input came from CTC
  int utterances = 0;
  bool skip = false;   // every utterance was CTC-infeasible
};

struct LossOptions {
  float label_smoothing = 0.1f;
  bool train = true;
};

/// lambda * L_ctc + (1 - lambda) * L_att on one batch, recorded on `tape`.
JointLoss joint_loss(Tape<float>& tape, const Model<float>& model, const Batch& batch, const TrainStrategy& strategy,
                     const LossOptions& options, std::mt19937_64& rng);

/// Same objective in double precision, for gradient checks.
Var<double> joint_loss(Tape<double>& tape, const Model<double>& model, const Batch& batch,
                       const TrainStrategy& strategy, float label_smoothing);

struct OptimizerConfig {
  double peak_lr = 3e-3;
  int warmup_steps = 600;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double clip_norm = 5.0;
};

/// Noam-shaped schedule: linear warm-up to peak_lr, then inverse square-root decay.
double noam_lr(const OptimizerConfig& c, int step);

struct TrainState {
  int step = 0;
  int skipped_steps = 0;
  std::vector<Tensor<float>> m, v;
  double last_loss = 0.0, last_ctc = 0.0, last_att = 0.0;
};

struct StepStats {
  double lr = 0.0;
  double loss = 0.0, ctc = 0.0, att = 0.0;
  double ctc_input_ratio = 0.0;
  double grad_norm = 0.0;
  bool skipped = false;
};

StepStats train_step(TrainState& state, Model<float>& model, const Batch& batch, const TrainStrategy& strategy,
                     const OptimizerConfig& opt, const LossOptions& loss_opts, std::mt19937_64& rng);

struct TrainConfig {
  TrainStrategy strategy;
  OptimizerConfig optimizer;
  int epochs = 40;
  int batch_size = 16;
  float label_smoothing = 0.1f;
  int sampling_start_epoch = 5;
  bool spec_augment = true;
  SpecAugmentConfig augment;
  std::uint64_t seed = 7;

  void validate() const;
};

struct EpochSummary {
  int epoch = 0;
  double loss = 0.0, ctc = 0.0, att = 0.0;
  double ctc_input_ratio = 0.0;
  double seconds = 0.0;
};

struct TrainHooks {
  std::ostream* csv_log = nullptr;  // per-step rows
  std::function<void(const EpochSummary&, const Model<float>&)> on_epoch;
};

/// Full training run. Deterministic for a fixed config and corpus.
std::vector<EpochSummary> train_model(Model<float>& model, const std::vector<Utterance>& train_set,
                                      const TrainConfig& config, const TrainHooks& hooks = {});

inline constexpr const char* kTrainLogHeader = "step,lr,loss,ctc_loss,att_loss,ctc_input_ratio";

}  // namespace ctcnar
