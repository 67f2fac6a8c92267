// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctcnar/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <ostream>

#include "ctcnar/random.hpp"

namespace ctcnar {

namespace {

struct KindName {
  TrainKind kind;
  const char* name;
};

constexpr KindName kKindNames[] = {
    {TrainKind::TeacherForcingCM, "teacher_forcing_cm"}, {TrainKind::CtcSamplingCM, "ctc_sampling_cm"},
    {TrainKind::CtcSamplingPM, "ctc_sampling_pm"},       {TrainKind::MaskForcingPM, "mask_forcing_pm"},
    {TrainKind::MaskPredictPM, "mask_predict_pm"},       {TrainKind::SpikeCopyPM, "spike_copy_pm"},
    {TrainKind::FixedMaskPM, "fixed_mask_pm"},
};

bool uses_ctc(TrainKind k) {
  return k == TrainKind::CtcSamplingCM || k == TrainKind::CtcSamplingPM || k == TrainKind::SpikeCopyPM;
}

}  // namespace

std::string to_string(TrainKind k) {
  for (const auto& e : kKindNames)
    if (e.kind == k) return e.name;
  throw ContractViolation("unknown training strategy");
}

TrainKind parse_train_kind(const std::string& s) {
  for (const auto& e : kKindNames)
    if (s == e.name) return e.kind;
  throw ContractViolation("unknown training strategy '" + s + "'");
}

const std::vector<TrainKind>& all_train_kinds() {
  static const std::vector<TrainKind> kinds = [] {
    std::vector<TrainKind> out;
    for (const auto& e : kKindNames) out.push_back(e.kind);
    return out;
  }();
  return kinds;
}

void TrainStrategy::validate() const {
  require(length_tolerance >= 0, "length_tolerance must be >= 0");
  require(fixed_len >= 1, "fixed_len must be >= 1");
}

std::vector<int> adjust_length(const std::vector<int>& hyp, int length) {
  require(length >= 0, "negative target length");
  std::vector<int> out(hyp.begin(), hyp.begin() + std::min<std::size_t>(hyp.size(), length));
  out.resize(length, kEos);
  return out;
}

DecoderIO build_decoder_io(const TrainStrategy& s, const std::vector<int>& y, const CtcGreedyResult* ctc,
                           int encoder_frames, std::mt19937_64* rng) {
  s.validate();
  const int T = static_cast<int>(y.size());
  require(T >= 1, "target must be non-empty");
  const bool want_ctc = uses_ctc(s.kind) && s.sampling_enabled;
  require(!want_ctc || ctc != nullptr, "strategy " + to_string(s.kind) + " needs a CTC result");
  const bool gate = want_ctc && std::abs(T - ctc->length()) <= s.length_tolerance;

  DecoderIO io;
  switch (s.kind) {
    case TrainKind::TeacherForcingCM:
    case TrainKind::CtcSamplingCM:
      io.input.push_back(kSos);
      if (gate) {
        const auto adj = adjust_length(ctc->tokens, T);
        io.input.insert(io.input.end(), adj.begin(), adj.end());
        io.ctc_input = true;
      } else {
        io.input.insert(io.input.end(), y.begin(), y.end());
      }
      io.target = y;
      io.target.push_back(kEos);
      io.mask = MaskType::Causal;
      break;
    case TrainKind::CtcSamplingPM:
      io.input = gate ? adjust_length(ctc->tokens, T) : y;
      io.ctc_input = gate;
      io.target = y;
      io.mask = MaskType::Padding;
      break;
    case TrainKind::MaskForcingPM:
      io.input.assign(T, kMask);
      io.target = y;
      io.mask = MaskType::Padding;
      break;
    case TrainKind::MaskPredictPM: {
      require(rng != nullptr, "mask_predict_pm needs an rng");
      std::vector<int> pos(T);
      std::iota(pos.begin(), pos.end(), 0);
      shuffle(pos, *rng);
      const int n = uniform_int(*rng, 1, T);
      io.input = y;
      io.target.assign(T, kPad);
      for (int i = 0; i < n; ++i) {
        io.input[pos[i]] = kMask;
        io.target[pos[i]] = y[pos[i]];
      }
      io.mask = MaskType::Padding;
      break;
    }
    case TrainKind::SpikeCopyPM: {
      require(encoder_frames >= 1, "spike_copy_pm needs the encoder frame count");
      if (gate && ctc->length() >= 1) {
        io.copy_frames = ctc->spike_frames;
        io.target = adjust_length(y, ctc->length());
        io.ctc_input = true;
      } else {
        for (int i = 0; i < T; ++i)
          io.copy_frames.push_back(std::min(encoder_frames - 1, static_cast<int>((2LL * i + 1) * encoder_frames / (2LL * T))));
        io.target = y;
      }
      io.input.assign(io.copy_frames.size(), kMask);
      io.mask = MaskType::Padding;
      break;
    }
    case TrainKind::FixedMaskPM:
      io.input.assign(s.fixed_len, kMask);
      io.target = y;
      io.target.push_back(kEos);
      io.target.resize(s.fixed_len, kPad);
      io.mask = MaskType::Padding;
      break;
  }
  return io;
}

// ---------------------------------------------------------------------------
// Joint objective

namespace {

template <typename T>
struct JointParts {
  Var<T> loss;
  double ctc = 0.0, att = 0.0, joint = 0.0;
  int ctc_inputs = 0;
  bool skip = false;
};

template <typename T>
JointParts<T> joint_impl(Tape<T>& tape, const Model<T>& model, const Batch& batch, const TrainStrategy& s,
                         float smoothing, const ForwardOptions& fo, std::mt19937_64& rng) {
  require(batch.size() >= 1, "empty batch");
  const Tensor<T>* features;
  if constexpr (std::is_same_v<T, float>) {
    features = &batch.features;
  } else {
    features = &tape.constant(batch.features.template cast<T>()).value();
  }
  EncodedVar<T> enc = model.encode(tape, *features, batch.feature_lengths, fo);
  Var<T> lp = model.ctc_head(tape, enc);
  int feasible = 0;
  Var<T> ctc = ctc_loss(lp, enc.lengths, batch.targets, &feasible);

  JointParts<T> out;
  if (feasible == 0) {
    out.skip = true;
    out.loss = ctc;
    return out;
  }

  std::vector<CtcGreedyResult> greedy;
  if (uses_ctc(s.kind) && s.sampling_enabled) greedy = ctc_greedy(lp.value(), enc.lengths);

  const int B = batch.size();
  std::vector<DecoderIO> ios;
  int len = 0;
  for (int b = 0; b < B; ++b) {
    ios.push_back(build_decoder_io(s, batch.targets[b], greedy.empty() ? nullptr : &greedy[b], enc.lengths[b], &rng));
    require(ios.back().input.size() == ios.back().target.size(), "decoder input/target length mismatch");
    out.ctc_inputs += ios.back().ctc_input;
    len = std::max(len, static_cast<int>(ios.back().input.size()));
  }

  Var<T> dec;
  const MaskType mask = ios.front().mask;
  if (s.kind == TrainKind::SpikeCopyPM) {
    const int frames = enc.states.dim(1), d = enc.states.dim(2);
    std::vector<int> rows(static_cast<std::size_t>(B) * len), lengths(B);
    for (int b = 0; b < B; ++b) {
      lengths[b] = static_cast<int>(ios[b].copy_frames.size());
      for (int t = 0; t < len; ++t)
        rows[static_cast<std::size_t>(b) * len + t] = b * frames + (t < lengths[b] ? ios[b].copy_frames[t] : 0);
    }
    Var<T> copied = reshape(gather_rows(enc.states, rows), Shape{B, len, d});
    dec = model.decode_inputs(tape, copied, lengths, mask, enc, fo);
  } else {
    std::vector<std::vector<int>> inputs;
    for (const auto& io : ios) inputs.push_back(io.input);
    dec = model.decode_tokens(tape, inputs, mask, enc, fo);
  }

  std::vector<int> grid(static_cast<std::size_t>(B) * len, kPad);
  for (int b = 0; b < B; ++b) std::copy(ios[b].target.begin(), ios[b].target.end(), grid.begin() + b * len);
  Var<T> att = label_smoothed_nll(dec, grid, static_cast<T>(smoothing), kPad);

  const T lambda = static_cast<T>(model.config().ctc_weight);
  out.loss = add(scale(ctc, lambda), scale(att, T(1) - lambda));
  out.ctc = ctc.value()[0];
  out.att = att.value()[0];
  out.joint = out.loss.value()[0];
  return out;
}

}  // namespace

JointLoss joint_loss(Tape<float>& tape, const Model<float>& model, const Batch& batch, const TrainStrategy& strategy,
                     const LossOptions& options, std::mt19937_64& rng) {
  ForwardOptions fo{options.train, &rng};
  JointParts<float> p = joint_impl(tape, model, batch, strategy, options.label_smoothing, fo, rng);
  JointLoss out;
  out.loss = p.loss;
  out.ctc = p.ctc;
  out.att = p.att;
  out.joint = p.joint;
  out.ctc_inputs = p.ctc_inputs;
  out.utterances = batch.size();
  out.skip = p.skip;
  return out;
}

Var<double> joint_loss(Tape<double>& tape, const Model<double>& model, const Batch& batch,
                       const TrainStrategy& strategy, float label_smoothing) {
  std::mt19937_64 rng(0);
  return joint_impl(tape, model, batch, strategy, label_smoothing, ForwardOptions{}, rng).loss;
}

// ---------------------------------------------------------------------------
// Optimisation

double noam_lr(const OptimizerConfig& c, int step) {
  require(step >= 1, "lr schedule starts at step 1");
  const double s = step, w = c.warmup_steps;
  return c.peak_lr * std::min(s / w, std::sqrt(w / s));
}

StepStats train_step(TrainState& state, Model<float>& model, const Batch& batch, const TrainStrategy& strategy,
                     const OptimizerConfig& opt, const LossOptions& loss_opts, std::mt19937_64& rng) {
  const auto params = model.parameters();
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  for (auto* p : params) p->zero_grad();

  Tape<float> tape;
  JointLoss jl = joint_loss(tape, model, batch, strategy, loss_opts, rng);
  StepStats stats;
  if (jl.skip || !std::isfinite(jl.joint)) {
    ++state.skipped_steps;
    stats.skipped = true;
    return stats;
  }
  tape.backward(jl.loss);

  double sq = 0.0;
  for (auto* p : params)
    for (float g : p->grad.data()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  const double clip = norm > opt.clip_norm ? opt.clip_norm / norm : 1.0;

  ++state.step;
  const double lr = noam_lr(opt, state.step);
  const double bc1 = 1.0 - std::pow(opt.beta1, state.step);
  const double bc2 = 1.0 - std::pow(opt.beta2, state.step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    float* w = params[i]->value.ptr();
    const float* g = params[i]->grad.ptr();
    float* m = state.m[i].ptr();
    float* v = state.v[i].ptr();
    for (std::size_t j = 0; j < params[i]->value.size(); ++j) {
      const double gj = g[j] * clip;
      m[j] = static_cast<float>(opt.beta1 * m[j] + (1.0 - opt.beta1) * gj);
      v[j] = static_cast<float>(opt.beta2 * v[j] + (1.0 - opt.beta2) * gj * gj);
      w[j] -= static_cast<float>(lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opt.eps));
    }
  }
  state.last_loss = jl.joint;
  state.last_ctc = jl.ctc;
  state.last_att = jl.att;

  stats.lr = lr;
  stats.loss = jl.joint;
  stats.ctc = jl.ctc;
  stats.att = jl.att;
  stats.ctc_input_ratio = static_cast<double>(jl.ctc_inputs) / jl.utterances;
  stats.grad_norm = norm;
  return stats;
}

void TrainConfig::validate() const {
  strategy.validate();
  require(epochs >= 1, "epochs must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(label_smoothing >= 0.0f && label_smoothing < 1.0f, "label_smoothing must lie in [0, 1)");
  require(sampling_start_epoch >= 0, "sampling_start_epoch must be >= 0");
  require(optimizer.warmup_steps >= 1 && optimizer.peak_lr > 0.0, "invalid learning-rate schedule");
}

std::vector<EpochSummary> train_model(Model<float>& model, const std::vector<Utterance>& train_set,
                                      const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  require(!train_set.empty(), "empty training set");
  std::mt19937_64 rng(config.seed);

  // Length-sorted buckets keep padding low; bucket order is reshuffled every epoch.
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return train_set[a].frames() < train_set[b].frames(); });
  std::vector<std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < order.size(); i += config.batch_size)
    buckets.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + config.batch_size));

  if (hooks.csv_log) *hooks.csv_log << kTrainLogHeader << '\n';
  TrainState state;
  LossOptions loss_opts{config.label_smoothing, true};
  std::vector<EpochSummary> summaries;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    TrainStrategy strategy = config.strategy;
    strategy.sampling_enabled = epoch >= config.sampling_start_epoch;
    shuffle(buckets, rng);

    EpochSummary sum;
    sum.epoch = epoch + 1;
    int steps = 0;
    for (const auto& bucket : buckets) {
      std::vector<Utterance> augmented;
      augmented.reserve(bucket.size());
      for (std::size_t idx : bucket) {
        Utterance u = train_set[idx];
        if (config.spec_augment && u.frames() > config.augment.time_width &&
            u.features.dim(1) > config.augment.feat_width)
          u.features = ctcnar::spec_augment(u.features, config.augment, rng);
        augmented.push_back(std::move(u));
      }
      std::vector<const Utterance*> ptrs;
      for (const auto& u : augmented) ptrs.push_back(&u);
      const Batch batch = make_batch(ptrs);

      const StepStats st = train_step(state, model, batch, strategy, config.optimizer, loss_opts, rng);
      if (st.skipped) continue;
      ++steps;
      sum.loss += st.loss;
      sum.ctc += st.ctc;
      sum.att += st.att;
      sum.ctc_input_ratio += st.ctc_input_ratio;
      if (hooks.csv_log)
        *hooks.csv_log << state.step << ',' << st.lr << ',' << st.loss << ',' << st.ctc << ',' << st.att << ','
                       << st.ctc_input_ratio << '\n';
    }
    if (steps) {
      sum.loss /= steps;
      sum.ctc /= steps;
      sum.att /= steps;
      sum.ctc_input_ratio /= steps;
    }
    sum.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    summaries.push_back(sum);
    if (hooks.on_epoch) hooks.on_epoch(sum, model);
  }
  return summaries;
}

}  // namespace ctcnar
