// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "ctcnar/train.hpp"

using namespace ctcnar;

namespace {

CtcGreedyResult hyp(std::vector<int> tokens) {
  CtcGreedyResult r;
  r.tokens = std::move(tokens);
  r.confidences.assign(r.tokens.size(), 0.9);
  for (std::size_t i = 0; i < r.tokens.size(); ++i) r.spike_frames.push_back(static_cast<int>(2 * i));
  return r;
}

TrainStrategy strategy(TrainKind k) {
  TrainStrategy s;
  s.kind = k;
  return s;
}

CorpusConfig tiny_corpus() {
  CorpusConfig c;
  c.n_train = 2;
  c.n_test = 0;
  c.min_len = 3;
  c.max_len = 4;
  c.feat_dim = 8;
  c.content_tokens = 6;
  return c;
}

ModelConfig tiny_model(const CorpusConfig& c, int layers) {
  ModelConfig m;
  m.d_model = 16;
  m.n_heads = 2;
  m.d_ff = 32;
  m.encoder_layers = layers;
  m.decoder_layers = layers;
  m.vocab_size = c.vocab_size();
  m.feat_dim = c.feat_dim;
  return m;
}

const int a = 5, b = 6, c = 7, d = 8, e = 9;

}  // namespace

TEST_CASE("train kind names round trip") {
  for (TrainKind k : all_train_kinds()) CHECK(parse_train_kind(to_string(k)) == k);
  CHECK(parse_train_kind("teacher_forcing_cm") == TrainKind::TeacherForcingCM);
  CHECK_THROWS(parse_train_kind("teacher"));
  TrainStrategy s;
  s.length_tolerance = -1;
  CHECK_THROWS_AS(s.validate(), ContractViolation);
}

TEST_CASE("adjust pads with EOS or truncates") {
  CHECK(adjust_length({a, b, c, d, e}, 3) == std::vector<int>{a, b, c});
  CHECK(adjust_length({a}, 3) == std::vector<int>{a, kEos, kEos});
  CHECK(adjust_length({}, 2) == std::vector<int>{kEos, kEos});
  CHECK(adjust_length({a, b}, 2) == std::vector<int>{a, b});
}

TEST_CASE("decoder input table") {
  SUBCASE("teacher forcing") {
    const DecoderIO io = build_decoder_io(strategy(TrainKind::TeacherForcingCM), {a, b}, nullptr);
    CHECK(io.input == std::vector<int>{kSos, a, b});
    CHECK(io.target == std::vector<int>{a, b, kEos});
    CHECK(io.mask == MaskType::Causal);
    CHECK_FALSE(io.ctc_input);
  }
  SUBCASE("ctc sampling, causal") {
    const CtcGreedyResult h = hyp({a, b, c, d, e});
    const DecoderIO io = build_decoder_io(strategy(TrainKind::CtcSamplingCM), {a, b, c}, &h);
    CHECK(io.ctc_input);
    CHECK(io.input == std::vector<int>{kSos, a, b, c});
    CHECK(io.target == std::vector<int>{a, b, c, kEos});
    const CtcGreedyResult far = hyp({a, b, c, d, e, a});
    const DecoderIO gt = build_decoder_io(strategy(TrainKind::CtcSamplingCM), {a, b, c}, &far);
    CHECK_FALSE(gt.ctc_input);
    CHECK(gt.input == std::vector<int>{kSos, a, b, c});
    const CtcGreedyResult shorter = hyp({e});
    const DecoderIO pad = build_decoder_io(strategy(TrainKind::CtcSamplingCM), {a, b, c}, &shorter);
    CHECK(pad.input == std::vector<int>{kSos, e, kEos, kEos});
  }
  SUBCASE("ctc sampling, padding mask") {
    const CtcGreedyResult h = hyp({d, b});
    const DecoderIO io = build_decoder_io(strategy(TrainKind::CtcSamplingPM), {a, b, c}, &h);
    CHECK(io.input == std::vector<int>{d, b, kEos});
    CHECK(io.target == std::vector<int>{a, b, c});
    CHECK(io.mask == MaskType::Padding);
  }
  SUBCASE("mask forcing") {
    const DecoderIO io = build_decoder_io(strategy(TrainKind::MaskForcingPM), {a, b}, nullptr);
    CHECK(io.input == std::vector<int>{kMask, kMask});
    CHECK(io.target == std::vector<int>{a, b});
    CHECK(io.mask == MaskType::Padding);
  }
  SUBCASE("mask predict hides at least one token and scores only hidden ones") {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 50; ++i) {
      const std::vector<int> y{a, b, c, d, e};
      const DecoderIO io = build_decoder_io(strategy(TrainKind::MaskPredictPM), y, nullptr, 0, &rng);
      int hidden = 0;
      for (std::size_t t = 0; t < y.size(); ++t) {
        if (io.input[t] == kMask) {
          ++hidden;
          CHECK(io.target[t] == y[t]);
        } else {
          CHECK(io.input[t] == y[t]);
          CHECK(io.target[t] == kPad);
        }
      }
      CHECK(hidden >= 1);
    }
  }
  SUBCASE("spike copy uses the spikes or spreads positions evenly") {
    const CtcGreedyResult h = hyp({a, c});
    const DecoderIO io = build_decoder_io(strategy(TrainKind::SpikeCopyPM), {a, b, c}, &h, 10);
    CHECK(io.copy_frames == std::vector<int>{0, 2});
    CHECK(io.target == std::vector<int>{a, b});
    TrainStrategy warmup = strategy(TrainKind::SpikeCopyPM);
    warmup.sampling_enabled = false;
    const DecoderIO even = build_decoder_io(warmup, {a, b}, nullptr, 8);
    CHECK(even.copy_frames == std::vector<int>{2, 6});
  }
  SUBCASE("fixed mask") {
    TrainStrategy s = strategy(TrainKind::FixedMaskPM);
    s.fixed_len = 4;
    const DecoderIO io = build_decoder_io(s, {a, b}, nullptr);
    CHECK(io.input == std::vector<int>(4, kMask));
    CHECK(io.target == std::vector<int>{a, b, kEos, kPad});
  }
  CHECK_THROWS_AS(build_decoder_io(strategy(TrainKind::CtcSamplingCM), {a}, nullptr), ContractViolation);
  CHECK_THROWS_AS(build_decoder_io(strategy(TrainKind::TeacherForcingCM), {}, nullptr), ContractViolation);
}

TEST_CASE("decoder io shapes over random lengths") {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> len(1, 15), tok(a, 24);
  for (int i = 0; i < 500; ++i) {
    std::vector<int> y(len(rng)), yh(len(rng) - 1);
    for (auto& v : y) v = tok(rng);
    for (auto& v : yh) v = tok(rng);
    const CtcGreedyResult h = hyp(yh);
    const int T = static_cast<int>(y.size()), Tp = h.length();
    const bool gate = std::abs(T - Tp) <= 2;
    for (TrainKind k : {TrainKind::TeacherForcingCM, TrainKind::CtcSamplingCM, TrainKind::CtcSamplingPM,
                        TrainKind::MaskForcingPM}) {
      const DecoderIO io = build_decoder_io(strategy(k), y, &h);
      const bool causal = k == TrainKind::TeacherForcingCM || k == TrainKind::CtcSamplingCM;
      CHECK(io.input.size() == static_cast<std::size_t>(T + (causal ? 1 : 0)));
      CHECK(io.target.size() == io.input.size());
      CHECK(io.mask == (causal ? MaskType::Causal : MaskType::Padding));
      const bool sampling = k == TrainKind::CtcSamplingCM || k == TrainKind::CtcSamplingPM;
      CHECK(io.ctc_input == (sampling && gate));
    }
  }
}

TEST_CASE("sampling disabled falls back to ground truth") {
  TrainStrategy s = strategy(TrainKind::CtcSamplingCM);
  s.sampling_enabled = false;
  const DecoderIO io = build_decoder_io(s, {a, b}, nullptr);
  CHECK(io.input == std::vector<int>{kSos, a, b});
  CHECK_FALSE(io.ctc_input);
}

TEST_CASE("noam schedule") {
  OptimizerConfig c;
  c.peak_lr = 1e-3;
  c.warmup_steps = 100;
  CHECK(noam_lr(c, 1) == doctest::Approx(1e-5));
  CHECK(noam_lr(c, 50) == doctest::Approx(5e-4));
  CHECK(noam_lr(c, 100) == doctest::Approx(1e-3));
  CHECK(noam_lr(c, 400) == doctest::Approx(5e-4));
  CHECK_THROWS_AS(noam_lr(c, 0), ContractViolation);
}

TEST_CASE("joint loss decomposes by the ctc weight") {
  const CorpusConfig cc = tiny_corpus();
  const Corpus corpus = generate_corpus(cc);
  const Batch batch = make_batches(corpus.train, 2, false)[0];
  for (float lambda : {0.0f, 0.3f, 1.0f}) {
    ModelConfig mc = tiny_model(cc, 1);
    mc.ctc_weight = lambda;
    const Model<float> model(mc, 4);
    for (TrainKind k : {TrainKind::TeacherForcingCM, TrainKind::MaskForcingPM}) {
      Tape<float> tape;
      std::mt19937_64 rng(1);
      const JointLoss l = joint_loss(tape, model, batch, strategy(k), LossOptions{0.1f, false}, rng);
      const double want = lambda * l.ctc + (1.0 - lambda) * l.att;
      CHECK(l.joint == doctest::Approx(want).epsilon(1e-6));
      CHECK(l.loss.value()[0] == doctest::Approx(want).epsilon(1e-5));
      if (lambda == 0.0f) CHECK(l.joint == l.att);
      if (lambda == 1.0f) CHECK(l.joint == l.ctc);
      CHECK(l.utterances == 2);
    }
  }
}

TEST_CASE("double joint loss gradient agrees with central differences") {
  const CorpusConfig cc = tiny_corpus();
  const Corpus corpus = generate_corpus(cc);
  const Batch batch = make_batches(corpus.train, 2, false)[0];
  const Model<double> model(tiny_model(cc, 1), 3);
  auto params = model.parameters();
  std::vector<Parameter<double>*> some;
  for (std::size_t i = 0; i < params.size(); i += 5) some.push_back(params[i]);
  for (TrainKind k : {TrainKind::TeacherForcingCM, TrainKind::CtcSamplingPM, TrainKind::SpikeCopyPM}) {
    TrainStrategy s = strategy(k);
    const double err =
        finite_diff_check([&](Tape<double>& t) { return joint_loss(t, model, batch, s, 0.1f); }, some, 1e-5);
    CHECK_MESSAGE(err < 1e-4, to_string(k));
  }
}

TEST_CASE("training is bitwise deterministic and reduces the loss") {
  CorpusConfig cc = tiny_corpus();
  cc.n_train = 16;
  const Corpus corpus = generate_corpus(cc);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 8;
  tc.sampling_start_epoch = 1;
  tc.strategy.kind = TrainKind::CtcSamplingCM;
  tc.optimizer.warmup_steps = 4;
  auto run = [&](std::ostringstream& log) {
    Model<float> model(tiny_model(cc, 1), 5);
    TrainHooks hooks;
    hooks.csv_log = &log;
    const auto epochs = train_model(model, corpus.train, tc, hooks);
    return std::make_pair(std::move(model), epochs);
  };
  std::ostringstream log1, log2;
  auto [m1, e1] = run(log1);
  auto [m2, e2] = run(log2);
  CHECK(log1.str() == log2.str());
  const auto p1 = m1.parameters(), p2 = m2.parameters();
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i]->value == p2[i]->value);
  REQUIRE(e1.size() == 3);
  CHECK(e1.back().loss < e1.front().loss);
  const std::string text = log1.str();
  CHECK(text.rfind(kTrainLogHeader, 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 3 * 2);
}

TEST_CASE("a zero learning rate step counts the step and leaves weights unchanged") {
  const CorpusConfig cc = tiny_corpus();
  const Corpus corpus = generate_corpus(cc);
  const Batch batch = make_batches(corpus.train, 2, false)[0];
  Model<float> model(tiny_model(cc, 1), 6);
  const auto before = model.parameters();
  std::vector<Tensor<float>> snapshot;
  for (auto* p : before) snapshot.push_back(p->value);
  TrainState state;
  OptimizerConfig opt;
  opt.peak_lr = 0.0;
  std::mt19937_64 rng(2);
  const StepStats st = train_step(state, model, batch, strategy(TrainKind::TeacherForcingCM), opt, {}, rng);
  CHECK(state.step == 1);
  CHECK(st.lr == 0.0);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i]->value == snapshot[i]);
}
