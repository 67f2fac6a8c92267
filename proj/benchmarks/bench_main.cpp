// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <cmath>
#include <random>

#include "ctcnar/ctc.hpp"
#include "ctcnar/data.hpp"
#include "ctcnar/decode.hpp"
#include "ctcnar/train.hpp"

using namespace ctcnar;

namespace {

const Corpus& corpus() {
  static const Corpus c = [] {
    CorpusConfig cc;
    cc.n_train = 64;
    cc.n_test = 64;
    return generate_corpus(cc);
  }();
  return c;
}

const Model<float>& model() {
  static const Model<float> m(ModelConfig{}, 11);
  return m;
}

Batch test_batch(int size) {
  const auto& test = corpus().test;
  return make_batches({test.begin(), test.begin() + size}, size, false)[0];
}

void BM_CtcLoss(benchmark::State& state) {
  const int frames = static_cast<int>(state.range(0)), vocab = 25;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  Tensor<double> lp(Shape{frames, vocab});
  for (int f = 0; f < frames; ++f) {
    double z = 0.0;
    for (int v = 0; v < vocab; ++v) z += std::exp(lp[f * vocab + v] = nd(rng));
    for (int v = 0; v < vocab; ++v) lp[f * vocab + v] -= std::log(z);
  }
  std::vector<int> target;
  for (int i = 0; i < frames / 4; ++i) target.push_back(kFirstContentId + i % 20);
  for (auto _ : state) benchmark::DoNotOptimize(ctc_loss_grad(lp, target));
}
BENCHMARK(BM_CtcLoss)->Arg(24)->Arg(96);

void BM_Encode(benchmark::State& state) {
  const Batch b = test_batch(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(model().encode(b.features, b.feature_lengths));
}
BENCHMARK(BM_Encode)->Arg(1)->Arg(8);

void BM_Decode(benchmark::State& state, DecodeConfig config) {
  const Batch b = test_batch(8);
  const EncoderOutput<float> enc = model().encode(b.features, b.feature_lengths);
  const Tensor<float> lp = model().ctc_head(enc);
  const auto ctc = ctc_greedy(lp, enc.lengths);
  // Untrained weights rarely emit EOS; cap AR at a typical target length.
  config.max_steps = 12;
  for (auto _ : state) benchmark::DoNotOptimize(decode_with(model(), enc, ctc, config));
}
BENCHMARK_CAPTURE(BM_Decode, ar_beam1, DecodeConfig{Strategy::AR, 1});
BENCHMARK_CAPTURE(BM_Decode, ar_beam10, DecodeConfig{Strategy::AR, 10});
BENCHMARK_CAPTURE(BM_Decode, causal_refine, DecodeConfig{Strategy::CausalRefine});
BENCHMARK_CAPTURE(BM_Decode, mask_len, DecodeConfig{Strategy::MaskLen});
BENCHMARK_CAPTURE(BM_Decode, mp_ctc, DecodeConfig{Strategy::MPCTC});

void BM_TrainStep(benchmark::State& state) {
  Model<float> m(ModelConfig{}, 5);
  const Batch b = make_batches(corpus().train, 16, false)[0];
  TrainState ts;
  TrainStrategy strategy;
  strategy.kind = static_cast<TrainKind>(state.range(0));
  strategy.sampling_enabled = false;
  std::mt19937_64 rng(1);
  for (auto _ : state) benchmark::DoNotOptimize(train_step(ts, m, b, strategy, {}, {}, rng));
}
BENCHMARK(BM_TrainStep)->Arg(static_cast<int>(TrainKind::TeacherForcingCM))->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
