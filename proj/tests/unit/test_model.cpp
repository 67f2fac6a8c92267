// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "ctcnar/model.hpp"
#include "oracles.hpp"
#include "properties.hpp"

using namespace ctcnar;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.feat_dim = 8;
  return c;
}

void check_normalised(const Tensor<float>& lp) {
  const int v = lp.dim(lp.rank() - 1);
  for (std::size_t r = 0; r < lp.size() / v; ++r) {
    double s = 0.0;
    for (int k = 0; k < v; ++k) s += std::exp(static_cast<double>(lp[r * v + k]));
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
  }
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.n_heads = 5;
  CHECK_THROWS_AS(c.validate(), ContractViolation);
  c = ModelConfig{};
  c.vocab_size = 4;
  CHECK_THROWS_AS(c.validate(), ContractViolation);
  c = ModelConfig{};
  c.dropout = 1.0f;
  CHECK_THROWS_AS(c.validate(), ContractViolation);
  c = ModelConfig{};
  c.ctc_weight = 1.5f;
  CHECK_THROWS_AS(c.validate(), ContractViolation);
  CHECK(parse_mask_type(to_string(MaskType::Padding)) == MaskType::Padding);
  CHECK_THROWS(parse_mask_type("sideways"));
}

TEST_CASE("causal mask is lower triangular") {
  CHECK(build_causal_mask(1).allowed == std::vector<std::uint8_t>{1});
  for (int len = 1; len <= 64; ++len) {
    const AttentionMask m = build_causal_mask(len);
    REQUIRE(m.queries == len);
    REQUIRE(m.keys == len);
    for (int q = 0; q < len; ++q)
      for (int k = 0; k < len; ++k) CHECK(m.at(q, k) == (k <= q));
  }
}

TEST_CASE("padding mask blocks keys past each row length") {
  const auto full = build_padding_mask({3}, 3);
  for (auto v : full[0].allowed) CHECK(v == 1);
  const auto m = build_padding_mask({2, 4}, 4);
  for (int q = 0; q < 4; ++q) {
    CHECK(m[0].at(q, 1));
    CHECK_FALSE(m[0].at(q, 2));
    CHECK_FALSE(m[0].at(q, 3));
    CHECK(m[1].at(q, 3));
  }
  CHECK_THROWS_AS(build_padding_mask({0}, 3), ContractViolation);
  CHECK_THROWS_AS(build_padding_mask({4}, 3), ContractViolation);
}

TEST_CASE("encoder shapes and subsampling") {
  ModelConfig c = small_config();
  const Model<float> model(c, 1);
  std::mt19937_64 rng(2);
  const EncoderOutput<float> enc = model.encode(oracle::random_features(rng, 2, 16, 8), {16, 9});
  CHECK(enc.states.shape() == Shape{2, 4, 16});
  CHECK(enc.lengths == std::vector<int>{4, 3});
  const auto mask = enc.frame_mask();
  CHECK(std::count(mask.begin(), mask.begin() + 4, 1) == 4);
  CHECK(std::count(mask.begin() + 4, mask.end(), 1) == 3);
  CHECK(subsampled_length(1) == 1);
  CHECK(subsampled_length(5) == 2);
  CHECK_THROWS_AS(model.encode(oracle::random_features(rng, 1, 8, 8), {0}), ContractViolation);
  CHECK_THROWS_AS(model.encode(oracle::random_features(rng, 1, 8, 8), {9}), ContractViolation);

  const Tensor<float> ctc = model.ctc_head(enc);
  CHECK(ctc.shape() == Shape{2, 4, c.vocab_size});
  check_normalised(ctc);
}

TEST_CASE("duplicated utterances give identical rows and eval is reproducible") {
  const Model<float> model(small_config(), 3);
  std::mt19937_64 rng(4);
  const Tensor<float> one = oracle::random_features(rng, 1, 20, 8);
  Tensor<float> two(Shape{2, 20, 8});
  std::copy_n(one.ptr(), one.size(), two.ptr());
  std::copy_n(one.ptr(), one.size(), two.ptr() + one.size());
  const auto enc = model.encode(two, {20, 20});
  CHECK(std::memcmp(enc.states.ptr(), enc.states.ptr() + enc.states.size() / 2, enc.states.size() / 2 * 4) == 0);
  CHECK(model.encode(two, {20, 20}).states == enc.states);
}

TEST_CASE("decoder outputs are log distributions for both masks") {
  const Model<float> model(small_config(), 5);
  std::mt19937_64 rng(6);
  const auto enc = model.encode(oracle::random_features(rng, 2, 24, 8), {24, 17});
  for (MaskType m : {MaskType::Causal, MaskType::Padding}) {
    const Tensor<float> out = model.decoder_forward({{kSos, 5, 6, 7}, {kSos, 9}}, m, enc);
    CHECK(out.shape() == Shape{2, 4, 25});
    Tensor<float> first(Shape{1, 4, 25});
    std::copy_n(out.ptr(), 100, first.ptr());
    check_normalised(first);
  }
  // swapping two tokens under PM keeps shape and normalisation
  const Tensor<float> swapped = model.decoder_forward({{kSos, 7, 6, 5}, {kSos, 9}}, MaskType::Padding, enc);
  CHECK(swapped.shape() == Shape{2, 4, 25});
  CHECK_THROWS_AS(model.decoder_forward({{kSos, 25}}, MaskType::Causal, enc.row(0)), ContractViolation);
}

TEST_CASE("causal decoder ignores future tokens") {
  const Model<float> model(small_config(), 7);
  std::mt19937_64 rng(8);
  for (int i = 0; i < 100; ++i) {
    const std::string err = props::causality_case(model, rng);
    CHECK_MESSAGE(err.empty(), err);
  }
}

TEST_CASE("padding changes nothing at real positions") {
  const Model<float> model(small_config(), 9);
  std::mt19937_64 rng(10);
  for (int i = 0; i < 100; ++i) {
    const std::string err = props::padding_case(model, rng);
    CHECK_MESSAGE(err.empty(), err);
  }
}

TEST_CASE("single causal pass equals incremental stepping") {
  const Model<float> small(small_config(), 11);
  const Model<float> full(ModelConfig{}, 12);
  std::mt19937_64 rng(13);
  for (int i = 0; i < 30; ++i) {
    std::string err = props::incremental_case(small, rng);
    CHECK_MESSAGE(err.empty(), err);
    err = props::incremental_case(full, rng);
    CHECK_MESSAGE(err.empty(), err);
  }
}

TEST_CASE("cache reorder follows beam parents") {
  const Model<float> model(small_config(), 14);
  std::mt19937_64 rng(15);
  const auto enc = model.encode(oracle::random_features(rng, 1, 20, 8), {20});
  DecoderCache<float> cache = model.start_incremental(enc, {0, 0});
  model.step(cache, {kSos, kSos});
  model.step(cache, {5, 6});
  cache.reorder({1, 1});
  const Tensor<float> reordered = model.step(cache, {7, 7});
  const Tensor<float> direct = model.decoder_forward({{kSos, 6, 7}}, MaskType::Causal, enc);
  CHECK(props::max_abs_diff(reordered.ptr(), direct.ptr() + 2 * 25, 25) < 1e-5);
  CHECK(props::max_abs_diff(reordered.ptr() + 25, direct.ptr() + 2 * 25, 25) < 1e-5);
  CHECK(cache.length() == 3);
}

TEST_CASE("positional encoding values") {
  const Tensor<float> pe = positional_encoding<float>(3, 4);
  CHECK(pe[0] == doctest::Approx(0.0));
  CHECK(pe[1] == doctest::Approx(1.0));
  CHECK(pe[4] == doctest::Approx(std::sin(1.0)));
  CHECK(pe[5] == doctest::Approx(std::cos(1.0)));
  CHECK(pe[6] == doctest::Approx(std::sin(1.0 / 100.0)));
}

TEST_CASE("double conversion preserves outputs") {
  const Model<float> model(small_config(), 16);
  const Model<double> wide = model.converted<double>();
  CHECK(wide.parameter_count() == model.parameter_count());
  std::mt19937_64 rng(17);
  const Tensor<float> x = oracle::random_features(rng, 1, 12, 8);
  Tensor<double> xd(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) xd[i] = x[i];
  const auto a = model.ctc_head(model.encode(x, {12}));
  const auto b = wide.ctc_head(wide.encode(xd, {12}));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-4));
}

TEST_CASE("default model size") {
  const Model<float> model(ModelConfig{}, 1);
  CHECK(model.parameter_count() > 100000);
  CHECK(model.find("no.such.parameter") == nullptr);
}
