// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "ctcnar/autograd.hpp"

using namespace ctcnar;

namespace {

Tensor<double> randn(std::mt19937_64& rng, Shape shape, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

// Scalar probe: sum(out * w) with fixed random weights, so every output entry matters.
Var<double> probe(Tape<double>& tape, Var<double> out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(out, tape.constant(randn(rng, out.shape()))));
}

constexpr double kH = 1e-6;
constexpr double kTol = 1e-7;

}  // namespace

TEST_CASE("tensor basics") {
  Tensor<float> t(Shape{2, 3});
  CHECK(t.size() == 6);
  t.at({1, 2}) = 5.0f;
  CHECK(t[5] == 5.0f);
  CHECK(t.reshaped({3, 2}).dim(0) == 3);
  CHECK_THROWS_AS(t.reshaped({4, 2}), ContractViolation);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 0}), ContractViolation);
  CHECK(t.all_finite());
  t[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
  CHECK(shape_str({2, 3}) == "[2, 3]");
}

TEST_CASE("log_sum_exp is stable") {
  const double big[] = {1000.0, 1000.0};
  CHECK(log_sum_exp(big) == doctest::Approx(1000.0 + std::log(2.0)));
  const double inf = std::numeric_limits<double>::infinity();
  const double none[] = {-inf, -inf};
  CHECK(log_sum_exp(none) == -inf);
  CHECK_THROWS_AS(log_sum_exp(std::span<const double>{}), ContractViolation);
}

TEST_CASE("softmax rows sum to one along any axis") {
  std::mt19937_64 rng(1);
  const Tensor<double> x = randn(rng, {3, 4, 5}, 3.0);
  for (int axis = 0; axis < 3; ++axis) {
    const Tensor<double> s = softmax(x, axis);
    const Tensor<double> ls = log_softmax(x, axis);
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(std::log(s[i]) == doctest::Approx(ls[i]));
  }
  const Tensor<double> s = softmax(x, 2);
  for (int r = 0; r < 12; ++r) {
    double total = 0;
    for (int c = 0; c < 5; ++c) total += s[static_cast<std::size_t>(r) * 5 + c];
    CHECK(total == doctest::Approx(1.0));
  }
}

TEST_CASE("op gradients agree with central differences") {
  std::mt19937_64 rng(7);
  const Tensor<double> w = randn(rng, {4, 3});
  const Tensor<double> b = randn(rng, {3});
  const Tensor<double> x = randn(rng, {2, 5, 4});

  SUBCASE("linear wrt input, weight, bias") {
    CHECK(finite_diff_check(
              [&](Tape<double>& t, Var<double> p) {
                return probe(t, linear(p, t.constant(w), t.constant(b)), 1);
              },
              x, kH) < kTol);
    CHECK(finite_diff_check(
              [&](Tape<double>& t, Var<double> p) {
                return probe(t, linear(t.constant(x), p, t.constant(b)), 1);
              },
              w, kH) < kTol);
    CHECK(finite_diff_check(
              [&](Tape<double>& t, Var<double> p) {
                return probe(t, linear(t.constant(x), t.constant(w), p), 1);
              },
              b, kH) < kTol);
  }
  SUBCASE("bmm with and without transpose") {
    const Tensor<double> a = randn(rng, {2, 3, 4});
    const Tensor<double> c = randn(rng, {2, 4, 5});
    const Tensor<double> ct = randn(rng, {2, 5, 4});
    CHECK(finite_diff_check(
              [&](Tape<double>& t, Var<double> p) { return probe(t, bmm(p, t.constant(c), false), 2); }, a, kH) <
          kTol);
    CHECK(finite_diff_check(
              [&](Tape<double>& t, Var<double> p) { return probe(t, bmm(t.constant(a), p, false), 2); }, c, kH) <
          kTol);
    CHECK(finite_diff_check(
              [&](Tape<double>& t, Var<double> p) { return probe(t, bmm(t.constant(a), p, true), 2); }, ct, kH) <
          kTol);
  }
  SUBCASE("elementwise and broadcast") {
    const Tensor<double> row = randn(rng, {4});
    CHECK(finite_diff_check([&](Tape<double>& t, Var<double> p) { return probe(t, add(p, t.constant(row)), 3); },
                            x, kH) < kTol);
    CHECK(finite_diff_check([&](Tape<double>& t, Var<double> p) { return probe(t, add(t.constant(x), p), 3); },
                            row, kH) < kTol);
    CHECK(finite_diff_check([&](Tape<double>& t, Var<double> p) { return probe(t, mul(p, t.constant(x)), 3); }, x,
                            kH) < kTol);
    CHECK(finite_diff_check([&](Tape<double>& t, Var<double> p) { return probe(t, scale(p, 2.5), 3); }, x, kH) <
          kTol);
    // keep entries away from the kink
    Tensor<double> away = x;
    for (auto& v : away.data()) v += v >= 0 ? 0.1 : -0.1;
    CHECK(finite_diff_check([&](Tape<double>& t, Var<double> p) { return probe(t, relu(p), 3); }, away, kH) < kTol);
  }
  SUBCASE("shape ops") {
    CHECK(finite_diff_check([&](Tape<double>& t, Var<double> p) { return probe(t, reshape(p, {10, 4}), 4); }, x,
                            kH) < kTol);
    CHECK(finite_diff_check([&](Tape<double>& t, Var<double> p) { return probe(t, permute(p, {2, 0, 1}), 4); }, x,
                            kH) < kTol);
    CHECK(finite_diff_check([&](Tape<double>& t, Var<double> p) { return probe(t, gather_rows(p, {3, 0, 3, 9}), 4); },
                            x, kH) < kTol);
    CHECK(finite_diff_check([&](Tape<double>& t, Var<double> p) { return probe(t, frame_stack(p, 3, 2), 4); }, x,
                            kH) < kTol);
    const std::vector<std::uint8_t> keep{1, 1, 0, 1, 0, 1, 1, 1, 1, 0};
    CHECK(finite_diff_check([&](Tape<double>& t, Var<double> p) { return probe(t, mask_rows(p, keep), 4); }, x,
                            kH) < kTol);
  }
  SUBCASE("normalisers") {
    CHECK(finite_diff_check([&](Tape<double>& t, Var<double> p) { return probe(t, softmax(p), 5); }, x, kH) < kTol);
    CHECK(finite_diff_check([&](Tape<double>& t, Var<double> p) { return probe(t, log_softmax(p), 5); }, x, kH) <
          kTol);
    const Tensor<double> g = randn(rng, {4});
    const Tensor<double> be = randn(rng, {4});
    CHECK(finite_diff_check(
              [&](Tape<double>& t, Var<double> p) {
                return probe(t, layer_norm(p, t.constant(g), t.constant(be)), 5);
              },
              x, kH) < 1e-6);
    CHECK(finite_diff_check(
              [&](Tape<double>& t, Var<double> p) {
                return probe(t, layer_norm(t.constant(x), p, t.constant(be)), 5);
              },
              g, kH) < kTol);
  }
  SUBCASE("embedding, masking and reductions") {
    const Tensor<double> table = randn(rng, {6, 4});
    CHECK(finite_diff_check(
              [&](Tape<double>& t, Var<double> p) { return probe(t, embedding(p, {1, 5, 1, 0, 2, 2}, {2, 3}), 6); },
              table, kH) < kTol);
    const Tensor<double> scores = randn(rng, {1, 2, 3, 3});
    std::vector<std::uint8_t> allowed{1, 0, 0, 1, 1, 0, 1, 1, 1};
    CHECK(finite_diff_check(
              [&](Tape<double>& t, Var<double> p) { return probe(t, softmax(mask_fill(p, allowed, -1e9)), 6); },
              scores, kH) < kTol);
    CHECK(finite_diff_check([&](Tape<double>&, Var<double> p) { return mean(p); }, x, kH) < kTol);
    const std::vector<int> targets{1, 3, 0, 2, 2, 0, 1, 1, 3, 0};
    CHECK(finite_diff_check(
              [&](Tape<double>&, Var<double> p) { return label_smoothed_nll(log_softmax(p), targets, 0.1, 0); }, x,
              kH) < kTol);
  }
}

TEST_CASE("label smoothing value and ignored rows") {
  Tensor<double> lp(Shape{2, 4});
  const double v[] = {std::log(0.7), std::log(0.1), std::log(0.1), std::log(0.1)};
  for (int r = 0; r < 2; ++r) std::copy(v, v + 4, lp.ptr() + r * 4);
  Tape<double> tape;
  const double got = label_smoothed_nll(tape.leaf(lp), {0, 3}, 0.2, 3).value()[0];
  const double mean_lp = (v[0] + v[1] + v[2] + v[3]) / 4.0;
  CHECK(got == doctest::Approx(-(0.8 * v[0] + 0.2 * mean_lp)));
  Tape<double> t2;
  CHECK(label_smoothed_nll(t2.leaf(lp), {3, 3}, 0.2, 3).value()[0] == 0.0);
}

TEST_CASE("masked attention scores give exact zeros and fully masked rows stay finite") {
  Tape<double> tape;
  Tensor<double> s(Shape{1, 1, 2, 2}, 1.0);
  const auto out = softmax(mask_fill(tape.leaf(s), {1, 0, 0, 0}, -std::numeric_limits<double>::infinity()));
  CHECK(out.value()[0] == 1.0);
  CHECK(out.value()[1] == 0.0);
  CHECK(out.value()[2] == 0.0);
  CHECK(out.value()[3] == 0.0);
}

TEST_CASE("dropout keeps the expectation and is driven by the rng") {
  Tape<float> tape;
  Tensor<float> ones(Shape{20000}, 1.0f);
  std::mt19937_64 a(3), b(3);
  const auto x = dropout(tape.leaf(ones), 0.25f, a);
  const auto y = dropout(tape.leaf(ones), 0.25f, b);
  CHECK(x.value() == y.value());
  double total = 0;
  int zeros = 0;
  for (float v : x.value().data()) {
    total += v;
    zeros += v == 0.0f;
  }
  CHECK(total / 20000.0 == doctest::Approx(1.0).epsilon(0.03));
  CHECK(zeros / 20000.0 == doctest::Approx(0.25).epsilon(0.05));
}

TEST_CASE("gradients accumulate across uses and frozen constants get none") {
  Tape<double> tape;
  const Var<double> a = tape.leaf(Tensor<double>(Shape{3}, 2.0));
  const Var<double> c = tape.constant(Tensor<double>(Shape{3}, 5.0));
  tape.backward(sum(add(mul(a, a), mul(a, c))));
  const Tensor<double> g = tape.grad(a);
  for (double v : g.data()) CHECK(v == doctest::Approx(2 * 2.0 + 5.0));
}

TEST_CASE("linear rows do not depend on other rows") {
  std::mt19937_64 rng(9);
  const Tensor<double> w = randn(rng, {8, 8});
  const Tensor<double> b = randn(rng, {8});
  Tensor<double> x = randn(rng, {5, 8});
  Tape<double> t1(false);
  const Tensor<double> full = linear(t1.constant(x), t1.constant(w), t1.constant(b)).value();
  for (int r = 1; r < 5; ++r)
    for (int c = 0; c < 8; ++c) x[static_cast<std::size_t>(r) * 8 + c] = 1e6;
  Tape<double> t2(false);
  const Tensor<double> changed = linear(t2.constant(x), t2.constant(w), t2.constant(b)).value();
  for (int c = 0; c < 8; ++c) CHECK(full[c] == changed[c]);  // bitwise
}
