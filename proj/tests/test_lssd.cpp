// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "mixcpt/checkpoint.hpp"
#include "mixcpt/datapipe.hpp"
#include "mixcpt/hash.hpp"
#include "mixcpt/lssd.hpp"
#include "mixcpt/optim.hpp"
#include "test_util.hpp"

using namespace mixcpt;
using Catch::Matchers::WithinAbs;

namespace {

ModelConfig tiny_config(std::uint32_t seq = 16) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq_len = seq;
  return c;
}

std::vector<TokenId> random_tokens(std::size_t n, Rng& rng, std::uint32_t vocab) {
  std::vector<TokenId> t(n);
  for (auto& v : t) v = static_cast<TokenId>(rng.below(vocab));
  return t;
}

std::vector<double> row_of(std::size_t v, Rng& rng, bool coarse) {
  std::vector<double> r(v);
  for (auto& x : r) {
    x = 3.0 * rng.normal();
    if (coarse) x = std::round(x);  // forces ties
  }
  return r;
}

// Swap, softmax and the KL sum written out directly in double.
double oracle_lssd(const Tensor<double>& student, const Tensor<double>& teacher, const std::vector<TokenId>& tokens,
                   const std::vector<std::uint8_t>& mask) {
  const std::size_t V = student.cols();
  double total = 0.0;
  std::size_t rows = 0;
  for (std::size_t j = 1; j < tokens.size(); ++j) {
    if (!mask[j]) continue;
    std::vector<double> t(V), s(V);
    for (std::size_t w = 0; w < V; ++w) {
      t[w] = teacher.at(j - 1, w);
      s[w] = student.at(j - 1, w);
    }
    std::size_t top = 0;
    for (std::size_t w = 1; w < V; ++w) {
      if (t[w] > t[top]) top = w;
    }
    if (top != tokens[j]) std::swap(t[top], t[tokens[j]]);
    auto softmax = [](std::vector<double> x) {
      const double m = *std::max_element(x.begin(), x.end());
      double z = 0.0;
      for (auto& v : x) z += (v = std::exp(v - m));
      for (auto& v : x) v /= z;
      return x;
    };
    const auto p = softmax(s), q = softmax(t);
    double kl = 0.0;
    for (std::size_t w = 0; w < V; ++w) {
      if (p[w] > 0.0) kl += p[w] * std::log(p[w] / q[w]);
    }
    total += kl;
    ++rows;
  }
  return total / static_cast<double>(rows);
}

std::vector<PackedBlock> random_blocks(std::size_t n, std::size_t len, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<UnifiedSample> samples;
  for (std::size_t i = 0; i < n; ++i) {
    samples.push_back({random_tokens(1 + rng.below(len), rng, 256), SourceKind::kCpt});
  }
  return pack_blocks(samples, len, seed);
}

}  // namespace

TEST_CASE("swap_teacher_logits examples", "[lssd][swap]") {
  using V = std::vector<double>;
  auto swapped = [](V row, TokenId gold) {
    auto t = swap_teacher_logits<double>(row, gold);
    return V(t.data().begin(), t.data().end());
  };
  CHECK(swapped({2.0, 1.0, 0.5}, 1) == V{1.0, 2.0, 0.5});
  CHECK(swapped({2.0, 1.0, 0.5}, 0) == V{2.0, 1.0, 0.5});
  CHECK(swapped({2.0, 2.0, 0.0}, 2) == V{0.0, 2.0, 2.0});
  CHECK_THROWS_AS(swapped({2.0, 1.0, 0.5}, 3), IndexError);
}

TEST_CASE("exchange properties over 10000 random rows", "[lssd][swap][property]") {
  Rng rng(2024);
  for (int i = 0; i < 10000; ++i) {
    const std::size_t V = 2 + rng.below(300);
    const auto row = row_of(V, rng, i % 3 == 0);
    const auto gold = static_cast<TokenId>(rng.below(V));
    auto once = swap_teacher_logits<double>(row, gold);
    std::vector<double> a(row), b(once.data().begin(), once.data().end());
    const std::size_t top = kernels::argmax<double>(row);
    // Gold now holds the row maximum; it is the argmax outright unless another
    // slot ties with that maximum.
    const double top_value = *std::max_element(b.begin(), b.end());
    REQUIRE(b[gold] == top_value);
    if (std::count(b.begin(), b.end(), top_value) == 1) REQUIRE(kernels::argmax<double>(b) == gold);
    // Everything except the two exchanged slots is untouched.
    for (std::size_t w = 0; w < V; ++w) {
      if (w != top && w != gold) REQUIRE(b[w] == a[w]);
    }
    // Involution for the same (t, gold) pair.
    std::vector<double> back(b);
    std::swap(back[top], back[gold]);
    REQUIRE(back == a);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    REQUIRE(a == b);
  }
}

TEST_CASE("lssd_loss matches the brute-force oracle and is non-negative", "[lssd][loss][oracle]") {
  Rng rng(99);
  std::size_t rows = 0;
  while (rows < 10000) {
    const std::size_t T = 2 + rng.below(12), V = 2 + rng.below(40);
    Tensor<double> s({T, V}), t({T, V});
    const bool coarse = rng.below(3) == 0;
    for (std::size_t r = 0; r < T; ++r) {
      const auto a = row_of(V, rng, coarse), b = row_of(V, rng, coarse);
      for (std::size_t w = 0; w < V; ++w) {
        s.at(r, w) = a[w];
        t.at(r, w) = b[w];
      }
    }
    const auto tokens = random_tokens(T, rng, static_cast<std::uint32_t>(V));
    std::vector<std::uint8_t> mask(T);
    for (auto& m : mask) m = rng.below(4) != 0;
    mask[1] = 1;
    const double got = lssd_loss_value(s, t, tokens, mask);
    REQUIRE(got >= -1e-6);
    REQUIRE_THAT(got, WithinAbs(oracle_lssd(s, t, tokens, mask), 1e-7));
    rows += T;

    // Student equal to the swapped teacher gives zero.
    Tensor<double> equal = t;
    for (std::size_t j = 1; j < T; ++j) swap_top1_with_gold<double>(equal.row(j - 1), tokens[j]);
    REQUIRE(std::abs(lssd_loss_value(equal, t, tokens, mask)) <= 1e-7);
  }
}

TEST_CASE("lssd_loss closed-form and error cases", "[lssd][loss]") {
  SECTION("T=3, V=5 oracle") {
    Tensor<double> s({3, 5}), t({3, 5});
    Rng rng(5);
    for (auto& v : s.data()) v = rng.normal();
    for (auto& v : t.data()) v = rng.normal();
    const std::vector<TokenId> tokens = {0, 3, 1};
    const std::vector<std::uint8_t> mask = {1, 1, 1};
    CHECK_THAT(lssd_loss_value(s, t, tokens, mask), WithinAbs(oracle_lssd(s, t, tokens, mask), 1e-7));
  }
  SECTION("V=2 near-deterministic student vs uniform teacher") {
    Tensor<double> s({2, 2}), t({2, 2}, 0.0);
    s.at(0, 0) = std::log(1.0 - 1e-6);
    s.at(0, 1) = std::log(1e-6);
    const double expect = (1.0 - 1e-6) * std::log((1.0 - 1e-6) / 0.5) + 1e-6 * std::log(1e-6 / 0.5);
    const double got = lssd_loss_value(s, t, std::vector<TokenId>{0, 1}, std::vector<std::uint8_t>{1, 1});
    CHECK_THAT(got, WithinAbs(expect, 1e-9));
    CHECK_THAT(got, WithinAbs(std::log(2.0), 2e-5));
  }
  SECTION("errors") {
    Tensor<double> s({3, 4}), t({3, 5});
    const std::vector<TokenId> tokens = {0, 1, 2};
    CHECK_THROWS_AS(lssd_loss_value(s, t, tokens, std::vector<std::uint8_t>{1, 1, 1}), ShapeError);
    Tensor<double> u({3, 4});
    CHECK_THROWS_AS(lssd_loss_value(s, u, tokens, std::vector<std::uint8_t>{1, 0, 0}), InputError);
  }
}

TEST_CASE("lssd gradient reaches the student only and passes a finite-difference check", "[lssd][grad]") {
  Rng rng(17);
  Tensor<double> s({4, 6}), t({4, 6});
  for (auto& v : s.data()) v = rng.normal();
  for (auto& v : t.data()) v = rng.normal();
  const std::vector<TokenId> tokens = {1, 5, 0, 2};
  const std::vector<std::uint8_t> mask = {1, 1, 0, 1};
  Graph<double> g;
  auto sv = g.leaf(s, true);
  auto loss = lssd_loss(sv, t, tokens, mask);
  g.backward(loss);
  const auto grad = sv.grad();
  const double h = 1e-6;
  for (std::size_t i = 0; i < s.size(); ++i) {
    Tensor<double> plus = s, minus = s;
    plus.data()[i] += h;
    minus.data()[i] -= h;
    const double fd = (lssd_loss_value(plus, t, tokens, mask) - lssd_loss_value(minus, t, tokens, mask)) / (2 * h);
    CHECK_THAT(grad[i], WithinAbs(fd, 1e-7));
  }
  // Masked-out row 1 (predicting token 2) gets no gradient.
  for (std::size_t w = 0; w < 6; ++w) CHECK(grad[1 * 6 + w] == 0.0);
}

TEST_CASE("cpt_loss", "[lssd][cpt]") {
  CHECK(cpt_loss(2.0, 0.4, 1.0) == 2.0);
  CHECK(cpt_loss(2.0, 0.4, 0.0) == 0.4);
  CHECK_THAT(cpt_loss(2.0, 0.4, 0.5), WithinAbs(1.2, 1e-15));
  CHECK_THROWS_AS(cpt_loss(1.0, 1.0, -0.1), ParameterError);
  CHECK_THROWS_AS(cpt_loss(1.0, 1.0, 1.1), ParameterError);
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double lssd = 2.0 * rng.uniform(), ntp = lssd + 1e-3 + 3.0 * rng.uniform();
    const double a = rng.uniform(), b = a + 1e-3 + (1.0 - a - 1e-3) * rng.uniform();
    if (b > 1.0) continue;
    REQUIRE(cpt_loss(ntp, lssd, a) < cpt_loss(ntp, lssd, b));
  }
}

TEST_CASE("frozen teacher contract", "[lssd][teacher]") {
  const auto cfg = tiny_config();
  const auto params = init_parameters(cfg, 12);
  FrozenTeacher<float> teacher(params);
  Rng rng(4);
  const auto tokens = random_tokens(12, rng, 256);
  const auto a = teacher_logits(teacher, tokens, cfg);
  CHECK(a == teacher_logits(teacher, tokens, cfg));
  // Equals the student forward before any update.
  Graph<float> g;
  auto w = bind_parameters(g, params, true);
  auto student = forward(w, cfg, std::span<const TokenId>(tokens)).logits;
  CHECK(student.value() == a);
  auto loss = lssd_loss(student, a, tokens, testing::ones_mask(tokens.size()));
  g.backward(loss);
  CHECK(teacher.parameters() == params);

  auto other = cfg;
  other.d_model = 32;
  CHECK_THROWS_AS(teacher_logits(teacher, tokens, other), ParameterError);
}

TEST_CASE("alpha = 1 Mix-CPT equals a plain NTP loop bitwise", "[lssd][train][alpha]") {
  const auto cfg = tiny_config();
  const auto blocks = random_blocks(120, cfg.max_seq_len, 8);
  Checkpoint start{init_parameters(cfg, 21), 0, 0};
  TrainConfig tc;
  tc.alpha = 1.0;
  tc.lr = 0.2;
  tc.momentum = 0.9;
  tc.clip_norm = 1.0;
  tc.steps = 50;
  tc.batch_size = 4;
  tc.max_seq_len = cfg.max_seq_len;
  tc.seed = 5;
  const auto mixed = train_mix_cpt(start, blocks, tc);

  // Independent loop: the same stream in order, NTP only, no teacher anywhere.
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (has_ntp_targets(blocks[i].mask)) usable.push_back(i);
  }
  Parameters<float> p = start.params;
  Sgd<float> opt(OptimConfig{tc.lr, tc.momentum, tc.clip_norm}, p);
  ExampleFn<float> fn = [&](Graph<float>&, const ParamVars<float>& w, std::size_t i) {
    const auto& b = blocks[usable[i]];
    return ExampleLoss<float>{ntp_loss(forward(w, cfg, std::span<const TokenId>(b.tokens)).logits, b.tokens, b.mask),
                              {}};
  };
  std::size_t cursor = 0;
  for (std::uint64_t s = 0; s < tc.steps; ++s) {
    std::vector<std::size_t> batch;
    for (std::size_t k = 0; k < tc.batch_size; ++k) batch.push_back(cursor++ % usable.size());
    opt.step(p, batch_gradient(p, batch, fn).grad);
  }
  Checkpoint plain{p, tc.steps, tc.seed};
  CHECK(checkpoint_sha256(mixed) == checkpoint_sha256(plain));

  // The teacher never matters at alpha = 1, even when its LSSD value is not logged.
  tc.log_unused_lssd = false;
  CHECK(checkpoint_sha256(train_mix_cpt(start, blocks, tc)) == checkpoint_sha256(plain));
}

TEST_CASE("train_mix_cpt determinism, metrics and aborts", "[lssd][train]") {
  const auto cfg = tiny_config();
  const auto blocks = random_blocks(40, cfg.max_seq_len, 9);
  Checkpoint start{init_parameters(cfg, 31), 7, 0};
  TrainConfig tc;
  tc.alpha = 0.5;
  tc.steps = 6;
  tc.batch_size = 3;
  tc.max_seq_len = cfg.max_seq_len;
  tc.seed = 11;

  const auto metrics = std::filesystem::temp_directory_path() / "mixcpt_test_cpt_metrics.csv";
  std::vector<CptStepMetrics> hist;
  const auto a = train_mix_cpt(start, blocks, tc, metrics, &hist);
  const auto b = train_mix_cpt(start, blocks, tc);
  CHECK(checkpoint_sha256(a) == checkpoint_sha256(b));
  CHECK(a.step == 13);
  CHECK(a.seed == 11);
  CHECK_FALSE(a.params == start.params);

  std::ifstream in(metrics);
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,ntp,lssd,total");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 6);
  REQUIRE(hist.size() == 6);
  CHECK(hist.front().step == 8);
  for (const auto& m : hist) {
    CHECK(m.lssd >= -1e-6);
    CHECK_THAT(m.total, WithinAbs(0.5 * m.ntp + 0.5 * m.lssd, 1e-5));
  }
  // Step 1: the student is the teacher, so only the swap separates them.
  CHECK(hist.front().lssd > 0.0);

  SECTION("empty data") { CHECK_THROWS_AS(train_mix_cpt(start, std::vector<PackedBlock>{}, tc), InputError); }
  SECTION("non-finite parameters abort with the step index") {
    Checkpoint bad = start;
    bad.params.tok_emb.data()[0] = std::numeric_limits<float>::quiet_NaN();
    try {
      train_mix_cpt(bad, blocks, tc);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(e.step() == 8);
    }
  }
  SECTION("bad alpha and wrong vocab") {
    tc.alpha = 1.5;
    CHECK_THROWS_AS(train_mix_cpt(start, blocks, tc), ParameterError);
    tc.alpha = 0.5;
    auto c = cfg;
    c.vocab_size = 300;
    CHECK_THROWS_AS(train_mix_cpt(Checkpoint{init_parameters(c, 1), 0, 0}, blocks, tc), ParameterError);
  }
}
