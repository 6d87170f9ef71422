// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mixcpt/gradcheck.hpp"
#include "mixcpt/lssd.hpp"
#include "mixcpt/model.hpp"
#include "mixcpt/ops.hpp"
#include "mixcpt/rng.hpp"

namespace mixcpt {

inline constexpr double kOpGradTolerance = 1e-4;
inline constexpr double kModelGradTolerance = 1e-3;

struct GradSuiteEntry {
  GradCheckReport report;
  double tolerance = 0.0;
  bool passed() const noexcept { return report.max_relative_error < tolerance; }
};

namespace detail {

inline Tensor<double> suite_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

}  // namespace detail

/// Every differentiable op on small random inputs (eps 1e-6), then each
/// parameter tensor of a 2-layer d_model=16 model through the NTP loss
/// (eps 1e-5, matrices scaled to std 0.2 so gradients clear the
/// finite-difference noise floor).
inline std::vector<GradSuiteEntry> run_grad_suite() {
  using G = Graph<double>;
  using V = Var<double>;
  using detail::suite_tensor;
  constexpr double eps = 1e-6;
  std::vector<GradSuiteEntry> out;
  auto op = [&](std::string name, const ScalarFunction& fn, const Tensor<double>& at) {
    out.push_back({grad_check(std::move(name), fn, at, eps), kOpGradTolerance});
  };

  const auto X = suite_tensor({3, 5}, 21), Y = suite_tensor({3, 5}, 22), W = suite_tensor({3, 5}, 23);
  auto project = [&W](G& g, V v) { return sum(mul(v, g.constant(W))); };
  op("add", [&](G& g, V x) { return project(g, add(x, g.constant(Y))); }, X);
  op("add_scalar", [&](G& g, V x) { return project(g, add(g.constant(Y), sum(x))); }, X);
  op("sub", [&](G& g, V x) { return project(g, sub(g.constant(Y), x)); }, X);
  op("mul", [&](G& g, V x) { return project(g, mul(x, g.constant(Y))); }, X);
  op("scale", [&](G& g, V x) { return project(g, scale(x, -2.5)); }, X);
  op("gelu", [&](G& g, V x) { return project(g, gelu(x)); }, X);
  op("softplus", [&](G& g, V x) { return project(g, softplus(scale(x, 3.0))); }, X);
  op("mean", [&](G&, V x) { return mean(mul(x, x)); }, X);
  op("row_softmax", [&](G& g, V x) { return project(g, row_softmax(x)); }, X);
  op("row_log_softmax", [&](G& g, V x) { return project(g, row_log_softmax(x)); }, X);

  const auto gain = suite_tensor({5}, 24), bias = suite_tensor({5}, 25);
  op("layer_norm.x", [&](G& g, V x) { return project(g, layer_norm(x, g.constant(gain), g.constant(bias))); }, X);
  op("layer_norm.gain", [&](G& g, V x) { return project(g, layer_norm(g.constant(Y), x, g.constant(bias))); }, gain);
  op("layer_norm.bias", [&](G& g, V x) {
    auto o = layer_norm(g.constant(Y), g.constant(gain), x);
    return sum(mul(o, o));
  }, bias);

  const auto A = suite_tensor({3, 4}, 41), B = suite_tensor({5, 4}, 42), C = suite_tensor({4, 5}, 40);
  op("matmul.lhs", [&](G& g, V x) { return project(g, matmul(x, g.constant(C))); }, A);
  op("matmul.rhs", [&](G& g, V x) { return project(g, matmul(g.constant(A), x)); }, C);
  op("matmul_nt.lhs", [&](G& g, V x) { return project(g, matmul_nt(x, g.constant(B))); }, A);
  op("matmul_nt.rhs", [&](G& g, V x) { return project(g, matmul_nt(g.constant(A), x)); }, B);

  const std::vector<TokenId> ids = {2, 0, 2, 4};
  const auto Wemb = suite_tensor({4, 4}, 44);
  op("embedding", [&](G& g, V x) { return sum(mul(embedding(x, ids), g.constant(Wemb))); }, B);
  op("slice_rows", [&](G&, V x) {
    auto s = slice_rows(x, 1, 3);
    return sum(mul(s, s));
  }, B);

  const auto Q = suite_tensor({5, 8}, 45), K = suite_tensor({5, 8}, 46), Vv = suite_tensor({5, 8}, 47),
             Wa = suite_tensor({5, 8}, 48);
  const char* which_name[] = {"causal_self_attention.q", "causal_self_attention.k", "causal_self_attention.v"};
  for (int which = 0; which < 3; ++which) {
    op(which_name[which], [&, which](G& g, V x) {
      auto q = which == 0 ? x : g.constant(Q);
      auto k = which == 1 ? x : g.constant(K);
      auto v = which == 2 ? x : g.constant(Vv);
      return sum(mul(causal_self_attention(q, k, v, 2), g.constant(Wa)));
    }, which == 0 ? Q : (which == 1 ? K : Vv));
  }

  const std::vector<TokenId> t3 = {1, 3, 0};
  const std::vector<std::uint8_t> m3 = {1, 0, 1};
  op("cross_entropy_masked", [&](G&, V x) { return cross_entropy_masked(x, t3, m3); }, suite_tensor({3, 6}, 61));

  const auto P = kernels::softmax_rows(suite_tensor({3, 5}, 72));
  const auto LQ = kernels::log_softmax_rows(suite_tensor({3, 5}, 73));
  op("kl_divergence_rows.p", [&](G& g, V x) { return kl_divergence_rows(row_softmax(x), g.constant(LQ)); },
     suite_tensor({3, 5}, 74));
  op("kl_divergence_rows.log_q", [&](G& g, V x) { return kl_divergence_rows(g.constant(P), row_log_softmax(x)); },
     suite_tensor({3, 5}, 75));

  const std::vector<TokenId> seq = {3, 1, 4, 1, 5};
  const std::vector<std::uint8_t> seq_mask = {1, 1, 1, 0, 1};
  const auto teacher = suite_tensor({5, 6}, 81);
  op("lssd_loss", [&](G&, V x) { return lssd_loss(x, teacher, seq, seq_mask); }, suite_tensor({5, 6}, 82));

  ModelConfig mc;
  mc.d_model = 16;
  mc.n_layers = 2;
  mc.n_heads = 2;
  mc.max_seq_len = 16;
  auto params = init_parameters<double>(mc, 21);
  params.for_each([](Tensor<double>& t) {
    if (t.rank() == 2)
      for (auto& v : t.data()) v *= 10.0;
  });
  Rng rng(22);
  std::vector<TokenId> tokens(8);
  for (auto& t : tokens) t = static_cast<TokenId>(rng.below(256));
  const std::vector<std::uint8_t> mask(tokens.size(), 1);
  std::vector<const Tensor<double>*> tensors;
  params.for_each([&](const Tensor<double>& t) { tensors.push_back(&t); });
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    auto fn = [&, k](G& g, V x) {
      auto w = bind_parameters(g, params, false);
      std::size_t i = 0;
      w.for_each([&](V& v) {
        if (i++ == k) v = x;
      });
      return ntp_loss(forward(w, params.config, tokens).logits, tokens, mask);
    };
    out.push_back({grad_check("model.param" + std::to_string(k), fn, *tensors[k], 1e-5), kModelGradTolerance});
  }
  return out;
}

}  // namespace mixcpt
