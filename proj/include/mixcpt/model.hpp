// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

// Minimal pre-norm decoder-only transformer with learned absolute positions
// and a tied token embedding / output projection.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mixcpt/error.hpp"
#include "mixcpt/graph.hpp"
#include "mixcpt/kernels.hpp"
#include "mixcpt/ops.hpp"
#include "mixcpt/rng.hpp"
#include "mixcpt/tensor.hpp"

namespace mixcpt {

inline constexpr std::uint32_t kDefaultVocabSize = 261;

struct ModelConfig {
  std::uint32_t vocab_size = kDefaultVocabSize;
  std::uint32_t d_model = 64;
  std::uint32_t n_layers = 2;
  std::uint32_t n_heads = 4;
  std::uint32_t max_seq_len = 64;

  std::uint32_t d_ff() const noexcept { return 4 * d_model; }

  void validate() const {
    if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || max_seq_len == 0) {
      throw ParameterError("model config fields must all be positive");
    }
    if (d_model % n_heads != 0) {
      throw ParameterError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                           std::to_string(n_heads));
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class Tn>
struct LayerWeights {
  Tn ln1_gain, ln1_bias;
  Tn w_q, w_k, w_v, w_o;
  Tn ln2_gain, ln2_bias;
  Tn w_fc, w_proj;

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f(self.ln1_gain);
    f(self.ln1_bias);
    f(self.w_q);
    f(self.w_k);
    f(self.w_v);
    f(self.w_o);
    f(self.ln2_gain);
    f(self.ln2_bias);
    f(self.w_fc);
    f(self.w_proj);
  }
};

/// Weights in canonical order: token embedding W_e, positional embedding,
/// per-layer blocks, final layer norm. `tok_emb` is also the output
/// projection (logits = h * W_e^T); no other vocab-sized matrix exists.
template <class Tn>
struct WeightSet {
  Tn tok_emb;
  Tn pos_emb;
  std::vector<LayerWeights<Tn>> layers;
  Tn lnf_gain, lnf_bias;

  template <class F>
  void for_each(F&& f) {
    visit_all(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit_all(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit_all(Self& self, F& f) {
    f(self.tok_emb);
    f(self.pos_emb);
    for (auto& l : self.layers) LayerWeights<Tn>::visit(l, f);
    f(self.lnf_gain);
    f(self.lnf_bias);
  }
};

template <Real T>
struct Parameters : WeightSet<Tensor<T>> {
  ModelConfig config;

  std::size_t count() const {
    std::size_t n = 0;
    this->for_each([&n](const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  /// Same layout, every value zero.
  Parameters zeros_like() const {
    Parameters out = *this;
    out.for_each([](Tensor<T>& t) { std::fill(t.data().begin(), t.data().end(), T{0}); });
    return out;
  }

  template <Real U>
  Parameters<U> cast() const {
    Parameters<U> out;
    out.config = config;
    out.tok_emb = this->tok_emb.template cast<U>();
    out.pos_emb = this->pos_emb.template cast<U>();
    for (const auto& l : this->layers) {
      LayerWeights<Tensor<U>> o;
      o.ln1_gain = l.ln1_gain.template cast<U>();
      o.ln1_bias = l.ln1_bias.template cast<U>();
      o.w_q = l.w_q.template cast<U>();
      o.w_k = l.w_k.template cast<U>();
      o.w_v = l.w_v.template cast<U>();
      o.w_o = l.w_o.template cast<U>();
      o.ln2_gain = l.ln2_gain.template cast<U>();
      o.ln2_bias = l.ln2_bias.template cast<U>();
      o.w_fc = l.w_fc.template cast<U>();
      o.w_proj = l.w_proj.template cast<U>();
      out.layers.push_back(std::move(o));
    }
    out.lnf_gain = this->lnf_gain.template cast<U>();
    out.lnf_bias = this->lnf_bias.template cast<U>();
    return out;
  }

  bool all_finite() const {
    bool ok = true;
    this->for_each([&ok](const Tensor<T>& t) { ok = ok && t.all_finite(); });
    return ok;
  }

  std::vector<T> flatten() const {
    std::vector<T> flat;
    flat.reserve(count());
    this->for_each([&flat](const Tensor<T>& t) { flat.insert(flat.end(), t.data().begin(), t.data().end()); });
    return flat;
  }

  friend bool operator==(const Parameters& a, const Parameters& b) {
    return a.config == b.config && a.flatten() == b.flatten();
  }
};

template <Real T>
using ParamVars = WeightSet<Var<T>>;

template <Real T>
Parameters<T> shaped_parameters(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model, ff = cfg.d_ff();
  Parameters<T> p;
  p.config = cfg;
  p.tok_emb = Tensor<T>({cfg.vocab_size, d});
  p.pos_emb = Tensor<T>({cfg.max_seq_len, d});
  for (std::uint32_t i = 0; i < cfg.n_layers; ++i) {
    LayerWeights<Tensor<T>> l;
    l.ln1_gain = Tensor<T>({d}, T{1});
    l.ln1_bias = Tensor<T>({d}, T{0});
    l.w_q = Tensor<T>({d, d});
    l.w_k = Tensor<T>({d, d});
    l.w_v = Tensor<T>({d, d});
    l.w_o = Tensor<T>({d, d});
    l.ln2_gain = Tensor<T>({d}, T{1});
    l.ln2_bias = Tensor<T>({d}, T{0});
    l.w_fc = Tensor<T>({d, ff});
    l.w_proj = Tensor<T>({ff, d});
    p.layers.push_back(std::move(l));
  }
  p.lnf_gain = Tensor<T>({d}, T{1});
  p.lnf_bias = Tensor<T>({d}, T{0});
  return p;
}

inline constexpr double kInitStd = 0.02;

/// Embeddings and projections ~ N(0, 0.02^2) drawn in canonical order from
/// one seeded stream; layer-norm gains 1, biases 0.
template <Real T = float>
Parameters<T> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  auto p = shaped_parameters<T>(cfg);
  Rng rng(seed);
  auto fill = [&rng](Tensor<T>& t) {
    for (auto& v : t.data()) v = static_cast<T>(kInitStd * rng.normal());
  };
  fill(p.tok_emb);
  fill(p.pos_emb);
  for (auto& l : p.layers) {
    fill(l.w_q);
    fill(l.w_k);
    fill(l.w_v);
    fill(l.w_o);
    fill(l.w_fc);
    fill(l.w_proj);
  }
  return p;
}

/// Records every weight as a leaf of `g`.
template <Real T>
ParamVars<T> bind_parameters(Graph<T>& g, const Parameters<T>& p, bool requires_grad) {
  ParamVars<T> v;
  v.tok_emb = g.leaf(p.tok_emb, requires_grad);
  v.pos_emb = g.leaf(p.pos_emb, requires_grad);
  for (const auto& l : p.layers) {
    LayerWeights<Var<T>> lv;
    lv.ln1_gain = g.leaf(l.ln1_gain, requires_grad);
    lv.ln1_bias = g.leaf(l.ln1_bias, requires_grad);
    lv.w_q = g.leaf(l.w_q, requires_grad);
    lv.w_k = g.leaf(l.w_k, requires_grad);
    lv.w_v = g.leaf(l.w_v, requires_grad);
    lv.w_o = g.leaf(l.w_o, requires_grad);
    lv.ln2_gain = g.leaf(l.ln2_gain, requires_grad);
    lv.ln2_bias = g.leaf(l.ln2_bias, requires_grad);
    lv.w_fc = g.leaf(l.w_fc, requires_grad);
    lv.w_proj = g.leaf(l.w_proj, requires_grad);
    v.layers.push_back(std::move(lv));
  }
  v.lnf_gain = g.leaf(p.lnf_gain, requires_grad);
  v.lnf_bias = g.leaf(p.lnf_bias, requires_grad);
  return v;
}

/// Copies leaf gradients into a Parameters-shaped container (zeros where no
/// gradient reached a leaf).
template <Real T>
Parameters<T> collect_gradients(const ParamVars<T>& vars, const Parameters<T>& like) {
  Parameters<T> out = like.zeros_like();
  std::vector<Tensor<T>*> dst;
  out.for_each([&dst](Tensor<T>& t) { dst.push_back(&t); });
  std::size_t i = 0;
  vars.for_each([&](const Var<T>& v) {
    auto gsrc = v.grad();
    if (!gsrc.empty()) std::copy(gsrc.begin(), gsrc.end(), dst[i]->data().begin());
    ++i;
  });
  return out;
}

template <Real T>
struct ForwardVars {
  Var<T> hidden;  // final hidden states h [T x d_model]
  Var<T> logits;  // h * W_e^T [T x vocab]
};

template <Real T>
struct ForwardTrace {
  Tensor<T> hidden;
  Tensor<T> logits;
};

inline void validate_tokens(const ModelConfig& cfg, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InputError("forward: empty token sequence");
  if (tokens.size() > cfg.max_seq_len) {
    throw InputError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  for (auto id : tokens) {
    if (id >= cfg.vocab_size) {
      throw InputError("forward: token id " + std::to_string(id) + " >= vocab_size " +
                       std::to_string(cfg.vocab_size));
    }
  }
}

/// Final hidden states for `tokens` (causal: row t depends on tokens <= t only).
template <Real T>
Var<T> forward_hidden(const ParamVars<T>& w, const ModelConfig& cfg, std::span<const TokenId> tokens) {
  validate_tokens(cfg, tokens);
  auto x = add(embedding(w.tok_emb, tokens), slice_rows(w.pos_emb, 0, tokens.size()));
  for (const auto& l : w.layers) {
    auto a = layer_norm(x, l.ln1_gain, l.ln1_bias);
    auto att = causal_self_attention(matmul(a, l.w_q), matmul(a, l.w_k), matmul(a, l.w_v), cfg.n_heads);
    x = add(x, matmul(att, l.w_o));
    auto m = layer_norm(x, l.ln2_gain, l.ln2_bias);
    x = add(x, matmul(gelu(matmul(m, l.w_fc)), l.w_proj));
  }
  return layer_norm(x, w.lnf_gain, w.lnf_bias);
}

template <Real T>
ForwardVars<T> forward(const ParamVars<T>& w, const ModelConfig& cfg, std::span<const TokenId> tokens) {
  auto h = forward_hidden(w, cfg, tokens);
  return {h, matmul_nt(h, w.tok_emb)};
}

/// Gradient-free forward pass.
template <Real T>
ForwardTrace<T> forward(const Parameters<T>& params, std::span<const TokenId> tokens) {
  Graph<T> g;
  auto w = bind_parameters(g, params, false);
  auto out = forward(w, params.config, tokens);
  return {out.hidden.value(), out.logits.value()};
}

/// Row j-1 of the logits predicts token j; targets j = 1..T-1 with
/// loss_mask[j] = 1 count toward the mean.
struct ShiftedTargets {
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> mask;
};

inline ShiftedTargets shift_targets(std::span<const TokenId> tokens, std::span<const std::uint8_t> loss_mask) {
  if (tokens.size() < 2) throw InputError("ntp_loss: need at least 2 tokens, got " + std::to_string(tokens.size()));
  if (loss_mask.size() != tokens.size()) {
    throw InputError("ntp_loss: mask length " + std::to_string(loss_mask.size()) + " != token count " +
                     std::to_string(tokens.size()));
  }
  ShiftedTargets s;
  s.targets.assign(tokens.size(), 0);
  s.mask.assign(tokens.size(), 0);
  for (std::size_t j = 1; j < tokens.size(); ++j) {
    s.targets[j - 1] = tokens[j];
    s.mask[j - 1] = loss_mask[j];
  }
  return s;
}

/// True when at least one position j >= 1 is masked in.
inline bool has_ntp_targets(std::span<const std::uint8_t> loss_mask) {
  for (std::size_t j = 1; j < loss_mask.size(); ++j) {
    if (loss_mask[j]) return true;
  }
  return false;
}

template <Real T>
Var<T> ntp_loss(const Var<T>& logits, std::span<const TokenId> tokens, std::span<const std::uint8_t> loss_mask) {
  auto s = shift_targets(tokens, loss_mask);
  return cross_entropy_masked(logits, s.targets, s.mask);
}

template <Real T>
double ntp_loss(const ForwardTrace<T>& trace, std::span<const TokenId> tokens,
                std::span<const std::uint8_t> loss_mask) {
  Graph<T> g;
  return static_cast<double>(ntp_loss(g.constant(trace.logits), tokens, loss_mask).value().item());
}

/// Sum and count of next-token NLL over masked-in targets, computed in double.
struct NllSum {
  double total = 0.0;
  std::size_t count = 0;
};

template <Real T>
NllSum ntp_nll_sum(const Tensor<T>& logits, std::span<const TokenId> tokens, std::span<const std::uint8_t> loss_mask) {
  auto s = shift_targets(tokens, loss_mask);
  NllSum out;
  for (std::size_t r = 0; r < s.targets.size(); ++r) {
    if (!s.mask[r]) continue;
    out.total += kernels::log_sum_exp(logits.row(r)) - static_cast<double>(logits.at(r, s.targets[r]));
    ++out.count;
  }
  return out;
}

/// Appends argmax tokens (lowest index on ties) until `stop_id` is emitted,
/// `max_new` tokens were added, or the context is full. Returns only the
/// continuation.
template <Real T>
std::vector<TokenId> greedy_decode(const Parameters<T>& params, std::span<const TokenId> prompt, std::size_t max_new,
                                   TokenId stop_id) {
  const auto& cfg = params.config;
  if (prompt.empty()) throw InputError("greedy_decode: empty prompt");
  validate_tokens(cfg, prompt);
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  const std::size_t d = cfg.d_model;
  std::vector<T> logits(cfg.vocab_size);
  while (out.size() < max_new && seq.size() < cfg.max_seq_len) {
    Graph<T> g;
    auto w = bind_parameters(g, params, false);
    const auto& h = forward_hidden(w, cfg, seq).value();
    kernels::matmul_nt(h.data().data() + (seq.size() - 1) * d, params.tok_emb.data().data(), logits.data(), 1, d,
                       cfg.vocab_size, false);
    const auto next = static_cast<TokenId>(kernels::argmax<T>(logits));
    out.push_back(next);
    seq.push_back(next);
    if (next == stop_id) break;
  }
  return out;
}

}  // namespace mixcpt
