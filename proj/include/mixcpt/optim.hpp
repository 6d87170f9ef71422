// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mixcpt/error.hpp"
#include "mixcpt/graph.hpp"
#include "mixcpt/model.hpp"
#include "mixcpt/parallel.hpp"

namespace mixcpt {

/// Mini-batch gradient descent with fixed learning rate and optional heavy-ball
/// momentum. clip_norm > 0 rescales the batch gradient to that global L2 norm
/// when it is exceeded.
struct OptimConfig {
  double lr = 0.1;
  double momentum = 0.0;
  double clip_norm = 0.0;

  void validate() const {
    if (!(lr > 0.0)) throw ParameterError("learning rate must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ParameterError("momentum must be in [0, 1)");
    if (clip_norm < 0.0) throw ParameterError("clip_norm must be >= 0");
  }
};

template <Real T>
class Sgd {
 public:
  Sgd(OptimConfig cfg, const Parameters<T>& like) : cfg_(cfg) {
    cfg_.validate();
    if (cfg_.momentum > 0.0) velocity_.assign(like.count(), 0.0);
  }

  void step(Parameters<T>& params, const Parameters<T>& grad) {
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      grad.for_each([&sq](const Tensor<T>& t) {
        for (auto v : t.data()) sq += static_cast<double>(v) * static_cast<double>(v);
      });
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }
    std::vector<const Tensor<T>*> gs;
    grad.for_each([&gs](const Tensor<T>& t) { gs.push_back(&t); });
    std::size_t ti = 0, offset = 0;
    params.for_each([&](Tensor<T>& p) {
      const auto gv = gs[ti++]->data();
      auto pv = p.data();
      for (std::size_t i = 0; i < pv.size(); ++i) {
        double upd = scale * static_cast<double>(gv[i]);
        if (!velocity_.empty()) {
          velocity_[offset + i] = cfg_.momentum * velocity_[offset + i] + upd;
          upd = velocity_[offset + i];
        }
        pv[i] = static_cast<T>(static_cast<double>(pv[i]) - cfg_.lr * upd);
      }
      offset += pv.size();
    });
    ++steps_;
  }

  std::uint64_t steps() const noexcept { return steps_; }

 private:
  OptimConfig cfg_;
  std::vector<double> velocity_;
  std::uint64_t steps_ = 0;
};

template <Real T>
struct ExampleLoss {
  Var<T> objective;
  std::vector<double> logged;  // per-example diagnostics, averaged over the batch
};

template <Real T>
using ExampleFn = std::function<ExampleLoss<T>(Graph<T>&, const ParamVars<T>&, std::size_t)>;

template <Real T>
struct BatchGradient {
  Parameters<T> grad;
  double objective = 0.0;
  std::vector<double> logged;
};

/// Mean objective and mean gradient over a batch. Examples may run on worker
/// threads; per-example gradients are summed in batch order so the result is
/// independent of the thread count.
template <Real T>
BatchGradient<T> batch_gradient(const Parameters<T>& params, std::span<const std::size_t> examples,
                                const ExampleFn<T>& fn) {
  if (examples.empty()) throw InputError("batch_gradient: empty batch");
  const std::size_t n = examples.size();
  std::vector<std::vector<T>> grads(n);
  std::vector<double> objectives(n);
  std::vector<std::vector<double>> logged(n);
  parallel_for(n, [&](std::size_t i) {
    Graph<T> g;
    auto w = bind_parameters(g, params, true);
    auto res = fn(g, w, examples[i]);
    objectives[i] = static_cast<double>(res.objective.value().item());
    logged[i] = std::move(res.logged);
    g.backward(res.objective);
    grads[i] = collect_gradients(w, params).flatten();
  });
  BatchGradient<T> out;
  const double inv = 1.0 / static_cast<double>(n);
  std::vector<double> acc(grads[0].size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += static_cast<double>(grads[i][k]);
    out.objective += objectives[i];
    if (out.logged.size() < logged[i].size()) out.logged.resize(logged[i].size(), 0.0);
    for (std::size_t k = 0; k < logged[i].size(); ++k) out.logged[k] += logged[i][k];
  }
  out.objective *= inv;
  for (auto& v : out.logged) v *= inv;
  out.grad = params.zeros_like();
  std::size_t offset = 0;
  out.grad.for_each([&](Tensor<T>& t) {
    for (auto& v : t.data()) v = static_cast<T>(acc[offset++] * inv);
  });
  return out;
}

}  // namespace mixcpt
