// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

// Shared mini-batch loop used by CPT, SFT and DPO training: batch schedule,
// NaN abort, and the per-step metrics CSV.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mixcpt/error.hpp"
#include "mixcpt/model.hpp"
#include "mixcpt/optim.hpp"
#include "mixcpt/rng.hpp"

namespace mixcpt {

/// Example order for a run: either the stored order, cycled, or a fresh
/// seeded permutation per pass over the data.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t n_examples, std::optional<std::uint64_t> shuffle_seed)
      : n_(n_examples), seed_(shuffle_seed) {
    if (n_ == 0) throw InputError("training data is empty");
  }

  std::vector<std::size_t> batch(std::uint64_t step, std::size_t batch_size) {
    std::vector<std::size_t> out(batch_size);
    for (std::size_t b = 0; b < batch_size; ++b) out[b] = at(step * batch_size + b);
    return out;
  }

 private:
  std::size_t at(std::uint64_t flat) {
    const std::uint64_t pass = flat / n_;
    const std::size_t pos = static_cast<std::size_t>(flat % n_);
    if (!seed_) return pos;
    if (pass != pass_ || order_.empty()) {
      order_.resize(n_);
      for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
      Rng rng(*seed_ + pass);
      rng.shuffle(std::span<std::size_t>(order_));
      pass_ = pass;
    }
    return order_[pos];
  }

  std::size_t n_;
  std::optional<std::uint64_t> seed_;
  std::vector<std::size_t> order_;
  std::uint64_t pass_ = 0;
};

/// Append-only CSV writer; one row per step. A default-constructed writer
/// drops everything.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  MetricsWriter(const std::filesystem::path& path, const std::vector<std::string>& columns) {
    out_.open(path, std::ios::trunc);
    if (!out_) throw InputError("cannot open metrics file: " + path.string());
    for (std::size_t i = 0; i < columns.size(); ++i) out_ << (i ? "," : "") << columns[i];
    out_ << '\n';
  }

  void row(std::uint64_t step, const std::vector<double>& values) {
    if (!out_.is_open()) return;
    std::ostringstream line;
    line << step << std::setprecision(9);
    for (double v : values) line << ',' << v;
    out_ << line.str() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

struct LoopConfig {
  std::uint64_t steps = 100;
  std::size_t batch_size = 8;
  OptimConfig optim;

  void validate() const {
    if (steps < 1) throw ParameterError("steps must be >= 1");
    if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
    optim.validate();
  }
};

/// Called after each step with the 1-based global step index and the batch
/// means (objective first, then the example function's logged values).
using StepObserver = std::function<void(std::uint64_t, double, const std::vector<double>&)>;

/// Runs `cfg.steps` optimizer steps starting from `params`. `first_step` is
/// the global index of the first step (the checkpoint step count + 1).
template <Real T>
Parameters<T> sgd_loop(Parameters<T> params, BatchSchedule schedule, const ExampleFn<T>& fn, const LoopConfig& cfg,
                       std::uint64_t first_step, const StepObserver& observe = {}) {
  cfg.validate();
  Sgd<T> opt(cfg.optim, params);
  for (std::uint64_t s = 0; s < cfg.steps; ++s) {
    const std::uint64_t global = first_step + s;
    const auto batch = schedule.batch(s, cfg.batch_size);
    auto bg = batch_gradient(params, batch, fn);
    bool finite = std::isfinite(bg.objective) && bg.grad.all_finite();
    for (double v : bg.logged) finite = finite && std::isfinite(v);
    if (!finite) {
      throw NumericError("non-finite loss or gradient at step " + std::to_string(global), static_cast<long long>(global));
    }
    opt.step(params, bg.grad);
    if (!params.all_finite()) {
      throw NumericError("non-finite parameters after step " + std::to_string(global), static_cast<long long>(global));
    }
    if (observe) observe(global, bg.objective, bg.logged);
  }
  return params;
}

}  // namespace mixcpt
