// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

// Logit swap self-distillation: a frozen copy of the pre-CPT model supplies
// teacher logits whose top-1 entry is exchanged with the gold token's entry;
// the student is pulled toward that distribution by KL(student || teacher)
// while also training on next-token prediction.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mixcpt/checkpoint.hpp"
#include "mixcpt/datapipe.hpp"
#include "mixcpt/error.hpp"
#include "mixcpt/kernels.hpp"
#include "mixcpt/model.hpp"
#include "mixcpt/ops.hpp"
#include "mixcpt/trainer.hpp"

namespace mixcpt {

/// Read-only snapshot of the model taken before continual pre-training.
template <Real T = float>
class FrozenTeacher {
 public:
  explicit FrozenTeacher(Parameters<T> params) : params_(std::move(params)) {}

  const Parameters<T>& parameters() const noexcept { return params_; }
  const ModelConfig& config() const noexcept { return params_.config; }

  /// Logits for `tokens`, computed without any gradient tracking.
  Tensor<T> logits(std::span<const TokenId> tokens) const { return forward(params_, tokens).logits; }

 private:
  const Parameters<T> params_;
};

template <Real T>
Tensor<T> teacher_logits(const FrozenTeacher<T>& teacher, std::span<const TokenId> tokens,
                         const ModelConfig& student_config) {
  if (!(teacher.config() == student_config)) {
    throw ParameterError("teacher and student model configs differ");
  }
  return teacher.logits(tokens);
}

/// Exchanges, in place, the entry of the row maximum (lowest index on ties)
/// with the entry of `gold`. Leaves the row untouched when they coincide.
template <Real T>
void swap_top1_with_gold(std::span<T> row, TokenId gold) {
  if (gold >= row.size()) {
    throw IndexError("swap: gold id " + std::to_string(gold) + " out of range for " + std::to_string(row.size()) +
                     " logits");
  }
  const std::size_t top = kernels::argmax<T>(row);
  if (top != gold) std::swap(row[top], row[gold]);
}

template <Real T>
Tensor<T> swap_teacher_logits(std::span<const T> row, TokenId gold) {
  Tensor<T> out({row.size()});
  std::copy(row.begin(), row.end(), out.data().begin());
  swap_top1_with_gold<T>(out.data(), gold);
  return out;
}

/// Log-softmax of the swapped teacher rows. Row j-1 is swapped against gold
/// token j; the last row has no gold and is left as is.
template <Real T>
Tensor<T> swapped_teacher_log_probs(const Tensor<T>& teacher, std::span<const TokenId> tokens) {
  if (teacher.rank() != 2 || teacher.rows() != tokens.size()) {
    throw ShapeError("teacher logits " + shape_str(teacher.shape()) + " do not match " +
                     std::to_string(tokens.size()) + " tokens");
  }
  Tensor<T> swapped = teacher;
  for (std::size_t j = 1; j < tokens.size(); ++j) swap_top1_with_gold<T>(swapped.row(j - 1), tokens[j]);
  return kernels::log_softmax_rows(swapped);
}

/// Mean over masked-in rows of KL(P_student || P_teacher-swapped). Rows follow
/// the next-token alignment: row j-1 counts when loss_mask[j] = 1. Gradient
/// flows only into `student_logits`.
template <Real T>
Var<T> lssd_loss(const Var<T>& student_logits, const Tensor<T>& teacher_logits, std::span<const TokenId> tokens,
                 std::span<const std::uint8_t> loss_mask) {
  if (student_logits.shape() != teacher_logits.shape()) {
    throw ShapeError("lssd_loss: student logits " + shape_str(student_logits.shape()) + " vs teacher " +
                     shape_str(teacher_logits.shape()));
  }
  const auto shifted = shift_targets(tokens, loss_mask);
  auto& g = student_logits.graph();
  auto log_q = g.constant(swapped_teacher_log_probs(teacher_logits, tokens));
  try {
    return kl_divergence_rows(row_softmax(student_logits), log_q, shifted.mask);
  } catch (const InputError&) {
    throw InputError("lssd_loss: empty loss support (mask selects no rows)");
  }
}

/// Value-only form on plain tensors.
template <Real T>
double lssd_loss_value(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                       std::span<const TokenId> tokens, std::span<const std::uint8_t> loss_mask) {
  Graph<T> g;
  return static_cast<double>(lssd_loss(g.constant(student_logits), teacher_logits, tokens, loss_mask).value().item());
}

inline void validate_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("alpha must be in [0, 1], got " + std::to_string(alpha));
}

/// alpha * ntp + (1 - alpha) * lssd
inline double cpt_loss(double ntp, double lssd, double alpha) {
  validate_alpha(alpha);
  return alpha * ntp + (1.0 - alpha) * lssd;
}

template <Real T>
Var<T> cpt_loss(const Var<T>& ntp, const Var<T>& lssd, double alpha) {
  validate_alpha(alpha);
  return add(scale(ntp, alpha), scale(lssd, 1.0 - alpha));
}

struct TrainConfig {
  double alpha = 0.5;
  double lr = 0.1;
  double momentum = 0.0;
  double clip_norm = 0.0;
  std::uint64_t steps = 100;
  std::size_t batch_size = 8;
  std::size_t max_seq_len = 64;
  std::uint64_t seed = 0;
  /// Compute the LSSD value for the metrics even when alpha = 1 (it never
  /// enters the gradient then).
  bool log_unused_lssd = true;

  void validate() const {
    validate_alpha(alpha);
    loop().validate();
    if (max_seq_len < 2) throw ParameterError("max_seq_len must be >= 2");
  }

  LoopConfig loop() const { return {steps, batch_size, OptimConfig{lr, momentum, clip_norm}}; }
};

inline const std::vector<std::string>& cpt_metric_columns() {
  static const std::vector<std::string> cols = {"step", "ntp", "lssd", "total"};
  return cols;
}

/// Blocks that contribute at least one next-token target, in stream order.
inline std::vector<const PackedBlock*> trainable_blocks(std::span<const PackedBlock> data, std::size_t max_seq_len) {
  std::vector<const PackedBlock*> out;
  for (const auto& b : data) {
    if (b.tokens.size() != max_seq_len || b.mask.size() != max_seq_len) {
      throw InputError("block length " + std::to_string(b.tokens.size()) + " does not match max_seq_len " +
                       std::to_string(max_seq_len));
    }
    if (has_ntp_targets(b.mask)) out.push_back(&b);
  }
  return out;
}

struct CptStepMetrics {
  std::uint64_t step = 0;
  double ntp = 0.0;
  double lssd = 0.0;
  double total = 0.0;
};

/// Mix-CPT: the teacher is a snapshot of `start`; blocks are visited in
/// stream order, cycling when exhausted. Every step writes one metrics row
/// when `metrics_path` is set.
inline Checkpoint train_mix_cpt(const Checkpoint& start, std::span<const PackedBlock> data, const TrainConfig& cfg,
                                const std::optional<std::filesystem::path>& metrics_path = std::nullopt,
                                std::vector<CptStepMetrics>* history = nullptr) {
  cfg.validate();
  const auto& mcfg = start.config();
  if (mcfg.vocab_size != kTokenizerVocabSize) {
    throw ParameterError("checkpoint vocab_size " + std::to_string(mcfg.vocab_size) + " does not match tokenizer (" +
                         std::to_string(kTokenizerVocabSize) + ")");
  }
  if (cfg.max_seq_len > mcfg.max_seq_len) throw ParameterError("max_seq_len exceeds the model context");
  if (data.empty()) throw InputError("train_mix_cpt: empty training data");
  const auto blocks = trainable_blocks(data, cfg.max_seq_len);
  if (blocks.empty()) throw InputError("train_mix_cpt: no block has a next-token target");

  const FrozenTeacher<float> teacher(start.params);
  const bool use_teacher = cfg.alpha < 1.0;
  const bool want_lssd = use_teacher || cfg.log_unused_lssd;
  ExampleFn<float> fn = [&](Graph<float>&, const ParamVars<float>& w, std::size_t i) {
    const auto& b = *blocks[i];
    auto f = forward(w, mcfg, std::span<const TokenId>(b.tokens));
    auto ntp = ntp_loss(f.logits, b.tokens, b.mask);
    if (!want_lssd) {
      return ExampleLoss<float>{ntp, {static_cast<double>(ntp.value().item()), 0.0}};
    }
    const auto t_logits = teacher_logits(teacher, b.tokens, mcfg);
    if (!use_teacher) {
      const double l = lssd_loss_value(f.logits.value(), t_logits, b.tokens, b.mask);
      return ExampleLoss<float>{ntp, {static_cast<double>(ntp.value().item()), l}};
    }
    auto lssd = lssd_loss(f.logits, t_logits, b.tokens, b.mask);
    auto total = cpt_loss(ntp, lssd, cfg.alpha);
    return ExampleLoss<float>{total, {static_cast<double>(ntp.value().item()), static_cast<double>(lssd.value().item())}};
  };

  MetricsWriter writer;
  if (metrics_path) writer = MetricsWriter(*metrics_path, cpt_metric_columns());
  StepObserver observe = [&](std::uint64_t step, double objective, const std::vector<double>& logged) {
    const double ntp = logged.at(0), lssd = logged.at(1);
    // At alpha = 1 the objective is the NTP loss alone.
    const double total = use_teacher ? objective : ntp;
    writer.row(step, {ntp, lssd, total});
    if (history) history->push_back({step, ntp, lssd, total});
  };

  Checkpoint out;
  out.params = sgd_loop(start.params, BatchSchedule(blocks.size(), std::nullopt), fn, cfg.loop(), start.step + 1,
                        observe);
  out.step = start.step + cfg.steps;
  out.seed = cfg.seed;
  return out;
}

}  // namespace mixcpt
