// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

// Format alignment: chat templating, response-only perplexity scoring,
// perplexity-based sample selection, SFT and DPO.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mixcpt/checkpoint.hpp"
#include "mixcpt/datapipe.hpp"
#include "mixcpt/error.hpp"
#include "mixcpt/model.hpp"
#include "mixcpt/ops.hpp"
#include "mixcpt/parallel.hpp"
#include "mixcpt/rng.hpp"
#include "mixcpt/tokenizer.hpp"
#include "mixcpt/trainer.hpp"

namespace mixcpt {

inline constexpr std::size_t kDefaultSftSelect = 10000;
inline constexpr std::size_t kDefaultDpoSelect = 5000;
inline constexpr double kDefaultSftDpoRatio = 2.0;
inline constexpr double kDefaultDpoBeta = 0.1;

/// [ST] [UT] q [AT] r [SEP]; the response span [begin, end) covers r and the
/// trailing SEP.
struct ChatSample {
  std::vector<TokenId> tokens;
  std::size_t span_begin = 0;
  std::size_t span_end = 0;

  std::vector<std::uint8_t> span_mask() const {
    std::vector<std::uint8_t> m(tokens.size(), 0);
    for (std::size_t i = span_begin; i < span_end; ++i) m[i] = 1;
    return m;
  }
};

inline std::vector<TokenId> chat_prompt(std::string_view query) {
  if (query.empty()) throw InputError("chat template: empty query");
  std::vector<TokenId> ids = {special::kSystem, special::kUser};
  const auto q = tokenize(query);
  ids.insert(ids.end(), q.begin(), q.end());
  ids.push_back(special::kAssistant);
  return ids;
}

inline ChatSample apply_chat_template(std::string_view query, std::string_view response) {
  if (response.empty()) throw InputError("chat template: empty response");
  ChatSample s;
  s.tokens = chat_prompt(query);
  s.span_begin = s.tokens.size();
  const auto r = tokenize(response);
  s.tokens.insert(s.tokens.end(), r.begin(), r.end());
  s.tokens.push_back(special::kSep);
  s.span_end = s.tokens.size();
  return s;
}

inline ChatSample apply_chat_template(const InstructionPair& p) { return apply_chat_template(p.query, p.response); }

namespace detail {

inline void require_fits(const ChatSample& s, const ModelConfig& cfg) {
  if (s.tokens.size() > cfg.max_seq_len) {
    throw InputError("templated sample of " + std::to_string(s.tokens.size()) + " tokens exceeds context of " +
                     std::to_string(cfg.max_seq_len));
  }
}

inline InstructionPair scored_pair(const Record& r) {
  if (const auto* p = std::get_if<InstructionPair>(&r)) return *p;
  if (const auto* t = std::get_if<PreferenceTriple>(&r)) return positive_pair(*t);
  throw InputError("only instruction pairs and preference triples can be scored");
}

}  // namespace detail

/// Sum of log-probabilities of the span tokens given everything before them.
template <Real T>
Var<T> response_log_prob(const ParamVars<T>& w, const ModelConfig& cfg, const ChatSample& s) {
  detail::require_fits(s, cfg);
  auto logits = forward(w, cfg, std::span<const TokenId>(s.tokens)).logits;
  const auto count = static_cast<double>(s.span_end - s.span_begin);
  return scale(ntp_loss(logits, s.tokens, s.span_mask()), -count);
}

template <Real T>
NllSum response_nll(const Parameters<T>& params, const ChatSample& s) {
  detail::require_fits(s, params.config);
  const auto trace = forward(params, std::span<const TokenId>(s.tokens));
  return ntp_nll_sum(trace.logits, s.tokens, s.span_mask());
}

/// exp of the mean NLL over the response span; triples are scored on their
/// chosen response.
template <Real T>
double response_perplexity(const Parameters<T>& params, const InstructionPair& p) {
  const auto nll = response_nll(params, apply_chat_template(p));
  return std::exp(nll.total / static_cast<double>(nll.count));
}

template <Real T>
double response_perplexity(const Parameters<T>& params, const PreferenceTriple& t) {
  return response_perplexity(params, positive_pair(t));
}

template <Real T>
double response_perplexity(const Parameters<T>& params, const Record& r) {
  return response_perplexity(params, detail::scored_pair(r));
}

struct ScoredSample {
  std::size_t index = 0;
  Record record;
  double perplexity = 0.0;
};

/// Scores every record independently; results are in input order.
template <Real T>
std::vector<ScoredSample> score_samples(const Parameters<T>& params, const std::vector<Record>& records) {
  std::vector<ScoredSample> out(records.size());
  parallel_for(records.size(), [&](std::size_t i) {
    out[i] = {i, records[i], response_perplexity(params, records[i])};
  });
  return out;
}

enum class SelectionStrategy { kRandom, kEasiest, kHardest, kEasyHard };

inline SelectionStrategy parse_strategy(std::string_view s) {
  if (s == "R") return SelectionStrategy::kRandom;
  if (s == "E") return SelectionStrategy::kEasiest;
  if (s == "H") return SelectionStrategy::kHardest;
  if (s == "EH") return SelectionStrategy::kEasyHard;
  throw ParameterError("unknown selection strategy '" + std::string(s) + "' (expected R, E, H or EH)");
}

inline std::string_view to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::kRandom:
      return "R";
    case SelectionStrategy::kEasiest:
      return "E";
    case SelectionStrategy::kHardest:
      return "H";
    case SelectionStrategy::kEasyHard:
      return "EH";
  }
  return "?";
}

struct SelectionConfig {
  std::size_t k = kDefaultSftSelect;
  SelectionStrategy strategy = SelectionStrategy::kEasiest;
  std::uint64_t seed = 0;

  void validate() const {
    if (k < 1) throw ParameterError("selection K must be >= 1");
  }
};

struct Selection {
  std::vector<ScoredSample> samples;  // sorted by original index
  bool oversize = false;              // K >= number of candidates; everything returned
};

/// Easiest = lowest perplexity. Ties go to the lower original index.
inline Selection select_samples(std::vector<ScoredSample> scored, const SelectionConfig& cfg) {
  cfg.validate();
  Selection out;
  auto by_index = [](const ScoredSample& a, const ScoredSample& b) { return a.index < b.index; };
  if (cfg.k >= scored.size()) {
    out.oversize = cfg.k > scored.size();
    std::sort(scored.begin(), scored.end(), by_index);
    out.samples = std::move(scored);
    return out;
  }
  auto easy_first = [](const ScoredSample& a, const ScoredSample& b) {
    return a.perplexity != b.perplexity ? a.perplexity < b.perplexity : a.index < b.index;
  };
  auto hard_first = [](const ScoredSample& a, const ScoredSample& b) {
    return a.perplexity != b.perplexity ? a.perplexity > b.perplexity : a.index < b.index;
  };
  const std::size_t k = cfg.k;
  switch (cfg.strategy) {
    case SelectionStrategy::kEasiest:
      std::sort(scored.begin(), scored.end(), easy_first);
      scored.resize(k);
      break;
    case SelectionStrategy::kHardest:
      std::sort(scored.begin(), scored.end(), hard_first);
      scored.resize(k);
      break;
    case SelectionStrategy::kEasyHard: {
      std::sort(scored.begin(), scored.end(), easy_first);
      const std::size_t n_easy = (k + 1) / 2, n_hard = k / 2;
      std::vector<ScoredSample> rest(scored.begin() + static_cast<std::ptrdiff_t>(n_easy), scored.end());
      scored.resize(n_easy);
      std::sort(rest.begin(), rest.end(), hard_first);
      scored.insert(scored.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_hard));
      break;
    }
    case SelectionStrategy::kRandom: {
      std::sort(scored.begin(), scored.end(), by_index);
      Rng rng(cfg.seed);
      // Partial Fisher-Yates: the first k positions receive the sample.
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(scored.size() - i));
        std::swap(scored[i], scored[j]);
      }
      scored.resize(k);
      break;
    }
  }
  std::sort(scored.begin(), scored.end(), by_index);
  out.samples = std::move(scored);
  return out;
}

/// One {"index", "ppl"} line per sample.
inline void write_scores(const std::filesystem::path& path, const std::vector<ScoredSample>& samples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot open for writing: " + path.string());
  for (const auto& s : samples) out << nlohmann::json{{"index", s.index}, {"ppl", s.perplexity}}.dump() << '\n';
}

/// The selected records in their input schema, in selection order.
inline std::vector<Record> selected_records(const Selection& sel) {
  std::vector<Record> out;
  out.reserve(sel.samples.size());
  for (const auto& s : sel.samples) out.push_back(s.record);
  return out;
}

inline std::vector<ScoredSample> read_scores(const std::filesystem::path& path, const std::vector<Record>& records) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open scores file: " + path.string());
  std::vector<ScoredSample> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("line " + std::to_string(n) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("index") || !j.contains("ppl") || !j["index"].is_number_unsigned() ||
        !j["ppl"].is_number()) {
      throw ParseError("line " + std::to_string(n) + ": expected {\"index\": int, \"ppl\": number}");
    }
    const auto idx = j["index"].get<std::size_t>();
    if (idx >= records.size()) throw InputError("line " + std::to_string(n) + ": index out of range");
    out.push_back({idx, records[idx], j["ppl"].get<double>()});
  }
  return out;
}

// ---------------------------------------------------------------------------
// SFT

/// Mean cross-entropy over the response span of the templated sample.
template <Real T>
Var<T> sft_loss(const ParamVars<T>& w, const ModelConfig& cfg, const InstructionPair& p) {
  const auto s = apply_chat_template(p);
  detail::require_fits(s, cfg);
  auto logits = forward(w, cfg, std::span<const TokenId>(s.tokens)).logits;
  return ntp_loss(logits, s.tokens, s.span_mask());
}

template <Real T>
double sft_loss(const Parameters<T>& params, const InstructionPair& p) {
  Graph<T> g;
  auto w = bind_parameters(g, params, false);
  return static_cast<double>(sft_loss(w, params.config, p).value().item());
}

struct SftConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double clip_norm = 1.0;
  std::uint64_t steps = 100;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;

  LoopConfig loop() const { return {steps, batch_size, OptimConfig{lr, momentum, clip_norm}}; }
};

inline const std::vector<std::string>& sft_metric_columns() {
  static const std::vector<std::string> cols = {"step", "loss"};
  return cols;
}

/// Samples are visited in a fresh seeded permutation per pass.
inline Checkpoint train_sft(const Checkpoint& start, const std::vector<InstructionPair>& samples,
                            const SftConfig& cfg,
                            const std::optional<std::filesystem::path>& metrics_path = std::nullopt,
                            std::vector<double>* history = nullptr) {
  if (samples.empty()) throw InputError("train_sft: empty sample set");
  const auto& mcfg = start.config();
  for (const auto& p : samples) detail::require_fits(apply_chat_template(p), mcfg);
  ExampleFn<float> fn = [&](Graph<float>&, const ParamVars<float>& w, std::size_t i) {
    return ExampleLoss<float>{sft_loss(w, mcfg, samples[i]), {}};
  };
  MetricsWriter writer;
  if (metrics_path) writer = MetricsWriter(*metrics_path, sft_metric_columns());
  StepObserver observe = [&](std::uint64_t step, double objective, const std::vector<double>&) {
    writer.row(step, {objective});
    if (history) history->push_back(objective);
  };
  Checkpoint out;
  out.params = sgd_loop(start.params, BatchSchedule(samples.size(), cfg.seed), fn, cfg.loop(), start.step + 1, observe);
  out.step = start.step + cfg.steps;
  out.seed = cfg.seed;
  return out;
}

// ---------------------------------------------------------------------------
// DPO

/// Summed log-probabilities of the chosen and rejected responses.
struct PairLogProbs {
  double chosen = 0.0;
  double rejected = 0.0;
};

template <Real T>
PairLogProbs pair_log_probs(const Parameters<T>& params, const PreferenceTriple& t) {
  return {-response_nll(params, apply_chat_template(t.query, t.chosen)).total,
          -response_nll(params, apply_chat_template(t.query, t.rejected)).total};
}

inline void validate_beta(double beta) {
  if (!(beta > 0.0)) throw ParameterError("DPO beta must be > 0, got " + std::to_string(beta));
}

/// -log sigmoid(margin) with margin = beta * [(lp+ - ref+) - (lp- - ref-)],
/// written as softplus(-margin).
template <Real T>
Var<T> dpo_loss(const ParamVars<T>& w, const ModelConfig& cfg, const PreferenceTriple& t,
                const PairLogProbs& ref, double beta) {
  validate_beta(beta);
  auto chosen = response_log_prob(w, cfg, apply_chat_template(t.query, t.chosen));
  auto rejected = response_log_prob(w, cfg, apply_chat_template(t.query, t.rejected));
  auto& g = chosen.graph();
  auto offset = g.constant(Tensor<T>::scalar(static_cast<T>(beta * (ref.chosen - ref.rejected))));
  auto neg_margin = add(scale(sub(chosen, rejected), -beta), offset);
  return softplus(neg_margin);
}

/// Policy log-probabilities minus reference ones, scaled by beta.
template <Real T>
double implicit_reward_margin(const Parameters<T>& policy, const Parameters<T>& reference, const PreferenceTriple& t,
                              double beta) {
  validate_beta(beta);
  const auto ref = pair_log_probs(reference, t);
  const auto pol = pair_log_probs(policy, t);
  return beta * ((pol.chosen - ref.chosen) - (pol.rejected - ref.rejected));
}

/// -log sigmoid of the beta-scaled log-ratio margin.
inline double dpo_loss(const PairLogProbs& policy, const PairLogProbs& reference, double beta) {
  validate_beta(beta);
  return kernels::softplus(-beta * ((policy.chosen - reference.chosen) - (policy.rejected - reference.rejected)));
}

/// Scalar DPO loss computed in double from the two models' log-probabilities.
template <Real T>
double dpo_loss(const Parameters<T>& policy, const Parameters<T>& reference, const PreferenceTriple& t, double beta) {
  return dpo_loss(pair_log_probs(policy, t), pair_log_probs(reference, t), beta);
}

struct DpoConfig {
  double beta = kDefaultDpoBeta;
  double lr = 0.05;
  double momentum = 0.9;
  double clip_norm = 1.0;
  std::uint64_t steps = 100;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;

  void validate() const { validate_beta(beta); }
  LoopConfig loop() const { return {steps, batch_size, OptimConfig{lr, momentum, clip_norm}}; }
};

inline const std::vector<std::string>& dpo_metric_columns() {
  static const std::vector<std::string> cols = {"step", "loss", "margin"};
  return cols;
}

/// The reference model is frozen; its log-probabilities are computed once.
inline Checkpoint train_dpo(const Checkpoint& start, const Checkpoint& reference,
                            const std::vector<PreferenceTriple>& triples, const DpoConfig& cfg,
                            const std::optional<std::filesystem::path>& metrics_path = std::nullopt,
                            std::vector<double>* history = nullptr) {
  cfg.validate();
  if (triples.empty()) throw InputError("train_dpo: empty triple set");
  const auto& mcfg = start.config();
  if (!(reference.config() == mcfg)) throw ParameterError("DPO policy and reference configs differ");
  std::vector<PairLogProbs> refs(triples.size());
  parallel_for(triples.size(), [&](std::size_t i) { refs[i] = pair_log_probs(reference.params, triples[i]); });
  ExampleFn<float> fn = [&](Graph<float>&, const ParamVars<float>& w, std::size_t i) {
    auto loss = dpo_loss(w, mcfg, triples[i], refs[i], cfg.beta);
    // softplus(-m) = l  =>  m = -log(exp(l) - 1)
    const double l = static_cast<double>(loss.value().item());
    return ExampleLoss<float>{loss, {-std::log(std::expm1(l))}};
  };
  MetricsWriter writer;
  if (metrics_path) writer = MetricsWriter(*metrics_path, dpo_metric_columns());
  StepObserver observe = [&](std::uint64_t step, double objective, const std::vector<double>& logged) {
    writer.row(step, {objective, logged.at(0)});
    if (history) history->push_back(objective);
  };
  Checkpoint out;
  out.params = sgd_loop(start.params, BatchSchedule(triples.size(), cfg.seed), fn, cfg.loop(), start.step + 1, observe);
  out.step = start.step + cfg.steps;
  out.seed = cfg.seed;
  return out;
}

}  // namespace mixcpt
