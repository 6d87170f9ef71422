// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

// Desk-scale evaluation: corpus perplexity, probe exact match, forgetting
// gap, and the end-to-end experiment runner comparing CPT-only against
// Mix-CPT with and without self-distillation.

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mixcpt/align.hpp"
#include "mixcpt/checkpoint.hpp"
#include "mixcpt/datapipe.hpp"
#include "mixcpt/error.hpp"
#include "mixcpt/hash.hpp"
#include "mixcpt/lssd.hpp"
#include "mixcpt/model.hpp"
#include "mixcpt/parallel.hpp"
#include "mixcpt/rng.hpp"
#include "mixcpt/synth.hpp"

namespace mixcpt {

/// exp of the mean NLL over every masked-in next-token target of the corpus.
template <Real T>
double corpus_perplexity(const Parameters<T>& params, std::span<const PackedBlock> blocks) {
  if (blocks.empty()) throw InputError("corpus_perplexity: empty corpus");
  std::vector<NllSum> parts(blocks.size());
  parallel_for(blocks.size(), [&](std::size_t i) {
    const auto& b = blocks[i];
    if (!has_ntp_targets(b.mask)) return;
    parts[i] = ntp_nll_sum(forward(params, std::span<const TokenId>(b.tokens)).logits, b.tokens, b.mask);
  });
  NllSum total;
  for (const auto& p : parts) {
    total.total += p.total;
    total.count += p.count;
  }
  if (total.count == 0) throw InputError("corpus_perplexity: no masked-in targets");
  return std::exp(total.total / static_cast<double>(total.count));
}

/// Trim surrounding whitespace, then lowercase.
inline std::string normalize_answer(std::string_view s) {
  auto space = [](unsigned char c) { return std::isspace(c) != 0; };
  while (!s.empty() && space(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && space(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline constexpr std::size_t kProbeMaxNewTokens = 32;

/// Greedy answer to the templated prompt, special ids dropped.
template <Real T>
std::string answer_probe(const Parameters<T>& params, std::string_view query,
                         std::size_t max_new = kProbeMaxNewTokens) {
  const auto prompt = chat_prompt(query);
  if (prompt.size() >= params.config.max_seq_len) {
    throw InputError("probe prompt of " + std::to_string(prompt.size()) + " tokens exceeds context of " +
                     std::to_string(params.config.max_seq_len));
  }
  const auto out = greedy_decode(params, std::span<const TokenId>(prompt), max_new, special::kSep);
  return detokenize(out, SpecialIds::kSkip);
}

/// Fraction of probes whose normalized greedy answer equals the normalized gold.
template <Real T>
double exact_match_probes(const Parameters<T>& params, const std::vector<InstructionPair>& probes,
                          std::size_t max_new = kProbeMaxNewTokens) {
  if (probes.empty()) throw InputError("exact_match_probes: empty probe set");
  std::vector<std::uint8_t> hit(probes.size(), 0);
  parallel_for(probes.size(), [&](std::size_t i) {
    hit[i] = normalize_answer(answer_probe(params, probes[i].query, max_new)) == normalize_answer(probes[i].response);
  });
  return static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / static_cast<double>(probes.size());
}

/// General-corpus perplexity after minus before; positive means forgetting.
template <Real T>
double forgetting_gap(const Parameters<T>& before, const Parameters<T>& after, std::span<const PackedBlock> general) {
  if (!(before.config == after.config)) throw ParameterError("forgetting_gap: model configs differ");
  return corpus_perplexity(after, general) - corpus_perplexity(before, general);
}

// ---------------------------------------------------------------------------
// Experiment

struct EvalReport {
  std::string arm;
  double domain_ppl = 0.0;
  double general_ppl = 0.0;
  double forgetting_gap = 0.0;
  double probe_em = 0.0;
};

inline constexpr std::string_view kArmBase = "base";
inline constexpr std::string_view kArmCptOnly = "CPT-only";
inline constexpr std::string_view kArmMixNoKd = "Mix-CPT-noKD";
inline constexpr std::string_view kArmMix = "Mix-CPT";

inline constexpr std::string_view kReportHeader = "arm,domain_ppl,general_ppl,forgetting_gap,probe_em";

inline std::string format_reports(const std::vector<EvalReport>& reports) {
  std::ostringstream out;
  out << kReportHeader << '\n' << std::setprecision(9);
  for (const auto& r : reports) {
    out << r.arm << ',' << r.domain_ppl << ',' << r.general_ppl << ',' << r.forgetting_gap << ',' << r.probe_em
        << '\n';
  }
  return out.str();
}

inline void write_reports(const std::filesystem::path& path, const std::vector<EvalReport>& reports) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot open for writing: " + path.string());
  out << format_reports(reports);
}

/// Training knobs shared by the pre-training and CPT stages.
struct StageConfig {
  std::uint64_t steps = 1000;
  std::size_t batch_size = 8;
  double lr = 0.5;
  double momentum = 0.9;
  double clip_norm = 1.0;
  std::size_t epochs = 1;  // passes over the data, each in a fresh seeded order
};

// Defaults: a ~250k-parameter model, base and CPT stages sized so the
// forgetting scenario finishes in about five minutes on one core.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  ModelConfig model = default_model();
  SynthConfig synth;
  StageConfig base = {1500, 8, 0.3, 0.9, 1.0, 20};
  StageConfig cpt = {500, 8, 0.3, 0.9, 1.0, 20};
  double alpha = 0.5;
  std::size_t domain_repeat = 1;  // copies of each domain document in the mixture
  SftConfig sft = default_sft();
  std::size_t sft_k = 64;
  SelectionStrategy sft_strategy = SelectionStrategy::kEasiest;
  DpoConfig dpo = default_dpo();
  std::size_t align_budget = 96;  // SFT + DPO samples for the ratio ablation
  std::vector<double> alpha_grid = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<std::pair<int, int>> ratio_grid = {{1, 2}, {1, 1}, {2, 1}, {3, 1}, {4, 1}};
  std::optional<std::filesystem::path> cache_dir;  // base checkpoints are reused from here

  static ModelConfig default_model() {
    ModelConfig m;
    m.d_model = 96;
    m.n_layers = 2;
    m.n_heads = 4;
    m.max_seq_len = 64;
    return m;
  }
  static SftConfig default_sft() {
    SftConfig c;
    c.steps = 96;
    c.lr = 0.02;
    return c;
  }
  static DpoConfig default_dpo() {
    DpoConfig c;
    c.steps = 200;
    c.lr = 0.002;
    return c;
  }

  void validate() const {
    model.validate();
    synth.validate();
    validate_alpha(alpha);
    for (double a : alpha_grid) validate_alpha(a);
    if (model.vocab_size != kTokenizerVocabSize) throw ParameterError("model vocab_size must be 261");
    if (domain_repeat < 1 || base.epochs < 1 || cpt.epochs < 1) {
      throw ParameterError("domain_repeat and epochs must be >= 1");
    }
    if (sft_k < 1 || align_budget < 2) throw ParameterError("sft_k must be >= 1 and align_budget >= 2");
    dpo.validate();
  }
};

/// `epochs` passes over `samples`, each pass in its own seeded order.
inline std::vector<UnifiedSample> epoch_stream(const std::vector<UnifiedSample>& samples, std::size_t epochs,
                                               std::uint64_t seed) {
  std::vector<UnifiedSample> out;
  out.reserve(samples.size() * epochs);
  for (std::size_t e = 0; e < epochs; ++e) {
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed + e);
    rng.shuffle(std::span<std::size_t>(order));
    for (auto i : order) out.push_back(samples[i]);
  }
  return out;
}

template <class R>
std::vector<UnifiedSample> unified_all(const std::vector<R>& records) {
  std::vector<UnifiedSample> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(to_unified(r));
  return out;
}

inline std::string blocks_sha256(const std::vector<PackedBlock>& blocks) {
  Sha256 h;
  for (const auto& b : blocks) {
    h.update(b.tokens.data(), b.tokens.size() * sizeof(TokenId));
    h.update(b.mask.data(), b.mask.size());
  }
  return h.hex();
}

/// Everything an experiment derives from its seed.
struct ExperimentData {
  SynthCorpus corpus;
  std::vector<InstructionPair> sft_pool;    // general QA plus seen domain QA
  std::vector<PreferenceTriple> dpo_pool;   // general preference triples
  std::vector<PackedBlock> general_train;   // pre-training stream
  std::vector<PackedBlock> general_eval;    // general facts, evaluation packing
  std::vector<PackedBlock> domain_eval;     // domain documents, evaluation packing
  std::vector<PackedBlock> cpt_stream;      // domain documents only
  std::vector<PackedBlock> mix_stream;      // domain documents + template-free SFT and DPO data

  std::string sha256() const {
    Sha256 h;
    for (const auto* v : {&general_train, &general_eval, &domain_eval, &cpt_stream, &mix_stream}) {
      h.update(blocks_sha256(*v));
    }
    return h.hex();
  }
};

inline ExperimentData build_experiment_data(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentData d;
  SynthConfig sc = cfg.synth;
  sc.seed = cfg.seed;
  d.corpus = synth_corpus(sc);
  d.sft_pool = d.corpus.general_pairs;
  d.sft_pool.insert(d.sft_pool.end(), d.corpus.seen_probes.begin(), d.corpus.seen_probes.end());
  d.dpo_pool = d.corpus.general_triples;

  const std::size_t T = cfg.model.max_seq_len;
  const auto general = unified_all(d.corpus.general_docs);
  const auto domain = unified_all(d.corpus.domain_docs);
  d.general_train = pack_blocks(epoch_stream(general, cfg.base.epochs, cfg.seed * 7919 + 1), T, std::nullopt);
  d.general_eval = pack_blocks(general, T, cfg.seed * 7919 + 2);
  d.domain_eval = pack_blocks(domain, T, cfg.seed * 7919 + 3);

  std::vector<UnifiedSample> mix;
  for (std::size_t r = 0; r < cfg.domain_repeat; ++r) mix.insert(mix.end(), domain.begin(), domain.end());
  const auto sft = unified_all(d.sft_pool);
  const auto dpo = unified_all(d.dpo_pool);
  mix.insert(mix.end(), sft.begin(), sft.end());
  mix.insert(mix.end(), dpo.begin(), dpo.end());
  d.cpt_stream = pack_blocks(epoch_stream(domain, cfg.cpt.epochs, cfg.seed * 7919 + 4), T, std::nullopt);
  d.mix_stream = pack_blocks(epoch_stream(mix, cfg.cpt.epochs, cfg.seed * 7919 + 5), T, std::nullopt);
  return d;
}

inline std::vector<std::string> experiment_scenarios() {
  return {"forgetting", "utilization", "ablation-alpha", "ablation-selection", "ablation-ratio"};
}

/// Runs arms on shared data, memoizing the base model and each trained arm.
/// Every arm asserts that it consumed the same data and base checkpoint.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg) : cfg_(std::move(cfg)), data_(build_experiment_data(cfg_)) {
    data_sha_ = data_.sha256();
  }

  const ExperimentConfig& config() const noexcept { return cfg_; }
  const ExperimentData& data() const noexcept { return data_; }
  const std::string& data_sha256() const noexcept { return data_sha_; }

  /// Pre-trained on the general corpus only.
  const Checkpoint& base() {
    if (!base_) {
      const auto cache = cache_path();
      if (cache && std::filesystem::exists(*cache)) {
        base_ = load_checkpoint(*cache);
      } else {
        TrainConfig tc = stage(cfg_.base, 1.0);
        tc.log_unused_lssd = false;
        Checkpoint init{init_parameters(cfg_.model, cfg_.seed), 0, cfg_.seed};
        base_ = train_mix_cpt(init, data_.general_train, tc);
        if (cache) {
          std::filesystem::create_directories(cache->parent_path());
          save_checkpoint(*cache, *base_);
        }
      }
      base_sha_ = checkpoint_sha256(*base_);
    }
    return *base_;
  }

  const std::string& base_sha256() {
    base();
    return base_sha_;
  }

  /// "CPT-only", "Mix-CPT-noKD", "Mix-CPT", or "Mix-CPT@<alpha>".
  const Checkpoint& arm(const std::string& name) {
    if (auto it = arms_.find(name); it != arms_.end()) return it->second;
    const auto& start = base();
    check_shared_inputs();
    Checkpoint out;
    if (name == kArmCptOnly) {
      out = train_mix_cpt(start, data_.cpt_stream, stage(cfg_.cpt, 1.0, false));
    } else if (name == kArmMixNoKd) {
      out = train_mix_cpt(start, data_.mix_stream, stage(cfg_.cpt, 1.0, false));
    } else if (name == kArmMix) {
      out = train_mix_cpt(start, data_.mix_stream, stage(cfg_.cpt, cfg_.alpha));
    } else if (name.rfind("Mix-CPT@", 0) == 0) {
      const double a = std::stod(name.substr(8));
      out = train_mix_cpt(start, data_.mix_stream, stage(cfg_.cpt, a, a < 1.0));
    } else {
      throw ParameterError("unknown arm '" + name + "'");
    }
    return arms_.emplace(name, std::move(out)).first->second;
  }

  /// SFT on the K samples picked from the SFT pool by the arm's own scores.
  Checkpoint aligned(const std::string& arm_name, SelectionStrategy strategy, std::size_t sft_k,
                     std::size_t dpo_k = 0) {
    const auto& model = arm(arm_name);
    const auto sel = select_pairs(model, sft_k, strategy);
    Checkpoint sft = train_sft(model, sel, cfg_.sft);
    if (dpo_k == 0) return sft;
    std::vector<Record> recs(data_.dpo_pool.begin(), data_.dpo_pool.end());
    const auto picked =
        select_samples(score_samples(model.params, recs), SelectionConfig{dpo_k, strategy, cfg_.seed + 17});
    std::vector<PreferenceTriple> triples;
    for (const auto& s : picked.samples) triples.push_back(std::get<PreferenceTriple>(s.record));
    return train_dpo(sft, sft, triples, cfg_.dpo);
  }

  EvalReport report(const std::string& label, const Checkpoint& model) {
    const auto& b = base();
    EvalReport r;
    r.arm = label;
    r.domain_ppl = corpus_perplexity(model.params, data_.domain_eval);
    r.general_ppl = corpus_perplexity(model.params, data_.general_eval);
    r.forgetting_gap = r.general_ppl - base_general_ppl();
    if (&model == &b) r.forgetting_gap = 0.0;
    r.probe_em = exact_match_probes(model.params, data_.corpus.heldout_probes);
    return r;
  }

  double base_general_ppl() {
    if (!base_general_ppl_) base_general_ppl_ = corpus_perplexity(base().params, data_.general_eval);
    return *base_general_ppl_;
  }

  std::vector<EvalReport> run(const std::string& scenario) {
    std::vector<EvalReport> out;
    if (scenario == "forgetting") {
      out.push_back(report(std::string(kArmBase), base()));
      for (auto a : {kArmCptOnly, kArmMixNoKd, kArmMix}) out.push_back(report(std::string(a), arm(std::string(a))));
    } else if (scenario == "utilization") {
      for (auto a : {kArmCptOnly, kArmMixNoKd, kArmMix}) {
        out.push_back(report(std::string(a) + "+SFT", aligned(std::string(a), cfg_.sft_strategy, cfg_.sft_k)));
      }
    } else if (scenario == "ablation-alpha") {
      for (double a : cfg_.alpha_grid) {
        const auto name = alpha_arm(a);
        out.push_back(report(name, arm(name)));
      }
    } else if (scenario == "ablation-selection") {
      for (auto s : {SelectionStrategy::kRandom, SelectionStrategy::kEasiest, SelectionStrategy::kHardest,
                     SelectionStrategy::kEasyHard}) {
        out.push_back(report(std::string(kArmMix) + "+SFT-" + std::string(to_string(s)),
                             aligned(std::string(kArmMix), s, cfg_.sft_k)));
      }
    } else if (scenario == "ablation-ratio") {
      for (auto [s, p] : cfg_.ratio_grid) {
        const std::size_t n_sft = std::max<std::size_t>(1, cfg_.align_budget * s / (s + p));
        const std::size_t n_dpo = std::max<std::size_t>(1, cfg_.align_budget - n_sft);
        out.push_back(report(std::string(kArmMix) + "+SFT:DPO=" + std::to_string(s) + ":" + std::to_string(p),
                             aligned(std::string(kArmMix), cfg_.sft_strategy, n_sft, n_dpo)));
      }
    } else {
      throw ParameterError("unknown scenario '" + scenario + "'");
    }
    return out;
  }

  static std::string alpha_arm(double a) {
    std::ostringstream s;
    s << "Mix-CPT@" << a;
    return s.str();
  }

 private:
  TrainConfig stage(const StageConfig& s, double alpha, bool log_lssd = true) const {
    TrainConfig tc;
    tc.alpha = alpha;
    tc.lr = s.lr;
    tc.momentum = s.momentum;
    tc.clip_norm = s.clip_norm;
    tc.steps = s.steps;
    tc.batch_size = s.batch_size;
    tc.max_seq_len = cfg_.model.max_seq_len;
    tc.seed = cfg_.seed;
    tc.log_unused_lssd = log_lssd;
    return tc;
  }

  std::vector<InstructionPair> select_pairs(const Checkpoint& model, std::size_t k, SelectionStrategy strategy) {
    std::vector<Record> recs(data_.sft_pool.begin(), data_.sft_pool.end());
    const auto sel = select_samples(score_samples(model.params, recs), SelectionConfig{k, strategy, cfg_.seed + 13});
    std::vector<InstructionPair> out;
    for (const auto& s : sel.samples) out.push_back(std::get<InstructionPair>(s.record));
    return out;
  }

  void check_shared_inputs() {
    if (data_.sha256() != data_sha_) throw Error("experiment data changed between arms");
    if (checkpoint_sha256(*base_) != base_sha_) throw Error("base checkpoint changed between arms");
  }

  std::optional<std::filesystem::path> cache_path() const {
    if (!cfg_.cache_dir) return std::nullopt;
    std::ostringstream key;
    const auto& m = cfg_.model;
    const auto& b = cfg_.base;
    key << m.d_model << '-' << m.n_layers << '-' << m.n_heads << '-' << m.max_seq_len << '-' << b.steps << '-'
        << b.batch_size << '-' << b.lr << '-' << b.momentum << '-' << b.clip_norm << '-' << data_sha_ << '-'
        << cfg_.seed;
    return *cfg_.cache_dir / ("base-" + sha256_hex(key.str()).substr(0, 16) + ".ckpt");
  }

  ExperimentConfig cfg_;
  ExperimentData data_;
  std::string data_sha_;
  std::optional<Checkpoint> base_;
  std::string base_sha_;
  std::optional<double> base_general_ppl_;
  std::map<std::string, Checkpoint> arms_;
};

/// Runs one scenario; writes the comparison CSV when `csv_path` is set.
inline std::vector<EvalReport> run_experiment(const ExperimentConfig& cfg, const std::string& scenario,
                                              const std::optional<std::filesystem::path>& csv_path = std::nullopt) {
  const auto known = experiment_scenarios();
  if (std::find(known.begin(), known.end(), scenario) == known.end()) {
    throw ParameterError("unknown scenario '" + scenario + "'");
  }
  Experiment exp(cfg);
  auto reports = exp.run(scenario);
  if (csv_path) write_reports(*csv_path, reports);
  return reports;
}

}  // namespace mixcpt
