// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mixcpt/align.hpp"
#include "mixcpt/checkpoint.hpp"
#include "mixcpt/datapipe.hpp"
#include "mixcpt/error.hpp"
#include "mixcpt/evalharness.hpp"
#include "mixcpt/gradsuite.hpp"
#include "mixcpt/hash.hpp"
#include "mixcpt/lssd.hpp"

namespace mixcpt {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

/// Bad flags, unknown config keys, unreadable config files.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Per-stage seeds are the global seed plus the stage index.
enum class Stage : std::uint64_t { kInit = 0, kMix = 1, kCpt = 2, kSelect = 3, kSft = 4, kDpo = 5 };

inline std::uint64_t stage_seed(std::uint64_t seed, Stage s) { return seed + static_cast<std::uint64_t>(s); }

/// Flat key = value configuration. Every key has a default; keys outside
/// the table are rejected. select.seed defaults to the derived stage seed.
class RunConfig {
 public:
  RunConfig() {
    const ModelConfig m = ExperimentConfig::default_model();
    const SftConfig s = ExperimentConfig::default_sft();
    const DpoConfig d = ExperimentConfig::default_dpo();
    const ExperimentConfig e;
    values_ = {
        {"seed", "0"},
        {"model.d_model", std::to_string(m.d_model)},
        {"model.n_layers", std::to_string(m.n_layers)},
        {"model.n_heads", std::to_string(m.n_heads)},
        {"model.max_seq_len", std::to_string(m.max_seq_len)},
        {"train.alpha", fmt(e.alpha)},
        {"train.lr", fmt(e.cpt.lr)},
        {"train.momentum", fmt(e.cpt.momentum)},
        {"train.clip_norm", fmt(e.cpt.clip_norm)},
        {"train.steps", std::to_string(e.cpt.steps)},
        {"train.batch_size", std::to_string(e.cpt.batch_size)},
        {"select.k", std::to_string(kDefaultSftSelect)},
        {"select.strategy", "E"},
        {"select.seed", ""},
        {"sft.lr", fmt(s.lr)},
        {"sft.momentum", fmt(s.momentum)},
        {"sft.clip_norm", fmt(s.clip_norm)},
        {"sft.steps", std::to_string(s.steps)},
        {"sft.batch_size", std::to_string(s.batch_size)},
        {"dpo.beta", fmt(d.beta)},
        {"dpo.lr", fmt(d.lr)},
        {"dpo.momentum", fmt(d.momentum)},
        {"dpo.clip_norm", fmt(d.clip_norm)},
        {"dpo.steps", std::to_string(d.steps)},
        {"dpo.batch_size", std::to_string(d.batch_size)},
        {"data.max_seq_len", std::to_string(m.max_seq_len)},
        {"data.min_quality", ""},
        {"data.pack_order", "global"},
        {"data.epochs", "1"},
        {"experiment.base_steps", std::to_string(e.base.steps)},
        {"experiment.epochs", std::to_string(e.cpt.epochs)},
        {"experiment.sft_k", std::to_string(e.sft_k)},
        {"experiment.n_entities", std::to_string(e.synth.n_entities)},
        {"experiment.n_general", std::to_string(e.synth.n_general)},
    };
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read config file: " + path.string());
    RunConfig c;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      if (trim(line).empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw UsageError(path.string() + ":" + std::to_string(n) + ": expected key = value");
      }
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
    it->second = value;
  }

  /// "key=value" as given on the command line.
  void set_assignment(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }

  const std::string& str(const std::string& key) const { return values_.at(key); }

  double real(const std::string& key) const {
    const auto& v = str(key);
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw UsageError("config key '" + key + "' expects a number, got '" + v + "'");
  }

  std::uint64_t count(const std::string& key) const {
    const auto& v = str(key);
    if (!v.empty() && v.find_first_not_of("0123456789") == std::string::npos) {
      try {
        return std::stoull(v);
      } catch (const std::exception&) {
      }
    }
    throw UsageError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }

  std::uint64_t seed() const { return count("seed"); }

  ModelConfig model() const {
    ModelConfig m;
    m.d_model = static_cast<std::uint32_t>(count("model.d_model"));
    m.n_layers = static_cast<std::uint32_t>(count("model.n_layers"));
    m.n_heads = static_cast<std::uint32_t>(count("model.n_heads"));
    m.max_seq_len = static_cast<std::uint32_t>(count("model.max_seq_len"));
    m.validate();
    return m;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.alpha = real("train.alpha");
    t.lr = real("train.lr");
    t.momentum = real("train.momentum");
    t.clip_norm = real("train.clip_norm");
    t.steps = count("train.steps");
    t.batch_size = count("train.batch_size");
    t.max_seq_len = count("data.max_seq_len");
    t.seed = stage_seed(seed(), Stage::kCpt);
    t.validate();
    return t;
  }

  SelectionConfig select() const {
    SelectionConfig s;
    s.k = count("select.k");
    s.strategy = parse_strategy(str("select.strategy"));
    s.seed = str("select.seed").empty() ? stage_seed(seed(), Stage::kSelect) : count("select.seed");
    s.validate();
    return s;
  }

  SftConfig sft() const {
    SftConfig s;
    s.lr = real("sft.lr");
    s.momentum = real("sft.momentum");
    s.clip_norm = real("sft.clip_norm");
    s.steps = count("sft.steps");
    s.batch_size = count("sft.batch_size");
    s.seed = stage_seed(seed(), Stage::kSft);
    s.loop().validate();
    return s;
  }

  DpoConfig dpo() const {
    DpoConfig d;
    d.beta = real("dpo.beta");
    d.lr = real("dpo.lr");
    d.momentum = real("dpo.momentum");
    d.clip_norm = real("dpo.clip_norm");
    d.steps = count("dpo.steps");
    d.batch_size = count("dpo.batch_size");
    d.seed = stage_seed(seed(), Stage::kDpo);
    d.validate();
    d.loop().validate();
    return d;
  }

  std::optional<double> min_quality() const {
    if (str("data.min_quality").empty()) return std::nullopt;
    return real("data.min_quality");
  }

  PackOrder pack_order() const {
    const auto& v = str("data.pack_order");
    if (v == "global") return PackOrder::kGlobalShuffle;
    if (v == "per-kind") return PackOrder::kPerKindSequential;
    throw UsageError("data.pack_order must be 'global' or 'per-kind', got '" + v + "'");
  }

  ExperimentConfig experiment() const {
    ExperimentConfig e;
    e.seed = seed();
    e.model = model();
    e.alpha = real("train.alpha");
    e.cpt.lr = real("train.lr");
    e.cpt.momentum = real("train.momentum");
    e.cpt.clip_norm = real("train.clip_norm");
    e.cpt.steps = count("train.steps");
    e.cpt.batch_size = count("train.batch_size");
    e.base.steps = count("experiment.base_steps");
    e.base.epochs = e.cpt.epochs = count("experiment.epochs");
    e.sft_k = count("experiment.sft_k");
    e.sft_strategy = parse_strategy(str("select.strategy"));
    e.synth.seed = seed();
    e.synth.n_entities = count("experiment.n_entities");
    e.synth.n_general = count("experiment.n_general");
    e.sft = sft();
    e.dpo = dpo();
    e.validate();
    return e;
  }

  /// Resolved values, one "key = value" per line in key order.
  std::string echo() const {
    std::ostringstream out;
    for (const auto& [k, v] : values_) {
      std::string shown = v;
      if (k == "select.seed" && v.empty()) shown = std::to_string(stage_seed(seed(), Stage::kSelect));
      out << k << " = " << shown << '\n';
    }
    return out.str();
  }

 private:
  static std::string fmt(double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
  }
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

/// A run's output directory: config echo, metrics, checkpoint, and a
/// manifest with content hashes of every input and output file.
class RunDir {
 public:
  RunDir(std::filesystem::path dir, const RunConfig& cfg) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
    std::ofstream(dir_ / "config.txt", std::ios::trunc) << cfg.echo();
  }

  const std::filesystem::path& path() const noexcept { return dir_; }
  std::filesystem::path file(const std::string& name) const { return dir_ / name; }

  void input(const std::string& role, const std::filesystem::path& p) { inputs_[role] = sha256_file(p); }

  void finish(const std::vector<std::string>& outputs) const {
    nlohmann::json m;
    m["inputs"] = nlohmann::json::object();
    for (const auto& [role, h] : inputs_) m["inputs"][role] = h;
    m["outputs"] = nlohmann::json::object();
    m["outputs"]["config.txt"] = sha256_file(dir_ / "config.txt");
    for (const auto& name : outputs) m["outputs"][name] = sha256_file(dir_ / name);
    std::ofstream(dir_ / "manifest.json", std::ios::trunc) << m.dump(2) << '\n';
  }

 private:
  std::filesystem::path dir_;
  std::map<std::string, std::string> inputs_;
};

namespace detail {

inline SourceKind record_kind(const std::string& s) {
  if (s == "sft") return SourceKind::kSft;
  if (s == "dpo") return SourceKind::kDpo;
  throw UsageError("--kind must be 'sft' or 'dpo', got '" + s + "'");
}

template <class R>
std::vector<R> records_as(const std::vector<Record>& recs) {
  std::vector<R> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back(std::get<R>(r));
  return out;
}

inline Checkpoint start_checkpoint(const std::optional<std::string>& init, const RunConfig& cfg, RunDir& run) {
  if (init) {
    run.input("init", *init);
    return load_checkpoint(*init);
  }
  const auto seed = stage_seed(cfg.seed(), Stage::kInit);
  return Checkpoint{init_parameters(cfg.model(), seed), 0, seed};
}

inline void emit_lines(const std::vector<std::string>& lines, const std::optional<std::string>& path,
                       std::ostream& out) {
  if (path) {
    std::ofstream f(*path, std::ios::trunc);
    if (!f) throw InputError("cannot open for writing: " + *path);
    for (const auto& l : lines) f << l << '\n';
  } else {
    for (const auto& l : lines) out << l << '\n';
  }
}

}  // namespace detail

/// Runs one subcommand. `args` excludes the program name.
inline int cli_dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout,
                        std::ostream& err = std::cerr) {
  CLI::App app{"Mix-CPT pipeline: mixed continual pre-training, selection, SFT, DPO, evaluation", "mixcpt"};
  app.require_subcommand(1);
  std::optional<std::string> config_path;
  std::vector<std::string> overrides;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key = value config file");
    sub->add_option("--set", overrides, "override one config key (key=value), repeatable");
  };

  // Flags shared by several subcommands.
  std::optional<std::string> init, model, ref, input, scores, blocks, probes, out_path, cpt, sft, dpo, cache;
  std::string out_dir, kind = "sft", scenario;
  std::optional<std::uint64_t> k, seed;
  std::optional<std::string> strategy;

  auto* mix = app.add_subcommand("mix", "pack cpt/sft/dpo JSONL into training blocks");
  common(mix);
  mix->add_option("--cpt", cpt, "raw documents JSONL");
  mix->add_option("--sft", sft, "instruction pairs JSONL");
  mix->add_option("--dpo", dpo, "preference triples JSONL");
  mix->add_option("--out", out_dir, "run directory")->required();

  auto* train_cpt = app.add_subcommand("train-cpt", "continual pre-training with the LSSD term");
  common(train_cpt);
  train_cpt->add_option("--blocks", blocks, "packed blocks from `mix`")->required();
  train_cpt->add_option("--init", init, "starting checkpoint (also the frozen teacher); fresh init if absent");
  train_cpt->add_option("--out", out_dir, "run directory")->required();

  auto* score = app.add_subcommand("score", "response perplexity per record");
  common(score);
  score->add_option("--model", model, "checkpoint")->required();
  score->add_option("--input", input, "sft or dpo JSONL")->required();
  score->add_option("--kind", kind, "sft | dpo");
  score->add_option("--out", out_path, "scores JSONL (stdout if absent)");

  auto* select = app.add_subcommand("select", "pick K scored records");
  common(select);
  select->add_option("--scores", scores, "scores JSONL from `score`")->required();
  select->add_option("--input", input, "the scored sft or dpo JSONL")->required();
  select->add_option("--kind", kind, "sft | dpo");
  select->add_option("--k", k, "number of records (select.k)");
  select->add_option("--strategy", strategy, "R | E | H | EH (select.strategy)");
  select->add_option("--seed", seed, "seed for R (select.seed)");
  select->add_option("--out", out_path, "selected JSONL (stdout if absent)");

  auto* train_sft_cmd = app.add_subcommand("train-sft", "supervised fine-tuning on instruction pairs");
  common(train_sft_cmd);
  train_sft_cmd->add_option("--init", init, "starting checkpoint")->required();
  train_sft_cmd->add_option("--data", input, "instruction pairs JSONL")->required();
  train_sft_cmd->add_option("--out", out_dir, "run directory")->required();

  auto* train_dpo_cmd = app.add_subcommand("train-dpo", "preference optimization on triples");
  common(train_dpo_cmd);
  train_dpo_cmd->add_option("--init", init, "starting checkpoint")->required();
  train_dpo_cmd->add_option("--ref", ref, "frozen reference checkpoint (default: --init)");
  train_dpo_cmd->add_option("--data", input, "preference triples JSONL")->required();
  train_dpo_cmd->add_option("--out", out_dir, "run directory")->required();

  auto* eval = app.add_subcommand("eval", "perplexity on blocks and exact match on probes");
  common(eval);
  eval->add_option("--model", model, "checkpoint")->required();
  eval->add_option("--blocks", blocks, "packed blocks for perplexity");
  eval->add_option("--probes", probes, "instruction pairs JSONL for exact match");

  auto* experiment = app.add_subcommand("experiment", "run a harness scenario end to end");
  common(experiment);
  experiment->add_option("--scenario", scenario, "forgetting | utilization | ablation-alpha | ablation-selection | ablation-ratio")
      ->required();
  experiment->add_option("--out", out_dir, "run directory")->required();
  experiment->add_option("--cache", cache, "directory for reusable base checkpoints");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every op and the full model");
  common(gradcheck);

  if (!args.empty() && !args.front().empty() && args.front()[0] != '-') {
    bool known = false;
    for (const auto* sub : app.get_subcommands([](const CLI::App*) { return true; })) {
      known = known || sub->get_name() == args.front();
    }
    if (!known) {
      err << "mixcpt: unknown subcommand '" << args.front() << "'\n\n" << app.help();
      return kExitUsage;
    }
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "mixcpt: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    RunConfig cfg = config_path ? RunConfig::from_file(*config_path) : RunConfig{};
    for (const auto& kv : overrides) cfg.set_assignment(kv);
    if (k) cfg.set("select.k", std::to_string(*k));
    if (strategy) cfg.set("select.strategy", *strategy);
    if (seed) cfg.set("select.seed", std::to_string(*seed));

    if (mix->parsed()) {
      if (!cpt && !sft && !dpo) throw UsageError("mix needs at least one of --cpt, --sft, --dpo");
      RunDir run(out_dir, cfg);
      std::vector<UnifiedSample> samples;
      auto add = [&](const std::optional<std::string>& p, SourceKind kd, const char* role) {
        if (!p) return;
        run.input(role, *p);
        const auto mq = kd == SourceKind::kCpt ? cfg.min_quality() : std::nullopt;
        for (const auto& r : load_jsonl(*p, kd, mq)) samples.push_back(to_unified(r));
      };
      add(cpt, SourceKind::kCpt, "cpt");
      add(sft, SourceKind::kSft, "sft");
      add(dpo, SourceKind::kDpo, "dpo");
      const auto mix_seed = stage_seed(cfg.seed(), Stage::kMix);
      const auto epochs = cfg.count("data.epochs");
      const auto len = cfg.count("data.max_seq_len");
      std::vector<PackedBlock> packed;
      if (cfg.pack_order() == PackOrder::kGlobalShuffle) {
        // epoch_stream already orders each pass.
        packed = pack_blocks(epoch_stream(samples, epochs, mix_seed), len, std::nullopt);
      } else {
        if (epochs != 1) throw UsageError("data.pack_order = per-kind supports data.epochs = 1 only");
        packed = pack_blocks(samples, len, mix_seed, PackOrder::kPerKindSequential);
      }
      write_blocks(run.file("blocks.jsonl"), packed);
      run.finish({"blocks.jsonl"});
      out << "samples=" << samples.size() << " blocks=" << packed.size() << '\n';
    } else if (train_cpt->parsed()) {
      RunDir run(out_dir, cfg);
      const auto tc = cfg.train();
      run.input("blocks", *blocks);
      const auto data = read_blocks(*blocks);
      const auto start = detail::start_checkpoint(init, cfg, run);
      const auto done = train_mix_cpt(start, data, tc, run.file("metrics.csv"));
      save_checkpoint(run.file("model.ckpt"), done);
      run.finish({"metrics.csv", "model.ckpt"});
      out << "step=" << done.step << " checkpoint=" << run.file("model.ckpt").string() << '\n';
    } else if (score->parsed()) {
      const auto recs = load_jsonl(*input, detail::record_kind(kind));
      const auto ck = load_checkpoint(*model);
      const auto scored = score_samples(ck.params, recs);
      std::vector<std::string> lines;
      for (const auto& s : scored) lines.push_back(nlohmann::json{{"index", s.index}, {"ppl", s.perplexity}}.dump());
      detail::emit_lines(lines, out_path, out);
    } else if (select->parsed()) {
      const auto recs = load_jsonl(*input, detail::record_kind(kind));
      const auto sel = select_samples(read_scores(*scores, recs), cfg.select());
      if (sel.oversize) err << "mixcpt: k exceeds the " << recs.size() << " scored records; all are returned\n";
      std::vector<std::string> lines;
      for (const auto& r : selected_records(sel)) lines.push_back(to_json(r).dump());
      detail::emit_lines(lines, out_path, out);
    } else if (train_sft_cmd->parsed()) {
      RunDir run(out_dir, cfg);
      const auto sc = cfg.sft();
      run.input("data", *input);
      const auto pairs = detail::records_as<InstructionPair>(load_jsonl(*input, SourceKind::kSft));
      const auto start = detail::start_checkpoint(init, cfg, run);
      const auto done = train_sft(start, pairs, sc, run.file("metrics.csv"));
      save_checkpoint(run.file("model.ckpt"), done);
      run.finish({"metrics.csv", "model.ckpt"});
      out << "step=" << done.step << " checkpoint=" << run.file("model.ckpt").string() << '\n';
    } else if (train_dpo_cmd->parsed()) {
      RunDir run(out_dir, cfg);
      const auto dc = cfg.dpo();
      run.input("data", *input);
      const auto triples = detail::records_as<PreferenceTriple>(load_jsonl(*input, SourceKind::kDpo));
      const auto start = detail::start_checkpoint(init, cfg, run);
      Checkpoint reference = start;
      if (ref) {
        run.input("ref", *ref);
        reference = load_checkpoint(*ref);
      }
      const auto done = train_dpo(start, reference, triples, dc, run.file("metrics.csv"));
      save_checkpoint(run.file("model.ckpt"), done);
      run.finish({"metrics.csv", "model.ckpt"});
      out << "step=" << done.step << " checkpoint=" << run.file("model.ckpt").string() << '\n';
    } else if (eval->parsed()) {
      if (!blocks && !probes) throw UsageError("eval needs --blocks and/or --probes");
      const auto ck = load_checkpoint(*model);
      out << std::setprecision(9);
      if (blocks) out << "perplexity=" << corpus_perplexity(ck.params, read_blocks(*blocks)) << '\n';
      if (probes) {
        const auto pairs = detail::records_as<InstructionPair>(load_jsonl(*probes, SourceKind::kSft));
        out << "exact_match=" << exact_match_probes(ck.params, pairs) << '\n';
      }
    } else if (experiment->parsed()) {
      auto ec = cfg.experiment();
      if (cache) ec.cache_dir = *cache;
      RunDir run(out_dir, cfg);
      const auto name = scenario + ".csv";
      const auto reports = run_experiment(ec, scenario, run.file(name));
      run.finish({name});
      out << format_reports(reports);
    } else if (gradcheck->parsed()) {
      bool ok = true;
      out << std::scientific << std::setprecision(3);
      for (const auto& e : run_grad_suite()) {
        out << e.report.op << " max_rel_err=" << e.report.max_relative_error << " tol=" << e.tolerance << ' '
            << (e.passed() ? "ok" : "FAILED") << '\n';
        ok = ok && e.passed();
      }
      return ok ? kExitOk : kExitNumeric;
    }
    return kExitOk;
  } catch (const UsageError& e) {
    err << "mixcpt: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParameterError& e) {
    err << "mixcpt: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "mixcpt: numeric abort at step " << e.step() << ": " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "mixcpt: " << e.what() << '\n';
    return kExitData;
  }
}

}  // namespace mixcpt
