// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mixcpt/evalharness.hpp"
#include "test_util.hpp"

using namespace mixcpt;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

ModelConfig tiny_config(std::uint32_t seq = 32) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq_len = seq;
  return c;
}

std::vector<PackedBlock> text_blocks(const std::vector<std::string>& texts, std::size_t len, std::uint64_t seed) {
  std::vector<UnifiedSample> s;
  for (const auto& t : texts) s.push_back(to_unified(RawDocument{t, std::nullopt}));
  return pack_blocks(s, len, seed);
}

ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  c.seed = 3;
  c.model = tiny_config(48);
  c.synth.n_entities = 4;
  c.synth.n_general = 6;
  c.synth.attrs_per_entity = 1;
  c.base.steps = 4;
  c.base.epochs = 2;
  c.base.batch_size = 2;
  c.cpt.steps = 3;
  c.cpt.batch_size = 2;
  c.sft.steps = 2;
  c.sft.batch_size = 2;
  c.sft_k = 3;
  c.dpo.steps = 2;
  c.dpo.batch_size = 2;
  c.align_budget = 4;
  c.alpha_grid = {0.5, 1.0};
  c.ratio_grid = {{1, 1}};
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("corpus_perplexity", "[eval][ppl]") {
  const auto cfg = tiny_config();
  const auto blocks = text_blocks({"alpha beta", "gamma delta epsilon", "zeta", "eta theta iota kappa"}, 16, 4);
  SECTION("uniform model") {
    auto u = init_parameters(cfg, 1);
    std::fill(u.tok_emb.data().begin(), u.tok_emb.data().end(), 0.0f);
    CHECK_THAT(corpus_perplexity(u, blocks), WithinRel(261.0, 1e-6));
  }
  SECTION("count-weighted mean of the per-block losses") {
    const auto p = init_parameters<double>(cfg, 2);
    double weighted = 0.0;
    std::size_t count = 0;
    for (const auto& b : blocks) {
      if (!has_ntp_targets(b.mask)) continue;
      std::size_t n = 0;
      for (std::size_t j = 1; j < b.mask.size(); ++j) n += b.mask[j];
      weighted += ntp_loss(forward(p, std::span<const TokenId>(b.tokens)), b.tokens, b.mask) * static_cast<double>(n);
      count += n;
    }
    CHECK_THAT(corpus_perplexity(p, blocks), WithinAbs(std::exp(weighted / static_cast<double>(count)), 1e-9));
  }
  CHECK_THROWS_AS(corpus_perplexity(init_parameters(cfg, 1), std::vector<PackedBlock>{}), InputError);
}

TEST_CASE("answer normalization", "[eval][em]") {
  CHECK(normalize_answer("Value1 ") == normalize_answer("value1"));
  CHECK(normalize_answer("\t Mixed CASE\n") == "mixed case");
  CHECK(normalize_answer("the cat") != normalize_answer("cat"));
  CHECK(normalize_answer("") == "");
}

TEST_CASE("exact_match_probes", "[eval][em]") {
  const auto cfg = tiny_config();
  const auto corpus = synth_corpus(11, 16, 8);
  SECTION("fresh random model scores near zero") {
    const auto p = init_parameters(cfg, 5);
    CHECK(exact_match_probes(p, corpus.heldout_probes) <= 0.05);
  }
  SECTION("a model that reproduces the golds scores 1") {
    const std::vector<InstructionPair> probes = {{"A?", "xy"}, {"B?", "zw"}, {"C?", "Qq"}};
    SftConfig sc;
    sc.steps = 300;
    sc.lr = 0.3;
    sc.batch_size = 3;
    const auto trained = train_sft(Checkpoint{init_parameters(cfg, 6), 0, 0}, probes, sc);
    CHECK(exact_match_probes(trained.params, probes) == 1.0);
    std::vector<InstructionPair> upper = probes;
    upper[2].response = " qQ ";
    CHECK(exact_match_probes(trained.params, upper) == 1.0);
  }
  CHECK_THROWS_AS(exact_match_probes(init_parameters(cfg, 1), {}), InputError);
}

TEST_CASE("forgetting_gap", "[eval][gap]") {
  const auto cfg = tiny_config();
  const auto blocks = text_blocks({"one two three", "four five", "six seven eight nine"}, 16, 1);
  const auto a = init_parameters(cfg, 1), b = init_parameters(cfg, 2);
  CHECK(forgetting_gap(a, a, blocks) == 0.0);
  CHECK(forgetting_gap(a, b, blocks) == -forgetting_gap(b, a, blocks));
  CHECK_THROWS_AS(forgetting_gap(a, init_parameters(tiny_config(16), 1), blocks), ParameterError);
}

TEST_CASE("epoch_stream reshuffles every pass", "[eval][data]") {
  std::vector<UnifiedSample> s;
  for (TokenId i = 0; i < 20; ++i) s.push_back({{i}, SourceKind::kCpt});
  const auto st = epoch_stream(s, 3, 9);
  REQUIRE(st.size() == 60);
  std::vector<std::vector<TokenId>> passes(3);
  for (std::size_t i = 0; i < 60; ++i) passes[i / 20].push_back(st[i].tokens[0]);
  for (auto& p : passes) {
    auto sorted = p;
    std::sort(sorted.begin(), sorted.end());
    for (TokenId i = 0; i < 20; ++i) REQUIRE(sorted[i] == i);
  }
  CHECK(passes[0] != passes[1]);
  CHECK(epoch_stream(s, 3, 9) == st);
}

TEST_CASE("experiment data is seed-determined and arms share it", "[eval][experiment]") {
  const auto cfg = tiny_experiment();
  Experiment a(cfg), b(cfg);
  CHECK(a.data_sha256() == b.data_sha256());
  auto other = cfg;
  other.seed = 4;
  CHECK(Experiment(other).data_sha256() != a.data_sha256());

  const auto& d = a.data();
  CHECK(d.sft_pool.size() == d.corpus.general_pairs.size() + d.corpus.seen_probes.size());
  for (const auto& p : d.corpus.heldout_probes) {
    for (const auto& q : d.sft_pool) REQUIRE(q.query != p.query);
  }
  // The CPT-only stream carries domain documents only.
  std::size_t mix_tokens = 0, cpt_tokens = 0;
  for (const auto& blk : d.mix_stream) mix_tokens += static_cast<std::size_t>(std::count(blk.mask.begin(), blk.mask.end(), 1));
  for (const auto& blk : d.cpt_stream) cpt_tokens += static_cast<std::size_t>(std::count(blk.mask.begin(), blk.mask.end(), 1));
  CHECK(mix_tokens > cpt_tokens);

  const auto base_hash = a.base_sha256();
  a.arm(std::string(kArmCptOnly));
  a.arm(std::string(kArmMix));
  CHECK(a.base_sha256() == base_hash);
  CHECK(b.base_sha256() == base_hash);
  CHECK_THROWS_AS(a.arm("nonsense"), ParameterError);
}

TEST_CASE("scenarios are reproducible and write the comparison CSV", "[eval][experiment]") {
  const auto cfg = tiny_experiment();
  const auto dir = std::filesystem::temp_directory_path() / "mixcpt_test_experiment";
  std::filesystem::create_directories(dir);
  std::map<std::string, std::size_t> rows = {{"forgetting", 4},         {"utilization", 3},
                                             {"ablation-alpha", 2},     {"ablation-selection", 4},
                                             {"ablation-ratio", 1}};
  for (const auto& [scenario, n] : rows) {
    const auto p1 = dir / (scenario + "-1.csv"), p2 = dir / (scenario + "-2.csv");
    const auto reports = run_experiment(cfg, scenario, p1);
    run_experiment(cfg, scenario, p2);
    REQUIRE(reports.size() == n);
    CHECK(slurp(p1) == slurp(p2));
    CHECK(slurp(p1).rfind(std::string(kReportHeader) + "\n", 0) == 0);
    for (const auto& r : reports) {
      CHECK(r.domain_ppl > 0.0);
      CHECK(r.general_ppl > 0.0);
      CHECK(r.probe_em >= 0.0);
      CHECK(r.probe_em <= 1.0);
    }
  }
  const auto forgetting = run_experiment(cfg, "forgetting");
  CHECK(forgetting[0].arm == "base");
  CHECK(forgetting[0].forgetting_gap == 0.0);
  CHECK(forgetting[1].arm == "CPT-only");
  CHECK_THROWS_AS(run_experiment(cfg, "nope"), ParameterError);
}

TEST_CASE("base checkpoints are reused from the cache directory", "[eval][experiment]") {
  auto cfg = tiny_experiment();
  const auto dir = std::filesystem::temp_directory_path() / "mixcpt_test_cache";
  std::filesystem::remove_all(dir);
  cfg.cache_dir = dir;
  Experiment a(cfg);
  const auto hash = a.base_sha256();
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir)) ++files;
  CHECK(files == 1);
  Experiment b(cfg);
  CHECK(b.base_sha256() == hash);
}
