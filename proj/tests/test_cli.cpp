// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mixcpt/cli.hpp"

using namespace mixcpt;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli_dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("mixcpt_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::trunc) << text; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// A 2-layer d_model=16 model keeps the pipeline test fast.
const char* kTinyConfig =
    "# tiny pipeline\n"
    "seed = 7\n"
    "model.d_model = 16\n"
    "model.n_heads = 2\n"
    "model.max_seq_len = 48\n"
    "data.max_seq_len = 32\n"
    "train.steps = 6\n"
    "train.batch_size = 2\n"
    "sft.steps = 4\n"
    "sft.batch_size = 2\n"
    "dpo.steps = 4\n"
    "dpo.batch_size = 2\n";

}  // namespace

TEST_CASE("usage errors exit 1", "[cli]") {
  auto r = run({"frobnicate"});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("unknown subcommand 'frobnicate'") != std::string::npos);
  CHECK(r.err.find("train-cpt") != std::string::npos);  // usage text lists subcommands
  CHECK(run({}).code == kExitUsage);

  r = run({"gradcheck", "--config", "/definitely/not/here.cfg"});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("/definitely/not/here.cfg") != std::string::npos);

  const auto dir = scratch("usage");
  write(dir / "bad.cfg", "model.d_model = 16\nmodel.colour = blue\n");
  r = run({"gradcheck", "--config", (dir / "bad.cfg").string()});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("model.colour") != std::string::npos);
  CHECK(run({"train-cpt", "--out", dir.string()}).code == kExitUsage);  // --blocks missing
  CHECK(run({"help-me", "--help"}).code == kExitUsage);
  CHECK(run({"--help"}).code == kExitOk);
}

TEST_CASE("RunConfig parsing", "[cli][config]") {
  const auto dir = scratch("config");
  write(dir / "a.cfg", "  # comment line\n\ntrain.alpha=0.25   # trailing comment\nselect.strategy = EH\n");
  const auto c = RunConfig::from_file(dir / "a.cfg");
  CHECK(c.train().alpha == 0.25);
  CHECK(c.select().strategy == SelectionStrategy::kEasyHard);
  CHECK(c.select().seed == stage_seed(0, Stage::kSelect));
  CHECK(c.sft().seed == 4);
  CHECK(c.echo().find("train.alpha = 0.25\n") != std::string::npos);
  CHECK(c.echo().find("select.seed = 3\n") != std::string::npos);

  RunConfig d;
  CHECK(d.train().alpha == 0.5);  // defaults fill missing keys
  CHECK_THROWS_AS(d.set("nope", "1"), UsageError);
  d.set("train.steps", "-3");
  CHECK_THROWS_AS(d.train(), UsageError);
  d.set("train.steps", "10");
  d.set("train.alpha", "1.5");
  CHECK_THROWS_AS(d.train(), ParameterError);
  write(dir / "b.cfg", "seed 3\n");
  CHECK_THROWS_AS(RunConfig::from_file(dir / "b.cfg"), UsageError);
}

TEST_CASE("select emits K records", "[cli][select]") {
  const auto dir = scratch("select");
  write(dir / "pairs.jsonl",
        "{\"query\":\"a?\",\"response\":\"x\"}\n{\"query\":\"b?\",\"response\":\"y\"}\n"
        "{\"query\":\"c?\",\"response\":\"z\"}\n");
  write(dir / "scores.jsonl", "{\"index\":0,\"ppl\":3.5}\n{\"index\":1,\"ppl\":1.5}\n{\"index\":2,\"ppl\":2.5}\n");
  auto r = run({"select", "--scores", (dir / "scores.jsonl").string(), "--input", (dir / "pairs.jsonl").string(),
                "--strategy", "E", "--k", "2"});
  REQUIRE(r.code == kExitOk);
  const auto got = lines(r.out);
  REQUIRE(got.size() == 2);
  CHECK(got[0] == R"({"query":"b?","response":"y"})");
  CHECK(got[1] == R"({"query":"c?","response":"z"})");

  r = run({"select", "--scores", (dir / "scores.jsonl").string(), "--input", (dir / "pairs.jsonl").string(), "--k",
           "5"});
  CHECK(r.code == kExitOk);
  CHECK(lines(r.out).size() == 3);
  CHECK(r.err.find("k exceeds") != std::string::npos);

  write(dir / "broken.jsonl", "{\"index\":0,\"ppl\":1}\n{not json\n");
  CHECK(run({"select", "--scores", (dir / "broken.jsonl").string(), "--input", (dir / "pairs.jsonl").string()}).code ==
        kExitData);
  CHECK(run({"select", "--scores", (dir / "scores.jsonl").string(), "--input", (dir / "pairs.jsonl").string(),
             "--strategy", "Z"})
            .code == kExitUsage);
}

TEST_CASE("gradcheck passes on a clean build", "[cli][gradcheck]") {
  const auto r = run({"gradcheck"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("causal_self_attention.q max_rel_err=") != std::string::npos);
  CHECK(r.out.find("model.param0 max_rel_err=") != std::string::npos);
  CHECK(r.out.find("FAILED") == std::string::npos);
}

TEST_CASE("the full pipeline writes reproducible run directories", "[cli][pipeline]") {
  const auto dir = scratch("pipeline");
  write(dir / "run.cfg", kTinyConfig);
  write(dir / "cpt.jsonl",
        "{\"text\":\"the river runs north past the mill\",\"score\":0.9}\n"
        "{\"text\":\"low quality line\",\"score\":0.1}\n"
        "{\"text\":\"stones line the bank of the river\"}\n");
  write(dir / "sft.jsonl",
        "{\"query\":\"Where does the river run?\",\"response\":\"north\"}\n"
        "{\"query\":\"What lines the bank?\",\"response\":\"stones\"}\n"
        "{\"query\":\"What is past the river?\",\"response\":\"the mill\"}\n");
  write(dir / "dpo.jsonl",
        "{\"query\":\"Where does the river run?\",\"chosen\":\"north\",\"rejected\":\"south\"}\n"
        "{\"query\":\"What lines the bank?\",\"chosen\":\"stones\",\"rejected\":\"reeds\"}\n");
  const auto cfg = (dir / "run.cfg").string();
  auto p = [&](const char* name) { return (dir / name).string(); };

  auto mix_args = [&](const std::string& out) {
    return std::vector<std::string>{"mix", "--config", cfg, "--set", "data.min_quality=0.5", "--cpt", p("cpt.jsonl"),
                                    "--sft", p("sft.jsonl"), "--dpo", p("dpo.jsonl"), "--out", out};
  };
  auto r = run(mix_args(p("mix")));
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("samples=7") != std::string::npos);  // one document filtered out
  REQUIRE(fs::exists(dir / "mix" / "blocks.jsonl"));
  REQUIRE(run(mix_args(p("mix2"))).code == kExitOk);
  CHECK(slurp(dir / "mix" / "manifest.json") == slurp(dir / "mix2" / "manifest.json"));

  auto cpt_args = [&](const std::string& out) {
    return std::vector<std::string>{"train-cpt", "--config", cfg, "--set", "train.alpha=1",
                                    "--blocks", p("mix/blocks.jsonl"), "--out", out};
  };
  REQUIRE(run(cpt_args(p("base"))).code == kExitOk);
  REQUIRE(run(cpt_args(p("base2"))).code == kExitOk);
  for (const char* f : {"config.txt", "metrics.csv", "model.ckpt", "manifest.json"}) {
    INFO(f);
    CHECK(fs::exists(dir / "base" / f));
  }
  CHECK(slurp(dir / "base" / "manifest.json") == slurp(dir / "base2" / "manifest.json"));
  CHECK(slurp(dir / "base" / "config.txt").find("train.alpha = 1\n") != std::string::npos);
  CHECK(lines(slurp(dir / "base" / "metrics.csv")).size() == 7);
  CHECK(lines(slurp(dir / "base" / "metrics.csv"))[0] == "step,ntp,lssd,total");

  r = run({"train-cpt", "--config", cfg, "--blocks", p("mix/blocks.jsonl"), "--init", p("base/model.ckpt"), "--out",
           p("cpt")});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("step=12") != std::string::npos);
  CHECK(slurp(dir / "cpt" / "manifest.json").find("\"init\"") != std::string::npos);

  r = run({"score", "--model", p("cpt/model.ckpt"), "--input", p("sft.jsonl"), "--out", p("scores.jsonl")});
  REQUIRE(r.code == kExitOk);
  CHECK(lines(slurp(dir / "scores.jsonl")).size() == 3);
  r = run({"select", "--config", cfg, "--scores", p("scores.jsonl"), "--input", p("sft.jsonl"), "--k", "2", "--out",
           p("picked.jsonl")});
  REQUIRE(r.code == kExitOk);
  CHECK(lines(slurp(dir / "picked.jsonl")).size() == 2);

  r = run({"train-sft", "--config", cfg, "--init", p("cpt/model.ckpt"), "--data", p("picked.jsonl"), "--out",
           p("sft")});
  REQUIRE(r.code == kExitOk);
  CHECK(lines(slurp(dir / "sft" / "metrics.csv"))[0] == "step,loss");
  r = run({"train-dpo", "--config", cfg, "--init", p("sft/model.ckpt"), "--data", p("dpo.jsonl"), "--out", p("dpo")});
  REQUIRE(r.code == kExitOk);
  CHECK(lines(slurp(dir / "dpo" / "metrics.csv"))[0] == "step,loss,margin");

  r = run({"eval", "--model", p("dpo/model.ckpt"), "--blocks", p("mix/blocks.jsonl"), "--probes", p("sft.jsonl")});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("perplexity=") != std::string::npos);
  CHECK(r.out.find("exact_match=") != std::string::npos);

  // Data errors exit 2.
  write(dir / "bad.jsonl", "{\"query\": 3}\n");
  CHECK(run({"train-sft", "--config", cfg, "--init", p("cpt/model.ckpt"), "--data", p("bad.jsonl"), "--out",
             p("bad")})
            .code == kExitData);
  write(dir / "junk.ckpt", "not a checkpoint");
  CHECK(run({"eval", "--model", p("junk.ckpt"), "--probes", p("sft.jsonl")}).code == kExitData);
}

TEST_CASE("a diverging run exits 3 naming the step", "[cli][numeric]") {
  const auto dir = scratch("nan");
  write(dir / "run.cfg", kTinyConfig);
  write(dir / "cpt.jsonl", "{\"text\":\"abcabcabcabcabcabcabcabcabcabc abc abc\"}\n");
  REQUIRE(run({"mix", "--config", (dir / "run.cfg").string(), "--cpt", (dir / "cpt.jsonl").string(), "--out",
               (dir / "mix").string()})
              .code == kExitOk);
  const auto r = run({"train-cpt", "--config", (dir / "run.cfg").string(), "--set", "train.lr=1e300", "--set",
                      "train.clip_norm=0", "--set", "train.momentum=0", "--blocks",
                      (dir / "mix" / "blocks.jsonl").string(), "--out", (dir / "cpt").string()});
  CHECK(r.code == kExitNumeric);
  CHECK(r.err.find("numeric abort at step") != std::string::npos);
}

TEST_CASE("experiment subcommand writes the comparison table", "[cli][experiment]") {
  const auto dir = scratch("experiment");
  write(dir / "exp.cfg",
        "seed = 3\nmodel.d_model = 16\nmodel.n_heads = 2\nmodel.max_seq_len = 48\n"
        "train.steps = 3\ntrain.batch_size = 2\nexperiment.base_steps = 4\nexperiment.epochs = 1\n"
        "experiment.sft_k = 3\nexperiment.n_entities = 4\nexperiment.n_general = 6\n"
        "sft.steps = 2\nsft.batch_size = 2\n");
  const auto r = run({"experiment", "--config", (dir / "exp.cfg").string(), "--scenario", "forgetting", "--out",
                      (dir / "run").string(), "--cache", (dir / "cache").string()});
  REQUIRE(r.code == kExitOk);
  const auto csv = lines(slurp(dir / "run" / "forgetting.csv"));
  REQUIRE(csv.size() == 5);
  CHECK(csv[0] == kReportHeader);
  CHECK(fs::exists(dir / "run" / "manifest.json"));
  CHECK(run({"experiment", "--config", (dir / "exp.cfg").string(), "--scenario", "nope", "--out",
             (dir / "run2").string()})
            .code == kExitUsage);
}
