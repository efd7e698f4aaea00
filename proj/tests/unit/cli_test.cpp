#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "cmegrpo/checkpoint.hpp"
#include "cmegrpo/trainer.hpp"
#include "json.hpp"
#include "support.hpp"

namespace cmegrpo {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

const fs::path kConfigs = fs::path(CMEGRPO_SOURCE_DIR) / "configs";

json small_run(const fs::path& out) {
  json j = json::parse(R"({
    "generator": {"kind": "neural", "tokenizer": {"alphabet": "abc"}, "window": 2, "embed": 4,
                  "hidden": 6, "init_scale": 0.5, "init_seed": 3},
    "verifier": {"kind": "grammar", "tokenizer": {"alphabet": "abc"}},
    "gold": {"kind": "grammar", "tokenizer": {"alphabet": "abc"}},
    "train": {"group_size": 4, "max_len": 4, "steps": 12, "eval_every": 4},
    "prompts": ["a", "b"]
  })");
  j["output_dir"] = out.string();
  return j;
}

fs::path write_config(const fs::path& dir, const json& j, const std::string& name = "run.json") {
  std::ofstream(dir / name) << j.dump(2);
  return dir / name;
}

std::string q(const fs::path& p) { return testing::shell_quote(p.string()); }

std::vector<json> json_lines(const std::string& text) {
  std::vector<json> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(json::parse(line));
  return out;
}

TEST(CliAlign, WorkedExampleThroughMergeTables) {
  const auto r = testing::run_cli(
      "align --text unhappiness --gen merge --gen-merges " + q(kConfigs / "merges/unhappiness_gen.tsv") +
      " --ver merge --ver-merges " + q(kConfigs / "merges/unhappiness_ver.tsv"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const json j = json::parse(r.out);
  ASSERT_EQ(j.at("entries").size(), 3u);
  EXPECT_EQ(j["entries"][0]["w"].get<double>(), 2.0 / 7.0);
  EXPECT_EQ(j["entries"][1]["w"].get<double>(), 5.0 / 7.0);
  EXPECT_EQ(j["entries"][2]["w"].get<double>(), 1.0);
  EXPECT_EQ(j["generator"]["tokens"][0]["end"], 2);
  EXPECT_EQ(j["verifier"]["tokens"][0]["end"], 7);
}

TEST(CliAlign, IdenticalTokenizersGiveIdentity) {
  const auto r = testing::run_cli("align --text 'ab ba'");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const json j = json::parse(r.out);
  ASSERT_EQ(j["entries"].size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_EQ(j["entries"][k]["t"], k);
    EXPECT_EQ(j["entries"][k]["s"], k);
    EXPECT_EQ(j["entries"][k]["w"], 1);
  }
  EXPECT_EQ(j["gen_mask"], json::parse("[true,true,false,true,true]"));
}

TEST(CliAlign, DifferentAlphabetsExitTwo) {
  const auto r = testing::run_cli("align --text ab --gen-alphabet ab --ver-alphabet abc");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("alphabet"), std::string::npos) << r.err;
  EXPECT_TRUE(r.out.empty());
  EXPECT_EQ(testing::run_cli("align --text 'a!' --alphabet ab").exit_code, 2);
}

TEST(CliScore, SequenceModeSingleToken) {
  const auto dir = testing::scratch_dir("cli_score");
  const auto cfg = write_config(dir, small_run(dir / "run"));
  const auto r = testing::run_cli("score " + q(cfg) + " --prompt a --response b --reward-mode sequence");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const auto lines = json_lines(r.out);
  ASSERT_EQ(lines.size(), 1u);
  const CountLM g = synthetic_grammar(Tokenizer(Alphabet::from_utf8("abc")));
  const double expected = g.token_logprob(std::vector<TokenId>{0}, 1);
  EXPECT_EQ(lines[0]["response_index"], 0);
  EXPECT_NEAR(lines[0]["total"].get<double>(), expected, 1e-15);
  ASSERT_EQ(lines[0]["rewards"].size(), 1u);
  EXPECT_NEAR(lines[0]["rewards"][0].get<double>(), expected, 1e-15);
  EXPECT_EQ(lines[0]["mask"], json::parse("[true]"));
}

TEST(CliScore, TokenModeWithEos) {
  const auto dir = testing::scratch_dir("cli_score_token");
  const auto cfg = write_config(dir, small_run(dir / "run"));
  const auto r = testing::run_cli("score " + q(cfg) + " --prompt a --response bc --response c --ended");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const auto lines = json_lines(r.out);
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0]["rewards"].size(), 3u);
  EXPECT_EQ(lines[1]["rewards"].size(), 2u);
  double sum = 0.0;
  for (const auto& v : lines[0]["rewards"]) sum += v.get<double>();
  EXPECT_NEAR(sum, lines[0]["total"].get<double>(), 1e-12);
}

TEST(CliTrain, ZeroStepsWritesOnlyTheInitialState) {
  const auto dir = testing::scratch_dir("cli_train_zero");
  const auto cfg = write_config(dir, small_run(dir / "run"));
  const auto r = testing::run_cli("train " + q(cfg) + " --steps 0");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir / "run/checkpoints")) {
    files.push_back(e.path().filename().string());
  }
  EXPECT_EQ(files, (std::vector<std::string>{"step_0.json"}));
  const std::string metrics = testing::read_file(dir / "run/metrics.csv");
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 2);
  EXPECT_EQ(metrics.rfind("step,", 0), 0u);
  EXPECT_NE(metrics.find("\n0,nan,nan,nan,nan,"), std::string::npos) << metrics;
  EXPECT_TRUE(fs::exists(dir / "run/config.json"));
  EXPECT_TRUE(fs::exists(dir / "run/timing.csv"));
  // The initial checkpoint is the configured generator.
  const TinyNeuralLM init = neural_from_json(json::parse(testing::read_file(dir / "run/checkpoints/step_0.json")));
  const TinyNeuralLM expected =
      TinyNeuralLM::random(Tokenizer(Alphabet::from_utf8("abc")), {2, 4, 6}, 0.5, 3);
  for (std::size_t k = 0; k < init.parameter_count(); ++k) {
    EXPECT_EQ(init.parameters()[k], expected.parameters()[k]);
  }
}

TEST(CliTrain, RepeatedRunsAreByteIdentical) {
  const auto dir = testing::scratch_dir("cli_train_repeat");
  const auto cfg = write_config(dir, small_run(dir / "run"));
  ASSERT_EQ(testing::run_cli("train " + q(cfg) + " --out " + q(dir / "one")).exit_code, 0);
  ASSERT_EQ(testing::run_cli("train " + q(cfg) + " --out " + q(dir / "two")).exit_code, 0);
  const std::string one = testing::read_file(dir / "one/metrics.csv");
  EXPECT_EQ(one, testing::read_file(dir / "two/metrics.csv"));
  EXPECT_EQ(testing::read_file(dir / "one/checkpoints/step_12.json"),
            testing::read_file(dir / "two/checkpoints/step_12.json"));
  ASSERT_EQ(testing::run_cli("train " + q(cfg) + " --seed 5 --out " + q(dir / "three")).exit_code, 0);
  EXPECT_NE(one, testing::read_file(dir / "three/metrics.csv"));
  // The written config reproduces the run.
  ASSERT_EQ(testing::run_cli("train " + q(dir / "one/config.json") + " --out " + q(dir / "four")).exit_code, 0);
  EXPECT_EQ(one, testing::read_file(dir / "four/metrics.csv"));
}

TEST(CliTrain, InvalidConfigWritesNothing) {
  const auto dir = testing::scratch_dir("cli_train_invalid");
  json j = small_run(dir / "run");
  j["train"]["group_size"] = 1;
  const auto r = testing::run_cli("train " + q(write_config(dir, j)));
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("train.group_size"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "run"));

  j = small_run(dir / "run");
  j["prompts"] = {"z"};
  EXPECT_EQ(testing::run_cli("train " + q(write_config(dir, j))).exit_code, 2);
  EXPECT_FALSE(fs::exists(dir / "run"));
  EXPECT_EQ(testing::run_cli("train " + q(dir / "missing.json")).exit_code, 2);
}

TEST(CliEval, ExactIdentityWithSelfVerifier) {
  const auto dir = testing::scratch_dir("cli_eval");
  json j = small_run(dir / "run");
  j["verifier"] = j["generator"];
  const auto cfg = write_config(dir, j);
  const auto r = testing::run_cli("eval " + q(cfg) + " --exact");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const auto lines = json_lines(r.out);
  ASSERT_EQ(lines.size(), 2u);
  for (const auto& l : lines) {
    EXPECT_EQ(l["neg_kl"].get<double>(), 0.0);
    EXPECT_LT(std::abs(l["residual"].get<double>()), 1e-12);
    EXPECT_NEAR(l["expected_reward"].get<double>(), l["neg_entropy"].get<double>(), 1e-12);
  }
  const auto summary = testing::run_cli("eval " + q(cfg));
  ASSERT_EQ(summary.exit_code, 0) << summary.err;
  const json s = json::parse(summary.out);
  EXPECT_EQ(s["kl_verifier"].get<double>(), 0.0);
  EXPECT_GT(s["kl_gold"].get<double>(), 0.0);
  EXPECT_EQ(s["samples"], 0);
}

TEST(CliEval, CheckpointFromTraining) {
  const auto dir = testing::scratch_dir("cli_eval_ckpt");
  const auto cfg = write_config(dir, small_run(dir / "run"));
  ASSERT_EQ(testing::run_cli("train " + q(cfg)).exit_code, 0);
  const auto r = testing::run_cli("eval " + q(cfg) + " --checkpoint " + q(dir / "run/checkpoints/step_12.json"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const json s = json::parse(r.out);
  const std::string metrics = testing::read_file(dir / "run/metrics.csv");
  const std::string last = metrics.substr(metrics.rfind('\n', metrics.size() - 2) + 1);
  char buffer[40];
  std::snprintf(buffer, sizeof buffer, "%.17g", s["kl_gold"].get<double>());
  EXPECT_NE(last.find(buffer), std::string::npos) << last << " vs " << buffer;
}

TEST(CliSweep, ThreeConditionsGiveThreeSortedRows) {
  const auto dir = testing::scratch_dir("cli_sweep");
  json j = small_run(dir / "sweep");
  j.erase("verifier");
  j["train"]["steps"] = 8;
  j["sweep"] = json::parse(R"({"heldout_samples": 20, "conditions": [
      {"name": "random", "verifier": {"kind": "neural", "tokenizer": {"alphabet": "abc"}, "init_scale": 1.0, "init_seed": 9}},
      {"name": "fit", "verifier": {"kind": "count", "tokenizer": {"alphabet": "abc"}, "corpus": {"gold_samples": 50}}},
      {"name": "gold", "verifier": {"kind": "grammar", "tokenizer": {"alphabet": "abc"}}}]})");
  const auto r = testing::run_cli("sweep " + q(write_config(dir, j)));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_EQ(r.out, testing::read_file(dir / "sweep/sweep.csv"));
  std::istringstream in(r.out);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("rank,name,", 0), 0u);
  std::vector<double> finals;
  std::set<std::string> names;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    ASSERT_EQ(cells.size(), 8u) << line;
    EXPECT_EQ(cells[0], std::to_string(finals.size() + 1));
    names.insert(cells[1]);
    finals.push_back(std::stod(cells[3]));
  }
  ASSERT_EQ(finals.size(), 3u);
  EXPECT_TRUE(std::is_sorted(finals.begin(), finals.end()));
  EXPECT_EQ(names, (std::set<std::string>{"random", "fit", "gold"}));
}

TEST(CliExitCodes, UsageDomainAndNumerical) {
  EXPECT_EQ(testing::run_cli("--help").exit_code, 0);
  EXPECT_EQ(testing::run_cli("").exit_code, 2);
  EXPECT_EQ(testing::run_cli("frobnicate").exit_code, 2);
  EXPECT_EQ(testing::run_cli("align").exit_code, 2);

  const auto dir = testing::scratch_dir("cli_numerical");
  TinyNeuralLM huge = TinyNeuralLM::random(Tokenizer(Alphabet::from_utf8("abc")), {2, 4, 6}, 1.0, 1);
  for (auto& p : huge.parameters()) p *= 1e300;
  save_model(dir / "huge.json", huge);
  json j = small_run(dir / "run");
  j["generator"] = {{"kind", "file"}, {"path", "huge.json"}};
  const auto r = testing::run_cli("train " + q(write_config(dir, j)));
  EXPECT_EQ(r.exit_code, 3) << r.err;
  EXPECT_NE(r.err.find("non-finite"), std::string::npos) << r.err;
}

}  // namespace
}  // namespace cmegrpo
