// cmegrpo: align, score, train, sweep and eval from the command line.
//
// Payloads (JSON or CSV) go to standard output, diagnostics to standard
// error. Exit codes: 0 success, 2 domain or configuration error, 3 numerical
// abort.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cmegrpo/alignment.hpp"
#include "cmegrpo/analysis.hpp"
#include "cmegrpo/checkpoint.hpp"
#include "cmegrpo/errors.hpp"
#include "cmegrpo/rewards.hpp"
#include "cmegrpo/run_config.hpp"
#include "cmegrpo/trainer.hpp"

namespace fs = std::filesystem;
using namespace cmegrpo;

namespace {

constexpr int kExitDomain = 2;
constexpr int kExitNumerical = 3;

std::string num(double v) {
  if (std::isnan(v)) return "null";
  char buffer[40];
  std::snprintf(buffer, sizeof buffer, "%.17g", v);
  return buffer;
}

struct TokenizerFlags {
  std::string kind = "char";
  std::string merges;
  std::string alphabet;
};

Tokenizer tokenizer_from_flags(const TokenizerFlags& flags, const std::string& shared_alphabet,
                               const std::string& role) {
  TokenizerSpec spec;
  if (flags.kind != "char" && flags.kind != "merge") {
    throw DomainError(role + " tokenizer must be 'char' or 'merge', got '" + flags.kind + "'");
  }
  spec.kind = flags.kind;
  spec.alphabet = flags.alphabet.empty() ? shared_alphabet : flags.alphabet;
  if (spec.kind == "merge") {
    if (flags.merges.empty()) throw DomainError(role + " merge tokenizer needs a merge table path");
    spec.merges_path = flags.merges;
  } else if (!flags.merges.empty()) {
    throw DomainError(role + " merge table given for a char tokenizer");
  }
  return build_tokenizer(spec);
}

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::string reward_mode;
  std::string out;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Training seed (default: the config's, else 0)");
  cmd->add_option("--steps", o.steps, "Number of optimizer steps");
  cmd->add_option("--reward-mode", o.reward_mode, "token or sequence");
  cmd->add_option("--out", o.out, "Output directory (overrides output_dir)");
}

RunConfig load_with_overrides(const std::string& path, const Overrides& o) {
  RunConfig cfg = load_run_config(path);
  if (o.seed) {
    cfg.train.seed = *o.seed;
    cfg.train.eval.seed = *o.seed;
  }
  if (o.steps) cfg.train.steps = *o.steps;
  if (!o.reward_mode.empty()) cfg.train.reward_mode = parse_reward_mode(o.reward_mode);
  if (!o.out.empty()) cfg.output_dir = o.out;
  return cfg;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
  if (!out) throw DomainError("cannot write " + path.string());
}

void prepare_output_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DomainError("cannot create output directory " + dir.string() + ": " + ec.message());
}

int cmd_align(const std::string& text, const TokenizerFlags& gen_flags,
              const TokenizerFlags& ver_flags, const std::string& alphabet) {
  const Tokenizer gen_tok = tokenizer_from_flags(gen_flags, alphabet, "generator");
  const Tokenizer ver_tok = tokenizer_from_flags(ver_flags, alphabet, "verifier");
  if (!(gen_tok.alphabet() == ver_tok.alphabet())) {
    throw DomainError("generator alphabet \"" + gen_tok.alphabet().to_utf8() +
                      "\" differs from verifier alphabet \"" + ver_tok.alphabet().to_utf8() + "\"");
  }
  const TokenizedText gen = gen_tok.encode(text);
  const TokenizedText ver = ver_tok.encode(text);
  const std::string map = alignment_json(align(gen, ver));
  std::cout << "{\"generator\":" << to_json(gen).dump() << ",\"verifier\":" << to_json(ver).dump()
            << "," << map.substr(1) << "\n";
  return 0;
}

int cmd_score(const std::string& config_path, const std::string& prompt,
              const std::vector<std::string>& responses, const std::string& mode_name,
              bool ended) {
  const RunConfig cfg = load_run_config(config_path);
  const RunModels models = build_run_models(cfg, false);
  const RewardMode mode = mode_name.empty() ? cfg.train.reward_mode : parse_reward_mode(mode_name);

  std::vector<GeneratorView> views;
  for (const auto& r : responses) views.push_back({models.generator.tokenizer().encode(r), ended});
  const RewardMatrix m = mode == RewardMode::kToken
                             ? token_cme_rewards(prompt, views, *models.verifier)
                             : sequence_cme_rewards(prompt, views, *models.verifier);
  std::ostringstream out;
  for (std::size_t i = 0; i < m.rows; ++i) {
    const std::size_t len = views[i].tokens.tokens.size() + (ended ? 1 : 0);
    out << "{\"response_index\":" << i << ",\"rewards\":[";
    for (std::size_t t = 0; t < len; ++t) out << (t ? "," : "") << num(m.at(i, t));
    out << "],\"mask\":[";
    for (std::size_t t = 0; t < len; ++t) out << (t ? "," : "") << (m.valid(i, t) ? "true" : "false");
    out << "],\"total\":" << num(m.totals[i]) << "}\n";
  }
  std::cout << out.str();
  return 0;
}

int cmd_train(const std::string& config_path, const Overrides& o) {
  const RunConfig cfg = load_with_overrides(config_path, o);
  const RunModels models = build_run_models(cfg, false);

  const fs::path dir = cfg.output_dir;
  prepare_output_dir(dir / "checkpoints");
  write_file(dir / "config.json", run_config_to_json(cfg).dump(2) + "\n");

  const CheckpointSink sink = [&](std::size_t step, const TinyNeuralLM& model) {
    save_model(dir / "checkpoints" / ("step_" + std::to_string(step) + ".json"), model);
  };
  const TrainResult result =
      train(models.generator, *models.verifier, cfg.prompts, cfg.train, models.gold.get(), sink);

  std::ostringstream metrics;
  write_metrics_csv(metrics, result.metrics);
  write_file(dir / "metrics.csv", metrics.str());
  std::ostringstream timing;
  write_timing_csv(timing, result.metrics);
  write_file(dir / "timing.csv", timing.str());
  std::cerr << "wrote " << dir.string() << "\n";
  return 0;
}

int cmd_sweep(const std::string& config_path, const Overrides& o) {
  const RunConfig cfg = load_with_overrides(config_path, o);
  const RunModels models = build_run_models(cfg, true);

  const fs::path dir = cfg.output_dir;
  prepare_output_dir(dir);
  write_file(dir / "config.json", run_config_to_json(cfg).dump(2) + "\n");

  SweepOptions options;
  options.replicates = cfg.sweep->replicates;
  options.heldout = models.heldout;
  const auto rows = verifier_sweep(models.generator, models.conditions, cfg.prompts, cfg.train,
                                   *models.gold, options);
  std::ostringstream csv;
  write_sweep_csv(csv, rows);
  write_file(dir / "sweep.csv", csv.str());
  std::cout << csv.str();
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint, bool exact,
             std::optional<std::size_t> max_len_flag, std::optional<std::uint64_t> seed) {
  RunConfig cfg = load_run_config(config_path);
  if (seed) cfg.train.eval.seed = *seed;
  const RunModels models = build_run_models(cfg, false);
  const std::unique_ptr<LanguageModel> policy =
      checkpoint.empty() ? models.generator.clone() : load_model(checkpoint);
  const std::size_t max_len = max_len_flag.value_or(cfg.train.sampler.max_len);

  if (exact) {
    std::ostringstream out;
    for (const auto& prompt : cfg.prompts) {
      const IdentityCheck c =
          exact_identity_check(*policy, *models.verifier, prompt, max_len, cfg.train.eval.budget);
      out << "{\"prompt\":" << nlohmann::json(prompt).dump() << ",\"max_len\":" << max_len
          << ",\"expected_reward\":" << num(c.expected_reward)
          << ",\"neg_entropy\":" << num(c.neg_entropy) << ",\"neg_kl\":" << num(c.neg_kl)
          << ",\"residual\":" << num(c.residual) << ",\"truncated_mass\":" << num(c.truncated_mass)
          << "}\n";
    }
    std::cout << out.str();
    return 0;
  }
  const MetricsRecord m = evaluate(*policy, *models.verifier, models.gold.get(), cfg.prompts,
                                   max_len, cfg.train.eval);
  std::cout << "{\"kl_verifier\":" << num(m.kl_verifier) << ",\"kl_gold\":" << num(m.kl_gold)
            << ",\"entropy\":" << num(m.entropy) << ",\"expected_cme\":" << num(m.expected_cme)
            << ",\"samples\":" << m.samples << "}\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Label-free GRPO with a cross-model entropy reward"};
  app.require_subcommand(1);

  std::string text, alphabet;
  TokenizerFlags gen_flags, ver_flags;
  auto* align_cmd = app.add_subcommand("align", "Character-overlap alignment of two tokenizations");
  align_cmd->add_option("--text", text, "Text to tokenize")->required();
  align_cmd->add_option("--alphabet", alphabet, "Alphabet shared by both tokenizers");
  align_cmd->add_option("--gen", gen_flags.kind, "Generator tokenizer: char or merge");
  align_cmd->add_option("--gen-merges", gen_flags.merges, "Generator merge table");
  align_cmd->add_option("--gen-alphabet", gen_flags.alphabet, "Generator alphabet");
  align_cmd->add_option("--ver", ver_flags.kind, "Verifier tokenizer: char or merge");
  align_cmd->add_option("--ver-merges", ver_flags.merges, "Verifier merge table");
  align_cmd->add_option("--ver-alphabet", ver_flags.alphabet, "Verifier alphabet");

  std::string config, prompt, mode;
  std::vector<std::string> responses;
  bool ended = false;
  auto* score_cmd = app.add_subcommand("score", "Verifier rewards for given responses");
  score_cmd->add_option("config", config, "Run config (generator and verifier)")->required();
  score_cmd->add_option("--prompt", prompt, "Prompt text")->required();
  score_cmd->add_option("--response", responses, "Response text (repeatable)")->required();
  score_cmd->add_option("--reward-mode", mode, "token or sequence (default: the config's)");
  score_cmd->add_flag("--ended", ended, "Treat responses as closed by end-of-sequence");

  Overrides train_o, sweep_o;
  auto* train_cmd = app.add_subcommand("train", "Train a generator and write a run directory");
  train_cmd->add_option("config", config, "Run config")->required();
  add_overrides(train_cmd, train_o);

  auto* sweep_cmd = app.add_subcommand("sweep", "Train against each verifier condition");
  sweep_cmd->add_option("config", config, "Run config with a sweep section")->required();
  add_overrides(sweep_cmd, sweep_o);

  std::string checkpoint;
  bool exact = false;
  std::optional<std::size_t> max_len;
  std::optional<std::uint64_t> eval_seed;
  auto* eval_cmd = app.add_subcommand("eval", "Exact policy diagnostics");
  eval_cmd->add_option("config", config, "Run config")->required();
  eval_cmd->add_option("--checkpoint", checkpoint, "Model file to evaluate instead of the generator");
  eval_cmd->add_flag("--exact", exact, "Print the expected-reward identity per prompt");
  eval_cmd->add_option("--max-len", max_len, "Response length bound (default: train.max_len)");
  eval_cmd->add_option("--seed", eval_seed, "Seed for sampled estimates");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitDomain;
  }

  try {
    if (*align_cmd) return cmd_align(text, gen_flags, ver_flags, alphabet);
    if (*score_cmd) return cmd_score(config, prompt, responses, mode, ended);
    if (*train_cmd) return cmd_train(config, train_o);
    if (*sweep_cmd) return cmd_sweep(config, sweep_o);
    if (*eval_cmd) return cmd_eval(config, checkpoint, exact, max_len, eval_seed);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDomain;
  }
  return 0;
}
