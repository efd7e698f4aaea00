#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cmegrpo/analysis.hpp"
#include "cmegrpo/grpo.hpp"
#include "cmegrpo/language_model.hpp"
#include "cmegrpo/rewards.hpp"

namespace cmegrpo {

enum class OptimizerKind { kSgd, kAdam };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

struct EvalConfig {
  std::size_t budget = kDefaultEnumerationBudget;
  // Monte Carlo estimates when exact enumeration would exceed the budget.
  bool sampled_fallback = false;
  std::size_t samples = 2000;
  std::uint64_t seed = 0;
};

struct TrainConfig {
  GrpoConfig grpo;
  SamplerConfig sampler{1.0, 6, 0};
  RewardMode reward_mode = RewardMode::kToken;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double step_size = 0.05;
  double grad_clip = 1.0;  // 0 disables
  std::size_t steps = 300;
  std::size_t eval_every = 25;
  std::size_t checkpoint_every = 0;  // 0: initial and final only
  std::uint64_t seed = 0;
  EvalConfig eval;
};

struct MetricsRecord {
  std::size_t step = 0;
  // Statistics of the group used by the most recent update (NaN at step 0).
  double group_reward = 0.0;        // mean sequence reward of the sampled group
  double mean_abs_advantage = 0.0;  // over valid positions
  double loss = 0.0;
  double grad_norm = 0.0;           // before clipping
  // Policy diagnostics, averaged over prompts. NaN when undefined (no gold,
  // or a verifier with a different tokenizer).
  double kl_verifier = 0.0;         // KL(policy || verifier)
  double kl_gold = 0.0;             // KL(policy || gold)
  double entropy = 0.0;
  double expected_cme = 0.0;        // E[mean-form sequence reward]
  std::size_t samples = 0;          // 0 for exact enumeration
  double wall_seconds = 0.0;
};

// Exact (or, with the fallback enabled, sampled) policy diagnostics over
// responses of at most max_len tokens.
MetricsRecord evaluate(const LanguageModel& policy, const LanguageModel& verifier,
                       const LanguageModel* gold, std::span<const std::string> prompts,
                       std::size_t max_len, const EvalConfig& cfg);

// G responses to one prompt. Response i of step s draws from its own stream
// seeded by (seed, s, i).
RolloutGroup sample_group(const LanguageModel& policy, std::string_view prompt,
                          std::size_t group_size, const SamplerConfig& sampler, std::uint64_t seed,
                          std::size_t step);

struct TrainResult {
  TinyNeuralLM model;
  std::vector<MetricsRecord> metrics;
};

using CheckpointSink = std::function<void(std::size_t step, const TinyNeuralLM& model)>;

// CME-GRPO: per step, sample a group for the next prompt (round-robin), score
// it with the frozen verifier, normalize, and apply one optimizer update.
// The reference for the KL anchor is a frozen copy of `generator`.
TrainResult train(const TinyNeuralLM& generator, const LanguageModel& verifier,
                  std::span<const std::string> prompts, const TrainConfig& cfg,
                  const LanguageModel* gold = nullptr, const CheckpointSink& checkpoint = {});

struct SweepCondition {
  std::string name;
  std::shared_ptr<const LanguageModel> verifier;
};

struct SweepRow {
  std::string name;
  double initial_kl_gold = 0.0;
  double final_kl_gold = 0.0;
  double kl_gold_improvement = 0.0;  // initial - final
  double final_expected_cme = 0.0;   // under the condition's own verifier
  double final_kl_verifier = 0.0;
  double heldout_nll = 0.0;          // verifier NLL per character on held-out text, NaN if none
};

struct SweepOptions {
  std::size_t replicates = 1;
  std::vector<std::string> heldout;  // gold samples for the verifier-quality column
};

// Negative log-likelihood per character of `texts` (each closed by EOS when
// the model has one; the EOS counts as one character).
double heldout_nll_per_char(const LanguageModel& model, std::span<const std::string> texts);

// Trains one generator per condition and replicate from the same
// initialization; replicate r uses training seed cfg.seed + r, and row values
// are replicate means. Rows come back sorted by final KL to gold (stable on
// ties). At least one condition must use a TinyNeuralLM verifier as the
// untrained control.
std::vector<SweepRow> verifier_sweep(const TinyNeuralLM& generator,
                                     std::span<const SweepCondition> conditions,
                                     std::span<const std::string> prompts, const TrainConfig& cfg,
                                     const LanguageModel& gold, const SweepOptions& options = {});

void write_metrics_csv(std::ostream& out, std::span<const MetricsRecord> records);
void write_timing_csv(std::ostream& out, std::span<const MetricsRecord> records);
void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows);

// The toy "quality oracle": a smoothed trigram model fit on a fixed phrase
// list over the alphabet "abc".
std::vector<std::string> grammar_phrases();
CountLM synthetic_grammar(const Tokenizer& tokenizer);
// Prompts for grammar runs: the single-character prefixes.
std::vector<std::string> grammar_prompts();
// `count` strings sampled from `model` with an empty prompt.
std::vector<std::string> sample_corpus(const LanguageModel& model, std::size_t count,
                                       std::size_t max_len, std::uint64_t seed);

}  // namespace cmegrpo
