#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cmegrpo/language_model.hpp"
#include "cmegrpo/rewards.hpp"

namespace cmegrpo {

struct GrpoConfig {
  std::size_t group_size = 8;
  double clip_eps = 0.2;
  double kl_beta = 0.0;
};

// Group-normalized advantages, same shape and mask as the rewards they came
// from. Token mode keeps one (mean, std) pair per column; sequence mode keeps
// a single pair.
struct AdvantageMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  std::vector<std::uint8_t> mask;
  std::vector<double> mean;
  std::vector<double> stddev;

  double at(std::size_t row, std::size_t col) const { return values[row * cols + col]; }
  bool valid(std::size_t row, std::size_t col) const { return mask[row * cols + col] != 0; }
};

// Below this spread (or with fewer than two valid samples) a position carries
// no signal and all its advantages are zero.
inline constexpr double kDegenerateStd = 1e-8;

// Per column: A = (r - mean) / std over the valid rows, population std.
AdvantageMatrix normalize_token(const RewardMatrix& rewards);
// One statistic across the group.
std::vector<double> normalize_sequence(std::span<const double> rewards);
// Sequence-mode matrix: normalizes RewardMatrix::totals and broadcasts each
// row's advantage over its valid positions.
AdvantageMatrix normalize_sequence(const RewardMatrix& rewards);
// Dispatches on rewards.mode.
AdvantageMatrix normalize(const RewardMatrix& rewards);

double clipped_surrogate(double rho, double advantage, double eps);

// Mean over contexts of the exact KL(policy(.|c) || reference(.|c)).
double kl_to_reference(const LanguageModel& policy, const LanguageModel& reference,
                       std::span<const std::vector<TokenId>> contexts);

struct Rollout {
  std::vector<TokenId> ids;            // generator tokens, EOS last when `ended`
  std::vector<double> old_logprobs;    // log pi_old(ids[t] | prompt, ids[<t])
  bool ended = false;
  TokenizedText text;                  // generator view of the text tokens
};

struct RolloutGroup {
  std::string prompt;
  std::vector<TokenId> prompt_ids;     // generator tokenization of the prompt
  std::vector<Rollout> responses;
};

struct LossResult {
  double loss = 0.0;
  double surrogate = 0.0;   // -(1/G) sum_i (1/|y_i|) sum_t min(...)
  double kl = 0.0;          // mean per-context KL to the reference (0 when beta = 0)
  std::vector<double> gradient;
};

// Clipped-surrogate loss with KL anchor, and its analytic gradient:
//   L = -(1/G) sum_i (1/|y_i|) sum_{t valid} min(rho A, clip(rho, 1-eps, 1+eps) A)
//       + beta * KL(policy || reference)
// |y_i| counts the valid positions of row i. The KL is the mean exact
// per-context divergence over every sampled context of the group.
LossResult cme_grpo_loss(const RolloutGroup& group, const AdvantageMatrix& advantages,
                         const TinyNeuralLM& policy, const LanguageModel* reference,
                         const GrpoConfig& cfg);

namespace serial {
LossResult cme_grpo_loss(const RolloutGroup& group, const AdvantageMatrix& advantages,
                         const TinyNeuralLM& policy, const LanguageModel* reference,
                         const GrpoConfig& cfg);
}  // namespace serial

}  // namespace cmegrpo
