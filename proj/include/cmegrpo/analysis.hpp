#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "cmegrpo/language_model.hpp"

namespace cmegrpo {

inline constexpr std::size_t kDefaultEnumerationBudget = 1'000'000;

struct SequenceAtom {
  std::vector<TokenId> ids;  // EOS last when `ended`
  double logprob = 0.0;
  bool ended = false;
};

// Every response of at most max_len tokens with its chain-rule probability.
// Responses that reach max_len without EOS are kept as atoms of their own
// and their mass is reported in truncated_mass (zero for models without
// EOS, whose responses all have exactly max_len tokens).
struct SequenceDistribution {
  std::size_t max_len = 0;
  std::vector<SequenceAtom> atoms;
  double truncated_mass = 0.0;

  double total_mass() const;
};

// Number of atoms enumerate_distribution would produce (saturating).
std::size_t enumeration_size(const LanguageModel& model, std::size_t max_len);

// Exhaustive enumeration, partitioned by first token across threads. Throws
// DomainError when the atom count exceeds `budget`.
SequenceDistribution enumerate_distribution(const LanguageModel& model,
                                            std::span<const TokenId> prompt, std::size_t max_len,
                                            std::size_t budget = kDefaultEnumerationBudget);

// KL(p || q) = sum_y p(y) log(p(y) / q(y)) over p's atoms.
double exact_reverse_kl(const SequenceDistribution& p, const SequenceDistribution& q);
double entropy(const SequenceDistribution& p);

struct IdentityCheck {
  double expected_reward = 0.0;  // E_{y~gen}[log ver(y)]
  double neg_entropy = 0.0;      // -H(gen)
  double neg_kl = 0.0;           // -KL(gen || ver)
  double residual = 0.0;         // expected_reward - (neg_entropy + neg_kl)
  double truncated_mass = 0.0;   // of the generator enumeration
};

// Expected sequence log-likelihood under the verifier equals
// -H(gen) - KL(gen || ver). Both models must share a tokenizer.
IdentityCheck exact_identity_check(const LanguageModel& gen, const LanguageModel& ver,
                                   std::string_view prompt, std::size_t max_len,
                                   std::size_t budget = kDefaultEnumerationBudget);

// sum_y gen(y) * r(y) with r the verifier's summed (sum form) or mean (mean
// form) log-probability of the decoded response under the verifier's own
// tokenization. Works across tokenizers.
struct ExpectedCme {
  double sum_form = 0.0;
  double mean_form = 0.0;
};
ExpectedCme expected_cme(const LanguageModel& gen, const LanguageModel& ver, std::string_view prompt,
                         std::size_t max_len, std::size_t budget = kDefaultEnumerationBudget);

// Gradient of the sequence-mode surrogate at theta = theta_old (beta = 0)
// with the sampled group replaced by the full response distribution:
//   -sum_y gen(y) A(y) / |y| * grad log gen(y),  A = (r - E r) / std r
// where r is the mean-form sequence reward.
std::vector<double> infinite_group_gradient(const TinyNeuralLM& gen, const LanguageModel& ver,
                                            std::string_view prompt, std::size_t max_len,
                                            std::size_t budget = kDefaultEnumerationBudget);

namespace serial {
SequenceDistribution enumerate_distribution(const LanguageModel& model,
                                            std::span<const TokenId> prompt, std::size_t max_len,
                                            std::size_t budget = kDefaultEnumerationBudget);
}  // namespace serial

}  // namespace cmegrpo
