#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cmegrpo/language_model.hpp"
#include "cmegrpo/text_spans.hpp"

namespace cmegrpo {

enum class RewardMode { kToken, kSequence };

std::string to_string(RewardMode mode);
RewardMode parse_reward_mode(std::string_view name);

// Row-major G x T_max reward table. Masked entries are exactly zero.
struct RewardMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  std::vector<std::uint8_t> mask;
  // Per row: sum of the unmasked-and-masked token rewards before masking
  // (token mode), or the scalar reward (sequence mode).
  std::vector<double> totals;
  RewardMode mode = RewardMode::kToken;

  double at(std::size_t row, std::size_t col) const { return values[row * cols + col]; }
  bool valid(std::size_t row, std::size_t col) const { return mask[row * cols + col] != 0; }
};

// A generator-side response: its own segmentation of the text, and whether
// it was closed by the generator's end-of-sequence token. A closed response
// carries one extra position (index tokens.size()) scored with the
// verifier's end-of-sequence log-probability.
struct GeneratorView {
  TokenizedText tokens;
  bool ended = false;
};

// Verifier per-token log-probabilities of `response` under its own
// tokenization, conditioned on the verifier-tokenized prompt. Appends the
// EOS term when `ended`.
std::vector<double> verifier_logprobs(std::string_view prompt, std::u32string_view response,
                                      const LanguageModel& verifier, bool ended = false);

// Token-level rewards r[i,t] = aligned verifier log-probability at generator
// position t.
RewardMatrix token_cme_rewards(std::string_view prompt, std::span<const GeneratorView> responses,
                               const LanguageModel& verifier);
RewardMatrix token_cme_rewards(std::string_view prompt, std::span<const std::string> responses,
                               const Tokenizer& generator_tokenizer, const LanguageModel& verifier);

// Mean verifier log-probability over the verifier tokenization of the
// response (negated sequence-level cross-model entropy).
double sequence_cme_reward(std::string_view prompt, std::string_view response,
                           const LanguageModel& verifier, bool ended = false);

// Sequence-mode matrix: each row holds its scalar reward at every generator
// position, all positions valid.
RewardMatrix sequence_cme_rewards(std::string_view prompt, std::span<const GeneratorView> responses,
                                  const LanguageModel& verifier);

namespace serial {
RewardMatrix token_cme_rewards(std::string_view prompt, std::span<const GeneratorView> responses,
                               const LanguageModel& verifier);
}  // namespace serial

}  // namespace cmegrpo
