#include "cmegrpo/rewards.hpp"

#include <algorithm>

#include "cmegrpo/alignment.hpp"
#include "cmegrpo/errors.hpp"
#include "parallel.hpp"

namespace cmegrpo {

std::string to_string(RewardMode mode) {
  return mode == RewardMode::kToken ? "token" : "sequence";
}

RewardMode parse_reward_mode(std::string_view name) {
  if (name == "token") return RewardMode::kToken;
  if (name == "sequence") return RewardMode::kSequence;
  throw DomainError("unknown reward mode '" + std::string(name) + "' (expected token or sequence)");
}

std::vector<double> verifier_logprobs(std::string_view prompt, std::u32string_view response,
                                      const LanguageModel& verifier, bool ended) {
  const Tokenizer& tok = verifier.tokenizer();
  const std::vector<TokenId> prompt_ids = tok.encode(prompt).ids();
  std::vector<TokenId> ids = tok.encode(response).ids();
  if (ended) {
    const auto eos = verifier.eos();
    if (!eos) throw DomainError("verifier has no end-of-sequence token to score");
    ids.push_back(*eos);
  }
  return token_logprobs(verifier, prompt_ids, ids);
}

namespace {

struct RowRewards {
  std::vector<double> values;
  std::vector<std::uint8_t> mask;
  double total = 0.0;
};

RowRewards score_row(std::string_view prompt, const GeneratorView& view,
                     const LanguageModel& verifier) {
  const std::vector<double> ver_lp =
      verifier_logprobs(prompt, view.tokens.text, verifier, view.ended);
  const std::size_t text_len = ver_lp.size() - (view.ended ? 1 : 0);
  const TokenizedText ver_tokens = verifier.tokenizer().encode(view.tokens.text);
  const AlignmentMap map = align(view.tokens, ver_tokens);
  const AlignedLogprobs aligned =
      aligned_logprobs(map, std::span<const double>(ver_lp).first(text_len));

  RowRewards row;
  row.values = aligned.values;
  row.mask.assign(aligned.valid.begin(), aligned.valid.end());
  for (const double v : aligned.unmasked) row.total += v;
  if (view.ended) {
    row.values.push_back(ver_lp.back());
    row.mask.push_back(1);
    row.total += ver_lp.back();
  }
  return row;
}

RewardMatrix assemble(std::vector<RowRewards>& rows, RewardMode mode) {
  RewardMatrix out;
  out.mode = mode;
  out.rows = rows.size();
  for (const auto& row : rows) out.cols = std::max(out.cols, row.values.size());
  out.values.assign(out.rows * out.cols, 0.0);
  out.mask.assign(out.rows * out.cols, 0);
  out.totals.resize(out.rows);
  for (std::size_t i = 0; i < out.rows; ++i) {
    std::copy(rows[i].values.begin(), rows[i].values.end(), out.values.begin() + i * out.cols);
    std::copy(rows[i].mask.begin(), rows[i].mask.end(), out.mask.begin() + i * out.cols);
    out.totals[i] = rows[i].total;
  }
  return out;
}

}  // namespace

RewardMatrix token_cme_rewards(std::string_view prompt, std::span<const GeneratorView> responses,
                               const LanguageModel& verifier) {
  std::vector<RowRewards> rows(responses.size());
  detail::parallel_for(responses.size(),
                       [&](std::size_t i) { rows[i] = score_row(prompt, responses[i], verifier); });
  return assemble(rows, RewardMode::kToken);
}

RewardMatrix token_cme_rewards(std::string_view prompt, std::span<const std::string> responses,
                               const Tokenizer& generator_tokenizer,
                               const LanguageModel& verifier) {
  std::vector<GeneratorView> views;
  views.reserve(responses.size());
  for (const auto& text : responses) views.push_back({generator_tokenizer.encode(text), false});
  return token_cme_rewards(prompt, views, verifier);
}

double sequence_cme_reward(std::string_view prompt, std::string_view response,
                           const LanguageModel& verifier, bool ended) {
  const std::vector<double> lp = verifier_logprobs(prompt, utf8_decode(response), verifier, ended);
  if (lp.empty()) throw DomainError("sequence reward of an empty response is undefined");
  double total = 0.0;
  for (const double v : lp) total += v;
  return total / static_cast<double>(lp.size());
}

RewardMatrix sequence_cme_rewards(std::string_view prompt, std::span<const GeneratorView> responses,
                                  const LanguageModel& verifier) {
  std::vector<RowRewards> rows(responses.size());
  detail::parallel_for(responses.size(), [&](std::size_t i) {
    const GeneratorView& view = responses[i];
    const double reward =
        sequence_cme_reward(prompt, view.tokens.text_utf8(), verifier, view.ended);
    const std::size_t positions = view.tokens.tokens.size() + (view.ended ? 1 : 0);
    rows[i].values.assign(positions, reward);
    rows[i].mask.assign(positions, 1);
    rows[i].total = reward;
  });
  return assemble(rows, RewardMode::kSequence);
}

}  // namespace cmegrpo
