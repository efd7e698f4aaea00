// Reference scorer: one response at a time, every (generator, verifier) span
// pair intersected directly instead of the alignment sweep.

#include <algorithm>

#include "cmegrpo/errors.hpp"
#include "cmegrpo/rewards.hpp"

namespace cmegrpo::serial {

RewardMatrix token_cme_rewards(std::string_view prompt, std::span<const GeneratorView> responses,
                               const LanguageModel& verifier) {
  std::vector<std::vector<double>> values(responses.size());
  std::vector<std::vector<std::uint8_t>> masks(responses.size());
  RewardMatrix out;
  out.mode = RewardMode::kToken;
  out.rows = responses.size();
  out.totals.assign(out.rows, 0.0);

  for (std::size_t i = 0; i < responses.size(); ++i) {
    const GeneratorView& view = responses[i];
    const TokenizedText ver = verifier.tokenizer().encode(view.tokens.text);
    if (ver.text != view.tokens.text) throw DomainError("response text mismatch");
    const std::vector<double> lp = verifier_logprobs(prompt, view.tokens.text, verifier, view.ended);

    for (std::size_t t = 0; t < view.tokens.tokens.size(); ++t) {
      const CharSpan g = view.tokens.tokens[t].span;
      double sum = 0.0;
      bool covered = false;
      for (std::size_t s = 0; s < ver.tokens.size(); ++s) {
        const CharSpan v = ver.tokens[s].span;
        const std::size_t lo = std::max(g.start, v.start);
        const std::size_t hi = std::min(g.end, v.end);
        if (hi <= lo) continue;
        covered = true;
        sum += static_cast<double>(hi - lo) / static_cast<double>(v.end - v.start) * lp[s];
      }
      const auto piece = view.tokens.piece(t);
      const bool blank = std::all_of(piece.begin(), piece.end(), [](char32_t c) { return c == U' '; });
      const bool valid = covered && !blank;
      out.totals[i] += sum;
      values[i].push_back(valid ? sum : 0.0);
      masks[i].push_back(valid ? 1 : 0);
    }
    if (view.ended) {
      values[i].push_back(lp.back());
      masks[i].push_back(1);
      out.totals[i] += lp.back();
    }
    out.cols = std::max(out.cols, values[i].size());
  }

  out.values.assign(out.rows * out.cols, 0.0);
  out.mask.assign(out.rows * out.cols, 0);
  for (std::size_t i = 0; i < out.rows; ++i) {
    for (std::size_t t = 0; t < values[i].size(); ++t) {
      out.values[i * out.cols + t] = values[i][t];
      out.mask[i * out.cols + t] = masks[i][t];
    }
  }
  return out;
}

}  // namespace cmegrpo::serial
