#include <random>

#include "cmegrpo/trainer.hpp"

namespace cmegrpo {

std::vector<std::string> grammar_phrases() {
  // Repetition sets the relative weight of each phrase.
  return {
      "abc", "abc", "abc", "abc", "abca", "abca", "ab",  "ab",  "acb", "acb",
      "bca", "bca", "bca", "bcab", "bcab", "bc", "ba",  "bac", "cab", "cab",
      "cab", "cabc", "cabc", "ca", "cb",  "cba",
  };
}

CountLM synthetic_grammar(const Tokenizer& tokenizer) {
  const auto phrases = grammar_phrases();
  return fit_count_lm(tokenizer, phrases, 3, 0.02);
}

std::vector<std::string> grammar_prompts() { return {"a", "b", "c"}; }

std::vector<std::string> sample_corpus(const LanguageModel& model, std::size_t count,
                                       std::size_t max_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SamplerConfig cfg;
  cfg.max_len = max_len;
  std::vector<std::string> corpus;
  corpus.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const SampledResponse r = sample_response(model, {}, cfg, rng);
    corpus.push_back(model.tokenizer().decode(text_ids(model, r.ids)));
  }
  return corpus;
}

}  // namespace cmegrpo
