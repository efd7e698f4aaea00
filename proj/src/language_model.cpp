#include "cmegrpo/language_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cmegrpo/errors.hpp"

namespace cmegrpo {

std::vector<double> LanguageModel::full_distribution(std::span<const TokenId> context) const {
  std::vector<double> out(vocab_size());
  distribution(context, out);
  return out;
}

double LanguageModel::token_logprob(std::span<const TokenId> context, TokenId next) const {
  if (next < 0 || static_cast<std::size_t>(next) >= vocab_size()) {
    throw DomainError("token id " + std::to_string(next) + " is outside the model vocabulary");
  }
  std::vector<double> probs(vocab_size());
  distribution(context, probs);
  return std::log(probs[static_cast<std::size_t>(next)]);
}

std::vector<double> token_logprobs(const LanguageModel& model, std::span<const TokenId> prompt,
                                   std::span<const TokenId> response) {
  const std::size_t vocab = model.vocab_size();
  for (const TokenId id : prompt) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw DomainError("prompt token id " + std::to_string(id) + " is outside the vocabulary");
    }
  }
  std::vector<TokenId> context(prompt.begin(), prompt.end());
  context.reserve(prompt.size() + response.size());
  std::vector<double> probs(vocab);
  std::vector<double> out;
  out.reserve(response.size());
  for (const TokenId id : response) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw DomainError("response token id " + std::to_string(id) + " is outside the vocabulary");
    }
    model.distribution(context, probs);
    out.push_back(std::log(probs[static_cast<std::size_t>(id)]));
    context.push_back(id);
  }
  return out;
}

double sequence_logprob(const LanguageModel& model, std::span<const TokenId> prompt,
                        std::span<const TokenId> response) {
  double total = 0.0;
  for (const double lp : token_logprobs(model, prompt, response)) total += lp;
  return total;
}

UniformLM::UniformLM(Tokenizer tokenizer, bool with_eos)
    : tokenizer_(std::move(tokenizer)),
      vocab_size_(tokenizer_.vocab_size() + (with_eos ? 1 : 0)),
      eos_(with_eos ? std::optional<TokenId>(static_cast<TokenId>(tokenizer_.vocab_size()))
                    : std::nullopt) {}

void UniformLM::distribution(std::span<const TokenId>, std::span<double> out) const {
  std::fill(out.begin(), out.end(), 1.0 / static_cast<double>(vocab_size_));
}

std::unique_ptr<LanguageModel> UniformLM::clone() const {
  return std::make_unique<UniformLM>(*this);
}

namespace {

TokenId draw(std::span<const double> probs, double temperature, std::mt19937_64& rng) {
  if (temperature == 0.0) {
    return static_cast<TokenId>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  }
  std::vector<double> weights(probs.size());
  if (temperature == 1.0) {
    std::copy(probs.begin(), probs.end(), weights.begin());
  } else {
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < probs.size(); ++k) {
      weights[k] = probs[k] > 0.0 ? std::log(probs[k]) / temperature
                                  : -std::numeric_limits<double>::infinity();
      top = std::max(top, weights[k]);
    }
    for (auto& w : weights) w = std::exp(w - top);
  }
  double total = 0.0;
  for (const double w : weights) total += w;
  const double u = std::generate_canonical<double, 53>(rng) * total;
  double cumulative = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    cumulative += weights[k];
    if (u < cumulative) return static_cast<TokenId>(k);
  }
  // u landed in the rounding gap above the last partial sum.
  for (std::size_t k = weights.size(); k-- > 0;) {
    if (weights[k] > 0.0) return static_cast<TokenId>(k);
  }
  return 0;
}

}  // namespace

SampledResponse sample_response(const LanguageModel& model, std::span<const TokenId> prompt,
                                const SamplerConfig& cfg, std::mt19937_64& rng) {
  if (!(cfg.temperature >= 0.0) || !std::isfinite(cfg.temperature)) {
    throw DomainError("sampling temperature must be finite and non-negative");
  }
  SampledResponse out;
  std::vector<TokenId> context(prompt.begin(), prompt.end());
  std::vector<double> probs(model.vocab_size());
  const auto eos = model.eos();
  while (out.ids.size() < cfg.max_len) {
    model.distribution(context, probs);
    const TokenId next = draw(probs, cfg.temperature, rng);
    out.ids.push_back(next);
    out.logprobs.push_back(std::log(probs[static_cast<std::size_t>(next)]));
    if (eos && next == *eos) {
      out.ended = true;
      break;
    }
    context.push_back(next);
  }
  return out;
}

SampledResponse sample_response(const LanguageModel& model, std::span<const TokenId> prompt,
                                const SamplerConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  return sample_response(model, prompt, cfg, rng);
}

std::span<const TokenId> text_ids(const LanguageModel& model, std::span<const TokenId> ids) {
  const auto eos = model.eos();
  if (eos && !ids.empty() && ids.back() == *eos) return ids.first(ids.size() - 1);
  return ids;
}

}  // namespace cmegrpo
