#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cmegrpo/text_spans.hpp"

namespace cmegrpo {

// Autoregressive next-token model over a tokenizer's vocabulary, optionally
// extended by an end-of-sequence token with id tokenizer().vocab_size().
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual const Tokenizer& tokenizer() const = 0;
  // Size of the output distribution (tokenizer vocabulary plus EOS, if any).
  virtual std::size_t vocab_size() const = 0;
  virtual std::optional<TokenId> eos() const = 0;
  // Writes P(next | context) for every next token into `out`
  // (out.size() == vocab_size()).
  virtual void distribution(std::span<const TokenId> context, std::span<double> out) const = 0;
  virtual std::unique_ptr<LanguageModel> clone() const = 0;

  std::vector<double> full_distribution(std::span<const TokenId> context) const;
  double token_logprob(std::span<const TokenId> context, TokenId next) const;
};

// Sum over response positions of log P(response[k] | prompt ‖ response[<k]).
double sequence_logprob(const LanguageModel& model, std::span<const TokenId> prompt,
                        std::span<const TokenId> response);

// Per-position log-probabilities of `response` under the chain rule.
std::vector<double> token_logprobs(const LanguageModel& model, std::span<const TokenId> prompt,
                                   std::span<const TokenId> response);

class UniformLM final : public LanguageModel {
 public:
  explicit UniformLM(Tokenizer tokenizer, bool with_eos = true);

  const Tokenizer& tokenizer() const override { return tokenizer_; }
  std::size_t vocab_size() const override { return vocab_size_; }
  std::optional<TokenId> eos() const override { return eos_; }
  void distribution(std::span<const TokenId> context, std::span<double> out) const override;
  std::unique_ptr<LanguageModel> clone() const override;

 private:
  Tokenizer tokenizer_;
  std::size_t vocab_size_;
  std::optional<TokenId> eos_;
};

// Additively smoothed n-gram counts: P(v | c) = (count(c, v) + alpha) / (total(c) + alpha * V).
// Contexts are the previous order-1 tokens, padded on the left with a
// begin-of-sequence marker.
class CountLM final : public LanguageModel {
 public:
  using Context = std::vector<TokenId>;  // length order-1, kBos for padding
  static constexpr TokenId kBos = -1;

  CountLM(Tokenizer tokenizer, std::size_t order, double alpha,
          std::map<Context, std::vector<double>> counts);

  const Tokenizer& tokenizer() const override { return tokenizer_; }
  std::size_t vocab_size() const override { return tokenizer_.vocab_size() + 1; }
  std::optional<TokenId> eos() const override { return static_cast<TokenId>(tokenizer_.vocab_size()); }
  void distribution(std::span<const TokenId> context, std::span<double> out) const override;
  std::unique_ptr<LanguageModel> clone() const override;

  std::size_t order() const noexcept { return order_; }
  double alpha() const noexcept { return alpha_; }
  const std::map<Context, std::vector<double>>& counts() const noexcept { return counts_; }
  Context context_key(std::span<const TokenId> context) const;

 private:
  Tokenizer tokenizer_;
  std::size_t order_;
  double alpha_;
  std::map<Context, std::vector<double>> counts_;
  std::map<Context, double> totals_;
};

struct CountFitOptions {
  // Count the transition into EOS at the end of every corpus line. Without it
  // EOS only receives smoothing mass.
  bool count_end = true;
};

CountLM fit_count_lm(const Tokenizer& tokenizer, std::span<const std::string> corpus,
                     std::size_t order, double alpha, CountFitOptions options = {});

struct NeuralConfig {
  std::size_t window = 3;
  std::size_t embed = 8;
  std::size_t hidden = 16;
  friend bool operator==(const NeuralConfig&, const NeuralConfig&) = default;
};

// Fixed-window feed-forward LM:
//   x = [E(c_{-W}), ..., E(c_{-1})], h = tanh(W1 x + b1), p = softmax(W2 h + b2).
// Short contexts are padded on the left with a begin-of-sequence embedding.
// Parameters live in one flat vector (E, W1, b1, W2, b2 in that order).
class TinyNeuralLM final : public LanguageModel {
 public:
  TinyNeuralLM(Tokenizer tokenizer, NeuralConfig config);
  TinyNeuralLM(Tokenizer tokenizer, NeuralConfig config, std::vector<double> parameters);
  // Gaussian initialization with standard deviation `scale`.
  static TinyNeuralLM random(Tokenizer tokenizer, NeuralConfig config, double scale,
                             std::uint64_t seed);

  const Tokenizer& tokenizer() const override { return tokenizer_; }
  std::size_t vocab_size() const override { return vocab_; }
  std::optional<TokenId> eos() const override { return static_cast<TokenId>(vocab_ - 1); }
  void distribution(std::span<const TokenId> context, std::span<double> out) const override;
  std::unique_ptr<LanguageModel> clone() const override;

  const NeuralConfig& config() const noexcept { return config_; }
  std::span<const double> parameters() const noexcept { return params_; }
  std::span<double> parameters() noexcept { return params_; }
  std::size_t parameter_count() const noexcept { return params_.size(); }

  // Intermediate values of one forward pass, reused by backward().
  struct Activations {
    std::vector<std::size_t> inputs;  // embedding rows, length window
    std::vector<double> hidden;
    std::vector<double> logits;
    std::vector<double> probs;
  };
  void forward(std::span<const TokenId> context, Activations& acts) const;
  // grad += scale * d(f)/d(params) where d(f)/d(logits) = dlogits.
  void backward(const Activations& acts, std::span<const double> dlogits, double scale,
                std::span<double> grad) const;
  // grad += scale * d log p(next | context) / d(params).
  void accumulate_logprob_gradient(std::span<const TokenId> context, TokenId next, double scale,
                                   std::span<double> grad) const;

 private:
  Tokenizer tokenizer_;
  NeuralConfig config_;
  std::size_t vocab_;  // outputs, including EOS
  std::size_t embed_offset_ = 0, w1_offset_ = 0, b1_offset_ = 0, w2_offset_ = 0, b2_offset_ = 0;
  std::vector<double> params_;

  std::size_t bos_row() const noexcept { return vocab_; }
};

// Gradient of sum_k log p(response[k] | prompt ‖ response[<k]) with respect to
// the model parameters.
std::vector<double> logprob_gradient(const TinyNeuralLM& model, std::span<const TokenId> prompt,
                                     std::span<const TokenId> response);

struct SamplerConfig {
  // 0 selects greedy decoding (argmax, ties to the lowest id).
  double temperature = 1.0;
  std::size_t max_len = 16;
  std::uint64_t seed = 0;
};

struct SampledResponse {
  std::vector<TokenId> ids;       // includes the EOS token when `ended`
  std::vector<double> logprobs;   // log p at temperature 1, one per id
  bool ended = false;
};

SampledResponse sample_response(const LanguageModel& model, std::span<const TokenId> prompt,
                                const SamplerConfig& cfg, std::mt19937_64& rng);
SampledResponse sample_response(const LanguageModel& model, std::span<const TokenId> prompt,
                                const SamplerConfig& cfg);

// Text tokens of a sampled response (EOS dropped).
std::span<const TokenId> text_ids(const LanguageModel& model, std::span<const TokenId> ids);

}  // namespace cmegrpo
