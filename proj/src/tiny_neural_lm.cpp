#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "cmegrpo/errors.hpp"
#include "cmegrpo/language_model.hpp"

namespace cmegrpo {

TinyNeuralLM::TinyNeuralLM(Tokenizer tokenizer, NeuralConfig config)
    : tokenizer_(std::move(tokenizer)), config_(config), vocab_(tokenizer_.vocab_size() + 1) {
  if (config_.window == 0 || config_.embed == 0 || config_.hidden == 0) {
    throw DomainError("neural model window, embedding and hidden sizes must be positive");
  }
  const std::size_t rows = vocab_ + 1;  // outputs plus the begin-of-sequence row
  const std::size_t in = config_.window * config_.embed;
  embed_offset_ = 0;
  w1_offset_ = embed_offset_ + rows * config_.embed;
  b1_offset_ = w1_offset_ + config_.hidden * in;
  w2_offset_ = b1_offset_ + config_.hidden;
  b2_offset_ = w2_offset_ + vocab_ * config_.hidden;
  params_.assign(b2_offset_ + vocab_, 0.0);
}

TinyNeuralLM::TinyNeuralLM(Tokenizer tokenizer, NeuralConfig config, std::vector<double> parameters)
    : TinyNeuralLM(std::move(tokenizer), config) {
  if (parameters.size() != params_.size()) {
    throw DomainError("expected " + std::to_string(params_.size()) + " parameters, got " +
                      std::to_string(parameters.size()));
  }
  params_ = std::move(parameters);
}

TinyNeuralLM TinyNeuralLM::random(Tokenizer tokenizer, NeuralConfig config, double scale,
                                  std::uint64_t seed) {
  TinyNeuralLM model(std::move(tokenizer), config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  for (auto& p : model.params_) p = normal(rng);
  return model;
}

void TinyNeuralLM::forward(std::span<const TokenId> context, Activations& acts) const {
  const std::size_t window = config_.window;
  const std::size_t embed = config_.embed;
  const std::size_t hidden = config_.hidden;

  acts.inputs.assign(window, bos_row());
  const std::size_t take = std::min(window, context.size());
  for (std::size_t k = 0; k < take; ++k) {
    const TokenId id = context[context.size() - take + k];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_) {
      throw DomainError("context token id " + std::to_string(id) + " is outside the vocabulary");
    }
    acts.inputs[window - take + k] = static_cast<std::size_t>(id);
  }

  const double* w1 = params_.data() + w1_offset_;
  const double* b1 = params_.data() + b1_offset_;
  acts.hidden.assign(hidden, 0.0);
  for (std::size_t j = 0; j < hidden; ++j) {
    double z = b1[j];
    const double* row = w1 + j * window * embed;
    for (std::size_t w = 0; w < window; ++w) {
      const double* e = params_.data() + embed_offset_ + acts.inputs[w] * embed;
      for (std::size_t d = 0; d < embed; ++d) z += row[w * embed + d] * e[d];
    }
    acts.hidden[j] = std::tanh(z);
  }

  const double* w2 = params_.data() + w2_offset_;
  const double* b2 = params_.data() + b2_offset_;
  acts.logits.assign(vocab_, 0.0);
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < vocab_; ++v) {
    double z = b2[v];
    for (std::size_t j = 0; j < hidden; ++j) z += w2[v * hidden + j] * acts.hidden[j];
    acts.logits[v] = z;
    top = std::max(top, z);
  }
  acts.probs.resize(vocab_);
  double total = 0.0;
  for (std::size_t v = 0; v < vocab_; ++v) {
    acts.probs[v] = std::exp(acts.logits[v] - top);
    total += acts.probs[v];
  }
  for (auto& p : acts.probs) p /= total;
}

void TinyNeuralLM::backward(const Activations& acts, std::span<const double> dlogits, double scale,
                            std::span<double> grad) const {
  const std::size_t window = config_.window;
  const std::size_t embed = config_.embed;
  const std::size_t hidden = config_.hidden;
  const double* w1 = params_.data() + w1_offset_;
  const double* w2 = params_.data() + w2_offset_;
  double* g_embed = grad.data() + embed_offset_;
  double* g_w1 = grad.data() + w1_offset_;
  double* g_b1 = grad.data() + b1_offset_;
  double* g_w2 = grad.data() + w2_offset_;
  double* g_b2 = grad.data() + b2_offset_;

  std::vector<double> dhidden(hidden, 0.0);
  for (std::size_t v = 0; v < vocab_; ++v) {
    const double dz = scale * dlogits[v];
    if (dz == 0.0) continue;
    g_b2[v] += dz;
    for (std::size_t j = 0; j < hidden; ++j) {
      g_w2[v * hidden + j] += dz * acts.hidden[j];
      dhidden[j] += dz * w2[v * hidden + j];
    }
  }
  for (std::size_t j = 0; j < hidden; ++j) {
    const double dz = dhidden[j] * (1.0 - acts.hidden[j] * acts.hidden[j]);
    if (dz == 0.0) continue;
    g_b1[j] += dz;
    const double* row = w1 + j * window * embed;
    double* g_row = g_w1 + j * window * embed;
    for (std::size_t w = 0; w < window; ++w) {
      const std::size_t r = acts.inputs[w];
      const double* e = params_.data() + embed_offset_ + r * embed;
      double* g_e = g_embed + r * embed;
      for (std::size_t d = 0; d < embed; ++d) {
        g_row[w * embed + d] += dz * e[d];
        g_e[d] += dz * row[w * embed + d];
      }
    }
  }
}

void TinyNeuralLM::accumulate_logprob_gradient(std::span<const TokenId> context, TokenId next,
                                               double scale, std::span<double> grad) const {
  Activations acts;
  forward(context, acts);
  std::vector<double> dlogits(vocab_);
  for (std::size_t v = 0; v < vocab_; ++v) dlogits[v] = -acts.probs[v];
  dlogits[static_cast<std::size_t>(next)] += 1.0;
  backward(acts, dlogits, scale, grad);
}

void TinyNeuralLM::distribution(std::span<const TokenId> context, std::span<double> out) const {
  Activations acts;
  forward(context, acts);
  std::copy(acts.probs.begin(), acts.probs.end(), out.begin());
}

std::unique_ptr<LanguageModel> TinyNeuralLM::clone() const {
  return std::make_unique<TinyNeuralLM>(*this);
}

std::vector<double> logprob_gradient(const TinyNeuralLM& model, std::span<const TokenId> prompt,
                                     std::span<const TokenId> response) {
  std::vector<double> grad(model.parameter_count(), 0.0);
  std::vector<TokenId> context(prompt.begin(), prompt.end());
  for (const TokenId id : response) {
    if (id < 0 || static_cast<std::size_t>(id) >= model.vocab_size()) {
      throw DomainError("response token id " + std::to_string(id) + " is outside the vocabulary");
    }
    model.accumulate_logprob_gradient(context, id, 1.0, grad);
    context.push_back(id);
  }
  return grad;
}

}  // namespace cmegrpo
