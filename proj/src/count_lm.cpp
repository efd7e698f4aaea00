#include <algorithm>
#include <cmath>

#include "cmegrpo/errors.hpp"
#include "cmegrpo/language_model.hpp"

namespace cmegrpo {

CountLM::CountLM(Tokenizer tokenizer, std::size_t order, double alpha,
                 std::map<Context, std::vector<double>> counts)
    : tokenizer_(std::move(tokenizer)), order_(order), alpha_(alpha), counts_(std::move(counts)) {
  if (order_ < 1) throw DomainError("n-gram order must be at least 1");
  if (!(alpha_ > 0.0) || !std::isfinite(alpha_)) {
    throw DomainError("smoothing constant must be positive and finite");
  }
  const std::size_t vocab = vocab_size();
  for (const auto& [context, row] : counts_) {
    if (context.size() != order_ - 1) throw DomainError("count context has the wrong length");
    if (row.size() != vocab) throw DomainError("count row does not match the vocabulary");
    double total = 0.0;
    for (const double c : row) {
      if (!(c >= 0.0)) throw DomainError("counts must be non-negative");
      total += c;
    }
    totals_[context] = total;
  }
}

CountLM::Context CountLM::context_key(std::span<const TokenId> context) const {
  Context key(order_ - 1, kBos);
  const std::size_t take = std::min(context.size(), key.size());
  std::copy(context.end() - static_cast<std::ptrdiff_t>(take), context.end(),
            key.end() - static_cast<std::ptrdiff_t>(take));
  return key;
}

void CountLM::distribution(std::span<const TokenId> context, std::span<double> out) const {
  const double vocab = static_cast<double>(vocab_size());
  const Context key = context_key(context);
  const auto it = counts_.find(key);
  if (it == counts_.end()) {
    std::fill(out.begin(), out.end(), 1.0 / vocab);
    return;
  }
  const double denom = totals_.at(key) + alpha_ * vocab;
  for (std::size_t v = 0; v < out.size(); ++v) out[v] = (it->second[v] + alpha_) / denom;
}

std::unique_ptr<LanguageModel> CountLM::clone() const { return std::make_unique<CountLM>(*this); }

CountLM fit_count_lm(const Tokenizer& tokenizer, std::span<const std::string> corpus,
                     std::size_t order, double alpha, CountFitOptions options) {
  if (corpus.empty()) throw DomainError("cannot fit a count model on an empty corpus");
  if (order < 1) throw DomainError("n-gram order must be at least 1");
  const std::size_t vocab = tokenizer.vocab_size() + 1;
  const auto eos = static_cast<TokenId>(tokenizer.vocab_size());

  std::map<CountLM::Context, std::vector<double>> counts;
  for (const auto& line : corpus) {
    std::vector<TokenId> ids = tokenizer.encode(line).ids();
    if (options.count_end) ids.push_back(eos);
    std::vector<TokenId> history(order - 1, CountLM::kBos);
    for (const TokenId id : ids) {
      auto& row = counts[history];
      if (row.empty()) row.assign(vocab, 0.0);
      row[static_cast<std::size_t>(id)] += 1.0;
      if (!history.empty()) {
        history.erase(history.begin());
        history.push_back(id);
      }
    }
  }
  return CountLM(tokenizer, order, alpha, std::move(counts));
}

}  // namespace cmegrpo
