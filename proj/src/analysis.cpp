#include "cmegrpo/analysis.hpp"

#include <cmath>
#include <limits>
#include <map>

#include "cmegrpo/errors.hpp"
#include "cmegrpo/rewards.hpp"
#include "parallel.hpp"

namespace cmegrpo {

double SequenceDistribution::total_mass() const {
  double total = 0.0;
  for (const auto& atom : atoms) total += std::exp(atom.logprob);
  return total;
}

std::size_t enumeration_size(const LanguageModel& model, std::size_t max_len) {
  constexpr std::size_t kCap = std::numeric_limits<std::size_t>::max();
  const bool has_eos = model.eos().has_value();
  const std::size_t branching = model.vocab_size() - (has_eos ? 1 : 0);
  auto mul = [](std::size_t a, std::size_t b) {
    return (a != 0 && b > kCap / a) ? kCap : a * b;
  };
  auto add = [](std::size_t a, std::size_t b) { return a > kCap - b ? kCap : a + b; };
  std::size_t level = 1;  // prefixes of the current length
  std::size_t total = 0;
  for (std::size_t k = 0; k < max_len; ++k) {
    if (has_eos) total = add(total, level);
    level = mul(level, branching);
  }
  return add(total, level);
}

namespace {

void check_budget(const LanguageModel& model, std::size_t max_len, std::size_t budget) {
  const std::size_t size = enumeration_size(model, max_len);
  if (size > budget) {
    throw DomainError("enumerating " + std::to_string(size) + " sequences exceeds the budget of " +
                      std::to_string(budget));
  }
}

// Depth-first expansion of one prefix; atoms are appended in token-id order.
void expand(const LanguageModel& model, std::vector<TokenId>& context, std::size_t prompt_len,
            double logprob, std::size_t max_len, std::vector<SequenceAtom>& out) {
  const auto eos = model.eos();
  std::vector<double> probs(model.vocab_size());
  model.distribution(context, probs);
  const std::size_t depth = context.size() - prompt_len + 1;
  for (std::size_t v = 0; v < probs.size(); ++v) {
    if (probs[v] <= 0.0) continue;
    const auto id = static_cast<TokenId>(v);
    const double lp = logprob + std::log(probs[v]);
    const bool is_eos = eos && id == *eos;
    if (is_eos || depth == max_len) {
      SequenceAtom atom;
      atom.ids.assign(context.begin() + static_cast<std::ptrdiff_t>(prompt_len), context.end());
      atom.ids.push_back(id);
      atom.logprob = lp;
      atom.ended = is_eos;
      out.push_back(std::move(atom));
      continue;
    }
    context.push_back(id);
    expand(model, context, prompt_len, lp, max_len, out);
    context.pop_back();
  }
}

double truncated(const LanguageModel& model, const std::vector<SequenceAtom>& atoms) {
  if (!model.eos()) return 0.0;
  double mass = 0.0;
  for (const auto& atom : atoms) {
    if (!atom.ended) mass += std::exp(atom.logprob);
  }
  return mass;
}

std::string describe(std::span<const TokenId> ids) {
  std::string out = "[";
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (k > 0) out += ',';
    out += std::to_string(ids[k]);
  }
  return out + "]";
}

}  // namespace

SequenceDistribution enumerate_distribution(const LanguageModel& model,
                                            std::span<const TokenId> prompt, std::size_t max_len,
                                            std::size_t budget) {
  check_budget(model, max_len, budget);
  SequenceDistribution dist;
  dist.max_len = max_len;
  if (max_len == 0) {
    dist.atoms.push_back({{}, 0.0, false});
    return dist;
  }

  const std::vector<TokenId> root(prompt.begin(), prompt.end());
  const std::vector<double> first = model.full_distribution(root);
  const auto eos = model.eos();
  std::vector<std::vector<SequenceAtom>> parts(first.size());
  detail::parallel_for(first.size(), [&](std::size_t v) {
    if (first[v] <= 0.0) return;
    const auto id = static_cast<TokenId>(v);
    const double lp = std::log(first[v]);
    if ((eos && id == *eos) || max_len == 1) {
      parts[v].push_back({{id}, lp, eos && id == *eos});
      return;
    }
    std::vector<TokenId> context = root;
    context.push_back(id);
    expand(model, context, root.size(), lp, max_len, parts[v]);
  });
  for (auto& part : parts) {
    for (auto& atom : part) dist.atoms.push_back(std::move(atom));
  }
  dist.truncated_mass = truncated(model, dist.atoms);
  return dist;
}

namespace serial {

SequenceDistribution enumerate_distribution(const LanguageModel& model,
                                            std::span<const TokenId> prompt, std::size_t max_len,
                                            std::size_t budget) {
  check_budget(model, max_len, budget);
  SequenceDistribution dist;
  dist.max_len = max_len;
  if (max_len == 0) {
    dist.atoms.push_back({{}, 0.0, false});
    return dist;
  }
  std::vector<TokenId> context(prompt.begin(), prompt.end());
  expand(model, context, prompt.size(), 0.0, max_len, dist.atoms);
  dist.truncated_mass = truncated(model, dist.atoms);
  return dist;
}

}  // namespace serial

double exact_reverse_kl(const SequenceDistribution& p, const SequenceDistribution& q) {
  const bool aligned = p.atoms.size() == q.atoms.size();
  std::map<std::vector<TokenId>, double> q_index;
  if (!aligned) {
    for (const auto& atom : q.atoms) q_index.emplace(atom.ids, atom.logprob);
  }
  double kl = 0.0;
  for (std::size_t k = 0; k < p.atoms.size(); ++k) {
    const SequenceAtom& a = p.atoms[k];
    double q_lp = -std::numeric_limits<double>::infinity();
    if (aligned && q.atoms[k].ids == a.ids) {
      q_lp = q.atoms[k].logprob;
    } else {
      if (q_index.empty()) {
        for (const auto& atom : q.atoms) q_index.emplace(atom.ids, atom.logprob);
      }
      if (const auto it = q_index.find(a.ids); it != q_index.end()) q_lp = it->second;
    }
    const double p_mass = std::exp(a.logprob);
    if (p_mass == 0.0) continue;
    if (!std::isfinite(q_lp)) {
      throw DomainError("q assigns zero probability to sequence " + describe(a.ids) +
                        " which has positive probability under p");
    }
    kl += p_mass * (a.logprob - q_lp);
  }
  return kl;
}

double entropy(const SequenceDistribution& p) {
  double h = 0.0;
  for (const auto& atom : p.atoms) h -= std::exp(atom.logprob) * atom.logprob;
  return h;
}

IdentityCheck exact_identity_check(const LanguageModel& gen, const LanguageModel& ver,
                                   std::string_view prompt, std::size_t max_len,
                                   std::size_t budget) {
  if (!(gen.tokenizer() == ver.tokenizer()) || gen.vocab_size() != ver.vocab_size() ||
      gen.eos() != ver.eos()) {
    throw DomainError("the identity check requires generator and verifier to share a tokenizer");
  }
  const std::vector<TokenId> prompt_ids = gen.tokenizer().encode(prompt).ids();
  const SequenceDistribution p = enumerate_distribution(gen, prompt_ids, max_len, budget);
  const SequenceDistribution q = enumerate_distribution(ver, prompt_ids, max_len, budget);

  IdentityCheck out;
  out.truncated_mass = p.truncated_mass;
  double expected = 0.0;
  for (std::size_t k = 0; k < p.atoms.size(); ++k) {
    expected += std::exp(p.atoms[k].logprob) * q.atoms.at(k).logprob;
  }
  out.expected_reward = expected;
  out.neg_entropy = -entropy(p);
  out.neg_kl = -exact_reverse_kl(p, q);
  out.residual = out.expected_reward - (out.neg_entropy + out.neg_kl);
  return out;
}

namespace {

struct AtomReward {
  double sum = 0.0;
  double mean = 0.0;
};

std::vector<AtomReward> atom_rewards(const LanguageModel& gen, const LanguageModel& ver,
                                     std::string_view prompt, const SequenceDistribution& dist) {
  std::vector<AtomReward> out(dist.atoms.size());
  detail::parallel_for(dist.atoms.size(), [&](std::size_t k) {
    const SequenceAtom& atom = dist.atoms[k];
    const auto text = gen.tokenizer().view(text_ids(gen, atom.ids)).text;
    const std::vector<double> lp = verifier_logprobs(prompt, text, ver, atom.ended);
    for (const double v : lp) out[k].sum += v;
    out[k].mean = lp.empty() ? 0.0 : out[k].sum / static_cast<double>(lp.size());
  });
  return out;
}

}  // namespace

ExpectedCme expected_cme(const LanguageModel& gen, const LanguageModel& ver, std::string_view prompt,
                         std::size_t max_len, std::size_t budget) {
  const std::vector<TokenId> prompt_ids = gen.tokenizer().encode(prompt).ids();
  const SequenceDistribution p = enumerate_distribution(gen, prompt_ids, max_len, budget);
  const std::vector<AtomReward> rewards = atom_rewards(gen, ver, prompt, p);
  ExpectedCme out;
  for (std::size_t k = 0; k < p.atoms.size(); ++k) {
    const double mass = std::exp(p.atoms[k].logprob);
    out.sum_form += mass * rewards[k].sum;
    out.mean_form += mass * rewards[k].mean;
  }
  return out;
}

std::vector<double> infinite_group_gradient(const TinyNeuralLM& gen, const LanguageModel& ver,
                                            std::string_view prompt, std::size_t max_len,
                                            std::size_t budget) {
  const std::vector<TokenId> prompt_ids = gen.tokenizer().encode(prompt).ids();
  const SequenceDistribution p = enumerate_distribution(gen, prompt_ids, max_len, budget);
  const std::vector<AtomReward> rewards = atom_rewards(gen, ver, prompt, p);

  double mean = 0.0;
  for (std::size_t k = 0; k < p.atoms.size(); ++k) mean += std::exp(p.atoms[k].logprob) * rewards[k].mean;
  double var = 0.0;
  for (std::size_t k = 0; k < p.atoms.size(); ++k) {
    const double d = rewards[k].mean - mean;
    var += std::exp(p.atoms[k].logprob) * d * d;
  }
  std::vector<double> grad(gen.parameter_count(), 0.0);
  const double stddev = std::sqrt(var);
  if (stddev < 1e-8) return grad;
  for (std::size_t k = 0; k < p.atoms.size(); ++k) {
    const SequenceAtom& atom = p.atoms[k];
    if (atom.ids.empty()) continue;
    const double adv = (rewards[k].mean - mean) / stddev;
    const double weight =
        -std::exp(atom.logprob) * adv / static_cast<double>(atom.ids.size());
    std::vector<TokenId> context = prompt_ids;
    for (const TokenId id : atom.ids) {
      gen.accumulate_logprob_gradient(context, id, weight, grad);
      context.push_back(id);
    }
  }
  return grad;
}

}  // namespace cmegrpo
