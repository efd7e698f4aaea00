#include "cmegrpo/grpo.hpp"

#include <algorithm>
#include <cmath>

#include "cmegrpo/errors.hpp"
#include "parallel.hpp"

namespace cmegrpo {

namespace {

// Standardizes values[k] for k in `members`, in place. Deviations are taken
// from the first member before averaging, so an exact common shift of the
// inputs leaves every output bit unchanged.
void standardize(std::span<const double> inputs, std::span<const std::size_t> members,
                 std::span<double> outputs, double& mean, double& stddev) {
  mean = 0.0;
  stddev = 0.0;
  for (const std::size_t k : members) outputs[k] = 0.0;
  if (members.empty()) return;
  const double pivot = inputs[members.front()];
  if (members.size() < 2) {
    mean = pivot;
    return;
  }
  const auto n = static_cast<double>(members.size());
  double shift = 0.0;
  for (const std::size_t k : members) shift += inputs[k] - pivot;
  shift /= n;
  double var = 0.0;
  for (const std::size_t k : members) {
    const double dev = (inputs[k] - pivot) - shift;
    var += dev * dev;
  }
  stddev = std::sqrt(var / n);
  mean = pivot + shift;
  if (stddev < kDegenerateStd) return;
  for (const std::size_t k : members) outputs[k] = ((inputs[k] - pivot) - shift) / stddev;
}

}  // namespace

AdvantageMatrix normalize_token(const RewardMatrix& rewards) {
  if (rewards.rows < 2) throw DomainError("group normalization needs at least two responses");
  AdvantageMatrix out;
  out.rows = rewards.rows;
  out.cols = rewards.cols;
  out.values.assign(out.rows * out.cols, 0.0);
  out.mask = rewards.mask;
  out.mean.assign(out.cols, 0.0);
  out.stddev.assign(out.cols, 0.0);

  std::vector<double> column(out.rows);
  std::vector<double> result(out.rows);
  std::vector<std::size_t> members;
  for (std::size_t t = 0; t < out.cols; ++t) {
    members.clear();
    for (std::size_t i = 0; i < out.rows; ++i) {
      column[i] = rewards.at(i, t);
      if (rewards.valid(i, t)) members.push_back(i);
    }
    standardize(column, members, result, out.mean[t], out.stddev[t]);
    for (const std::size_t i : members) out.values[i * out.cols + t] = result[i];
  }
  return out;
}

std::vector<double> normalize_sequence(std::span<const double> rewards) {
  if (rewards.size() < 2) throw DomainError("group normalization needs at least two responses");
  std::vector<std::size_t> members(rewards.size());
  for (std::size_t i = 0; i < members.size(); ++i) members[i] = i;
  std::vector<double> out(rewards.size());
  double mean = 0.0, stddev = 0.0;
  standardize(rewards, members, out, mean, stddev);
  return out;
}

AdvantageMatrix normalize_sequence(const RewardMatrix& rewards) {
  if (rewards.rows < 2) throw DomainError("group normalization needs at least two responses");
  std::vector<std::size_t> members(rewards.rows);
  for (std::size_t i = 0; i < members.size(); ++i) members[i] = i;
  std::vector<double> row_adv(rewards.rows);
  AdvantageMatrix out;
  out.rows = rewards.rows;
  out.cols = rewards.cols;
  out.mask = rewards.mask;
  out.mean.assign(1, 0.0);
  out.stddev.assign(1, 0.0);
  standardize(rewards.totals, members, row_adv, out.mean[0], out.stddev[0]);
  out.values.assign(out.rows * out.cols, 0.0);
  for (std::size_t i = 0; i < out.rows; ++i) {
    for (std::size_t t = 0; t < out.cols; ++t) {
      if (out.valid(i, t)) out.values[i * out.cols + t] = row_adv[i];
    }
  }
  return out;
}

AdvantageMatrix normalize(const RewardMatrix& rewards) {
  return rewards.mode == RewardMode::kToken ? normalize_token(rewards) : normalize_sequence(rewards);
}

double clipped_surrogate(double rho, double advantage, double eps) {
  const double clipped = std::clamp(rho, 1.0 - eps, 1.0 + eps);
  return std::min(rho * advantage, clipped * advantage);
}

namespace {

void require_shared_vocabulary(const LanguageModel& policy, const LanguageModel& reference) {
  if (!(policy.tokenizer() == reference.tokenizer()) ||
      policy.vocab_size() != reference.vocab_size()) {
    throw DomainError("policy and reference must share a tokenizer");
  }
}

double context_kl(std::span<const double> p, std::span<const double> q) {
  double kl = 0.0;
  for (std::size_t v = 0; v < p.size(); ++v) {
    if (p[v] > 0.0) kl += p[v] * (std::log(p[v]) - std::log(q[v]));
  }
  return kl;
}

void check_group(const RolloutGroup& group, const AdvantageMatrix& advantages,
                 const GrpoConfig& cfg) {
  if (group.responses.empty()) throw DomainError("rollout group is empty");
  if (group.responses.size() != cfg.group_size) {
    throw DomainError("rollout group holds " + std::to_string(group.responses.size()) +
                      " responses, configured group size is " + std::to_string(cfg.group_size));
  }
  if (advantages.rows != group.responses.size()) {
    throw DomainError("advantage rows do not match the rollout group");
  }
  for (std::size_t i = 0; i < group.responses.size(); ++i) {
    const Rollout& r = group.responses[i];
    if (r.ids.size() > advantages.cols) {
      throw DomainError("response " + std::to_string(i) + " is longer than the advantage matrix");
    }
    if (r.old_logprobs.size() != r.ids.size()) {
      throw DomainError("response " + std::to_string(i) + " has mismatched old log-probabilities");
    }
    std::size_t valid = 0;
    for (std::size_t t = 0; t < r.ids.size(); ++t) valid += advantages.valid(i, t) ? 1 : 0;
    if (valid == 0) throw DomainError("response " + std::to_string(i) + " has no valid positions");
  }
}

}  // namespace

double kl_to_reference(const LanguageModel& policy, const LanguageModel& reference,
                       std::span<const std::vector<TokenId>> contexts) {
  require_shared_vocabulary(policy, reference);
  if (contexts.empty()) throw DomainError("KL over an empty context set is undefined");
  std::vector<double> p(policy.vocab_size()), q(reference.vocab_size());
  double total = 0.0;
  for (const auto& context : contexts) {
    policy.distribution(context, p);
    reference.distribution(context, q);
    total += context_kl(p, q);
  }
  return total / static_cast<double>(contexts.size());
}

LossResult cme_grpo_loss(const RolloutGroup& group, const AdvantageMatrix& advantages,
                         const TinyNeuralLM& policy, const LanguageModel* reference,
                         const GrpoConfig& cfg) {
  check_group(group, advantages, cfg);
  const bool use_kl = cfg.kl_beta != 0.0;
  if (use_kl) {
    if (reference == nullptr) throw DomainError("KL anchor requires a reference model");
    require_shared_vocabulary(policy, *reference);
  }
  const std::size_t rows = group.responses.size();
  const double inv_g = 1.0 / static_cast<double>(rows);
  std::size_t contexts = 0;
  for (const auto& r : group.responses) contexts += r.ids.size();
  const double kl_scale = use_kl ? cfg.kl_beta / static_cast<double>(contexts) : 0.0;
  const std::size_t vocab = policy.vocab_size();

  struct RowResult {
    double surrogate = 0.0;
    double kl = 0.0;
    std::vector<double> gradient;
  };
  std::vector<RowResult> results(rows);

  detail::parallel_for(rows, [&](std::size_t i) {
    const Rollout& r = group.responses[i];
    RowResult& out = results[i];
    out.gradient.assign(policy.parameter_count(), 0.0);
    std::size_t valid = 0;
    for (std::size_t t = 0; t < r.ids.size(); ++t) valid += advantages.valid(i, t) ? 1 : 0;
    const double row_scale = inv_g / static_cast<double>(valid);

    std::vector<TokenId> context(group.prompt_ids);
    TinyNeuralLM::Activations acts;
    std::vector<double> q(vocab), dlogits(vocab);
    for (std::size_t t = 0; t < r.ids.size(); ++t) {
      const auto y = static_cast<std::size_t>(r.ids[t]);
      policy.forward(context, acts);
      std::fill(dlogits.begin(), dlogits.end(), 0.0);
      bool touched = false;

      if (advantages.valid(i, t)) {
        const double adv = advantages.at(i, t);
        const double rho = std::exp(std::log(acts.probs[y]) - r.old_logprobs[t]);
        const double unclipped = rho * adv;
        const double clipped = std::clamp(rho, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
        out.surrogate -= row_scale * std::min(unclipped, clipped);
        if (unclipped <= clipped && adv != 0.0) {
          // d(-row_scale * rho * A)/dlogits = -row_scale * A * rho * (onehot(y) - p)
          const double coef = -row_scale * adv * rho;
          for (std::size_t v = 0; v < vocab; ++v) dlogits[v] -= coef * acts.probs[v];
          dlogits[y] += coef;
          touched = true;
        }
      }
      if (use_kl) {
        reference->distribution(context, q);
        const double kl = context_kl(acts.probs, q);
        out.kl += kl;
        for (std::size_t v = 0; v < vocab; ++v) {
          const double p = acts.probs[v];
          if (p > 0.0) dlogits[v] += kl_scale * p * (std::log(p) - std::log(q[v]) - kl);
        }
        touched = true;
      }
      if (touched) policy.backward(acts, dlogits, 1.0, out.gradient);
      context.push_back(r.ids[t]);
    }
  });

  LossResult result;
  result.gradient.assign(policy.parameter_count(), 0.0);
  double kl_sum = 0.0;
  for (const auto& row : results) {
    result.surrogate += row.surrogate;
    kl_sum += row.kl;
    for (std::size_t k = 0; k < row.gradient.size(); ++k) result.gradient[k] += row.gradient[k];
  }
  result.kl = use_kl ? kl_sum / static_cast<double>(contexts) : 0.0;
  result.loss = result.surrogate + cfg.kl_beta * result.kl;
  return result;
}

}  // namespace cmegrpo
