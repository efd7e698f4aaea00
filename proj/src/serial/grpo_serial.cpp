// Reference loss: one pass over (row, position) pairs with the surrogate and
// KL gradients accumulated separately into a single parameter vector.

#include <algorithm>
#include <cmath>

#include "cmegrpo/errors.hpp"
#include "cmegrpo/grpo.hpp"

namespace cmegrpo::serial {

LossResult cme_grpo_loss(const RolloutGroup& group, const AdvantageMatrix& advantages,
                         const TinyNeuralLM& policy, const LanguageModel* reference,
                         const GrpoConfig& cfg) {
  if (group.responses.empty() || group.responses.size() != cfg.group_size ||
      advantages.rows != group.responses.size()) {
    throw DomainError("rollout group does not match the configuration");
  }
  const bool use_kl = cfg.kl_beta != 0.0;
  if (use_kl && reference == nullptr) throw DomainError("KL anchor requires a reference model");

  LossResult result;
  result.gradient.assign(policy.parameter_count(), 0.0);
  const double g = static_cast<double>(group.responses.size());
  std::vector<std::vector<TokenId>> all_contexts;

  for (std::size_t i = 0; i < group.responses.size(); ++i) {
    const Rollout& r = group.responses[i];
    std::size_t valid = 0;
    for (std::size_t t = 0; t < r.ids.size(); ++t) valid += advantages.valid(i, t) ? 1 : 0;
    if (valid == 0) throw DomainError("response has no valid positions");

    std::vector<TokenId> context(group.prompt_ids);
    for (std::size_t t = 0; t < r.ids.size(); ++t) {
      all_contexts.push_back(context);
      if (advantages.valid(i, t)) {
        const double logp = policy.token_logprob(context, r.ids[t]);
        const double rho = std::exp(logp - r.old_logprobs[t]);
        const double adv = advantages.at(i, t);
        result.surrogate -= clipped_surrogate(rho, adv, cfg.clip_eps) / (g * static_cast<double>(valid));
        const double clipped = std::clamp(rho, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
        if (rho * adv <= clipped * adv) {
          policy.accumulate_logprob_gradient(context, r.ids[t],
                                             -adv * rho / (g * static_cast<double>(valid)),
                                             result.gradient);
        }
      }
      context.push_back(r.ids[t]);
    }
  }

  if (use_kl) {
    result.kl = kl_to_reference(policy, *reference, all_contexts);
    const double scale = cfg.kl_beta / static_cast<double>(all_contexts.size());
    TinyNeuralLM::Activations acts;
    for (const auto& context : all_contexts) {
      policy.forward(context, acts);
      const std::vector<double> q = reference->full_distribution(context);
      double kl = 0.0;
      for (std::size_t v = 0; v < q.size(); ++v) {
        kl += acts.probs[v] * (std::log(acts.probs[v]) - std::log(q[v]));
      }
      std::vector<double> dlogits(q.size());
      for (std::size_t v = 0; v < q.size(); ++v) {
        dlogits[v] = acts.probs[v] * (std::log(acts.probs[v]) - std::log(q[v]) - kl);
      }
      policy.backward(acts, dlogits, scale, result.gradient);
    }
  }
  result.loss = result.surrogate + cfg.kl_beta * result.kl;
  return result;
}

}  // namespace cmegrpo::serial
