#include "cmegrpo/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <random>

#include "cmegrpo/errors.hpp"
#include "parallel.hpp"

namespace cmegrpo {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::kSgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  throw DomainError("unknown optimizer '" + std::string(name) + "' (expected sgd or adam)");
}

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool shares_space(const LanguageModel& a, const LanguageModel& b) {
  return a.tokenizer() == b.tokenizer() && a.vocab_size() == b.vocab_size() && a.eos() == b.eos();
}

struct PromptMetrics {
  double kl_verifier = kNaN;
  double kl_gold = kNaN;
  double entropy = 0.0;
  double expected_cme = 0.0;
};

PromptMetrics exact_metrics(const LanguageModel& policy, const LanguageModel& verifier,
                            const LanguageModel* gold, const std::string& prompt,
                            std::size_t max_len, std::size_t budget) {
  PromptMetrics m;
  const std::vector<TokenId> ids = policy.tokenizer().encode(prompt).ids();
  const SequenceDistribution p = enumerate_distribution(policy, ids, max_len, budget);
  m.entropy = entropy(p);
  if (shares_space(policy, verifier)) {
    m.kl_verifier = exact_reverse_kl(p, enumerate_distribution(verifier, ids, max_len, budget));
  }
  if (gold != nullptr && shares_space(policy, *gold)) {
    m.kl_gold = exact_reverse_kl(p, enumerate_distribution(*gold, ids, max_len, budget));
  }
  m.expected_cme = expected_cme(policy, verifier, prompt, max_len, budget).mean_form;
  return m;
}

PromptMetrics sampled_metrics(const LanguageModel& policy, const LanguageModel& verifier,
                              const LanguageModel* gold, const std::string& prompt,
                              std::size_t max_len, const EvalConfig& cfg, std::size_t index) {
  PromptMetrics m;
  const std::vector<TokenId> ids = policy.tokenizer().encode(prompt).ids();
  const bool kl_ver = shares_space(policy, verifier);
  const bool kl_gold = gold != nullptr && shares_space(policy, *gold);
  std::seed_seq seq{cfg.seed, static_cast<std::uint64_t>(index)};
  std::mt19937_64 rng(seq);
  SamplerConfig sampler{1.0, max_len, 0};
  double kl_v = 0.0, kl_g = 0.0, h = 0.0, cme = 0.0;
  for (std::size_t k = 0; k < cfg.samples; ++k) {
    const SampledResponse r = sample_response(policy, ids, sampler, rng);
    double lp = 0.0;
    for (const double v : r.logprobs) lp += v;
    h -= lp;
    if (kl_ver) kl_v += lp - sequence_logprob(verifier, ids, r.ids);
    if (kl_gold) kl_g += lp - sequence_logprob(*gold, ids, r.ids);
    const auto text = policy.tokenizer().view(text_ids(policy, r.ids)).text;
    const std::vector<double> ver = verifier_logprobs(prompt, text, verifier, r.ended);
    double sum = 0.0;
    for (const double v : ver) sum += v;
    cme += ver.empty() ? 0.0 : sum / static_cast<double>(ver.size());
  }
  const auto n = static_cast<double>(cfg.samples);
  m.entropy = h / n;
  m.expected_cme = cme / n;
  if (kl_ver) m.kl_verifier = kl_v / n;
  if (kl_gold) m.kl_gold = kl_g / n;
  return m;
}

}  // namespace

MetricsRecord evaluate(const LanguageModel& policy, const LanguageModel& verifier,
                       const LanguageModel* gold, std::span<const std::string> prompts,
                       std::size_t max_len, const EvalConfig& cfg) {
  if (prompts.empty()) throw DomainError("evaluation needs at least one prompt");
  const bool exact = enumeration_size(policy, max_len) <= cfg.budget &&
                     enumeration_size(verifier, max_len) <= cfg.budget &&
                     (gold == nullptr || enumeration_size(*gold, max_len) <= cfg.budget);
  if (!exact && !cfg.sampled_fallback) {
    throw DomainError("exact evaluation exceeds the enumeration budget and sampling is disabled");
  }
  if (!exact && cfg.samples == 0) throw DomainError("sampled evaluation needs a positive sample count");

  MetricsRecord record;
  record.group_reward = record.mean_abs_advantage = record.loss = record.grad_norm = kNaN;
  record.samples = exact ? 0 : cfg.samples * prompts.size();
  PromptMetrics sum{0.0, 0.0, 0.0, 0.0};
  for (std::size_t k = 0; k < prompts.size(); ++k) {
    const PromptMetrics m = exact ? exact_metrics(policy, verifier, gold, prompts[k], max_len, cfg.budget)
                                  : sampled_metrics(policy, verifier, gold, prompts[k], max_len, cfg, k);
    sum.kl_verifier += m.kl_verifier;
    sum.kl_gold += m.kl_gold;
    sum.entropy += m.entropy;
    sum.expected_cme += m.expected_cme;
  }
  const auto n = static_cast<double>(prompts.size());
  record.kl_verifier = sum.kl_verifier / n;
  record.kl_gold = sum.kl_gold / n;
  record.entropy = sum.entropy / n;
  record.expected_cme = sum.expected_cme / n;
  return record;
}

RolloutGroup sample_group(const LanguageModel& policy, std::string_view prompt,
                          std::size_t group_size, const SamplerConfig& sampler, std::uint64_t seed,
                          std::size_t step) {
  RolloutGroup group;
  group.prompt = std::string(prompt);
  group.prompt_ids = policy.tokenizer().encode(prompt).ids();
  group.responses.resize(group_size);
  detail::parallel_for(group_size, [&](std::size_t i) {
    std::seed_seq seq{seed, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i)};
    std::mt19937_64 rng(seq);
    SampledResponse r = sample_response(policy, group.prompt_ids, sampler, rng);
    Rollout& out = group.responses[i];
    out.text = policy.tokenizer().view(text_ids(policy, r.ids));
    out.ids = std::move(r.ids);
    out.old_logprobs = std::move(r.logprobs);
    out.ended = r.ended;
  });
  return group;
}

namespace {

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double step_size, std::size_t size)
      : kind_(kind), step_size_(step_size) {
    if (kind_ == OptimizerKind::kAdam) {
      m_.assign(size, 0.0);
      v_.assign(size, 0.0);
    }
  }

  void apply(std::span<double> params, std::span<const double> grad) {
    if (kind_ == OptimizerKind::kSgd) {
      for (std::size_t k = 0; k < params.size(); ++k) params[k] -= step_size_ * grad[k];
      return;
    }
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      m_[k] = kBeta1 * m_[k] + (1.0 - kBeta1) * grad[k];
      v_[k] = kBeta2 * v_[k] + (1.0 - kBeta2) * grad[k] * grad[k];
      params[k] -= step_size_ * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + kEps);
    }
  }

 private:
  OptimizerKind kind_;
  double step_size_;
  std::size_t t_ = 0;
  std::vector<double> m_, v_;
};

std::string describe_group(std::size_t step, const RolloutGroup& group, const RewardMatrix& rewards) {
  std::string out = "non-finite loss or gradient at step " + std::to_string(step) + ", prompt \"" +
                    group.prompt + "\", responses:";
  for (std::size_t i = 0; i < group.responses.size(); ++i) {
    char total[32];
    std::snprintf(total, sizeof total, "%.6g", rewards.totals.at(i));
    out += " [" + std::to_string(i) + "] \"" + group.responses[i].text.text_utf8() + "\"" +
           (group.responses[i].ended ? "<eos>" : "") + " reward " + total + ";";
  }
  return out;
}

void check_config(const TrainConfig& cfg, std::span<const std::string> prompts) {
  if (prompts.empty()) throw DomainError("training needs at least one prompt");
  if (cfg.grpo.group_size < 2) throw DomainError("group size must be at least 2");
  if (!(cfg.grpo.clip_eps > 0.0)) throw DomainError("clip epsilon must be positive");
  if (!(cfg.grpo.kl_beta >= 0.0)) throw DomainError("KL coefficient must be non-negative");
  if (!(cfg.step_size > 0.0)) throw DomainError("step size must be positive");
  if (!(cfg.grad_clip >= 0.0)) throw DomainError("gradient clip must be non-negative");
  if (cfg.sampler.max_len == 0) throw DomainError("maximum response length must be positive");
  if (cfg.eval_every == 0) throw DomainError("evaluation cadence must be positive");
}

}  // namespace

TrainResult train(const TinyNeuralLM& generator, const LanguageModel& verifier,
                  std::span<const std::string> prompts, const TrainConfig& cfg,
                  const LanguageModel* gold, const CheckpointSink& checkpoint) {
  check_config(cfg, prompts);
  const auto started = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  };

  TrainResult result{generator, {}};
  TinyNeuralLM& model = result.model;
  const TinyNeuralLM reference = generator;
  Optimizer optimizer(cfg.optimizer, cfg.step_size, model.parameter_count());

  auto record = [&](std::size_t step, const MetricsRecord* train_stats) {
    MetricsRecord m = evaluate(model, verifier, gold, prompts, cfg.sampler.max_len, cfg.eval);
    m.step = step;
    if (train_stats != nullptr) {
      m.group_reward = train_stats->group_reward;
      m.mean_abs_advantage = train_stats->mean_abs_advantage;
      m.loss = train_stats->loss;
      m.grad_norm = train_stats->grad_norm;
    }
    m.wall_seconds = elapsed();
    result.metrics.push_back(m);
  };

  record(0, nullptr);
  if (checkpoint) checkpoint(0, model);

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const std::string& prompt = prompts[(step - 1) % prompts.size()];
    RolloutGroup group =
        sample_group(model, prompt, cfg.grpo.group_size, cfg.sampler, cfg.seed, step);

    std::vector<GeneratorView> views;
    views.reserve(group.responses.size());
    for (const auto& r : group.responses) views.push_back({r.text, r.ended});
    const RewardMatrix rewards = cfg.reward_mode == RewardMode::kToken
                                     ? token_cme_rewards(prompt, views, verifier)
                                     : sequence_cme_rewards(prompt, views, verifier);
    AdvantageMatrix advantages = normalize(rewards);

    MetricsRecord stats;
    stats.group_reward = 0.0;
    for (const auto& view : views) {
      stats.group_reward += sequence_cme_reward(prompt, view.tokens.text_utf8(), verifier, view.ended);
    }
    stats.group_reward /= static_cast<double>(views.size());
    double abs_sum = 0.0;
    std::size_t valid = 0;
    for (std::size_t k = 0; k < advantages.values.size(); ++k) {
      if (advantages.mask[k]) {
        abs_sum += std::abs(advantages.values[k]);
        ++valid;
      }
    }
    stats.mean_abs_advantage = valid > 0 ? abs_sum / static_cast<double>(valid) : 0.0;

    // A response with no valid position (whitespace-only text cut off before
    // EOS) carries no signal; the update uses the remaining rows.
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < group.responses.size(); ++i) {
      bool any = false;
      for (std::size_t t = 0; t < group.responses[i].ids.size(); ++t) any = any || advantages.valid(i, t);
      if (any) keep.push_back(i);
    }
    GrpoConfig grpo = cfg.grpo;
    if (keep.size() != group.responses.size()) {
      RolloutGroup kept{group.prompt, group.prompt_ids, {}};
      AdvantageMatrix adv_kept;
      adv_kept.rows = keep.size();
      adv_kept.cols = advantages.cols;
      for (const std::size_t i : keep) {
        kept.responses.push_back(group.responses[i]);
        adv_kept.values.insert(adv_kept.values.end(), advantages.values.begin() + i * advantages.cols,
                               advantages.values.begin() + (i + 1) * advantages.cols);
        adv_kept.mask.insert(adv_kept.mask.end(), advantages.mask.begin() + i * advantages.cols,
                             advantages.mask.begin() + (i + 1) * advantages.cols);
      }
      group = std::move(kept);
      advantages = std::move(adv_kept);
      grpo.group_size = keep.size();
    }

    if (!group.responses.empty()) {
      const LossResult loss =
          cme_grpo_loss(group, advantages, model, cfg.grpo.kl_beta != 0.0 ? &reference : nullptr, grpo);
      double norm_sq = 0.0;
      for (const double g : loss.gradient) norm_sq += g * g;
      const double norm = std::sqrt(norm_sq);
      if (!std::isfinite(loss.loss) || !std::isfinite(norm)) {
        throw NumericalError(describe_group(step, group, rewards));
      }
      std::vector<double> grad = loss.gradient;
      if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) {
        for (auto& g : grad) g *= cfg.grad_clip / norm;
      }
      optimizer.apply(model.parameters(), grad);
      stats.loss = loss.loss;
      stats.grad_norm = norm;
    } else {
      stats.loss = 0.0;
      stats.grad_norm = 0.0;
    }

    if (step % cfg.eval_every == 0 || step == cfg.steps) record(step, &stats);
    if (checkpoint && ((cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) ||
                       step == cfg.steps)) {
      checkpoint(step, model);
    }
  }
  return result;
}

double heldout_nll_per_char(const LanguageModel& model, std::span<const std::string> texts) {
  if (texts.empty()) throw DomainError("held-out set is empty");
  double nll = 0.0;
  double chars = 0.0;
  for (const auto& text : texts) {
    const auto ids = model.tokenizer().encode(text).ids();
    nll -= sequence_logprob(model, {}, ids);
    chars += static_cast<double>(utf8_decode(text).size());
    if (const auto eos = model.eos()) {
      nll -= model.token_logprob(ids, *eos);
      chars += 1.0;
    }
  }
  return nll / chars;
}

std::vector<SweepRow> verifier_sweep(const TinyNeuralLM& generator,
                                     std::span<const SweepCondition> conditions,
                                     std::span<const std::string> prompts, const TrainConfig& cfg,
                                     const LanguageModel& gold, const SweepOptions& options) {
  const std::size_t replicates = options.replicates;
  if (conditions.empty()) throw DomainError("sweep needs at least one condition");
  if (replicates == 0) throw DomainError("sweep needs at least one replicate");
  bool has_control = false;
  for (const auto& c : conditions) {
    if (!c.verifier) throw DomainError("sweep condition '" + c.name + "' has no verifier");
    has_control = has_control || dynamic_cast<const TinyNeuralLM*>(c.verifier.get()) != nullptr;
  }
  if (!has_control) {
    throw DomainError("sweep needs a randomly initialized neural verifier as control");
  }

  std::vector<SweepRow> rows;
  const double n = static_cast<double>(replicates);
  for (const auto& c : conditions) {
    SweepRow row;
    row.name = c.name;
    for (std::size_t r = 0; r < replicates; ++r) {
      TrainConfig run_cfg = cfg;
      run_cfg.seed = cfg.seed + r;
      const TrainResult run = train(generator, *c.verifier, prompts, run_cfg, &gold);
      row.initial_kl_gold += run.metrics.front().kl_gold / n;
      row.final_kl_gold += run.metrics.back().kl_gold / n;
      row.final_expected_cme += run.metrics.back().expected_cme / n;
      row.final_kl_verifier += run.metrics.back().kl_verifier / n;
    }
    row.kl_gold_improvement = row.initial_kl_gold - row.final_kl_gold;
    row.heldout_nll = options.heldout.empty()
                          ? std::numeric_limits<double>::quiet_NaN()
                          : heldout_nll_per_char(*c.verifier, options.heldout);
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return a.final_kl_gold < b.final_kl_gold;
  });
  return rows;
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buffer[40];
  std::snprintf(buffer, sizeof buffer, "%.17g", v);
  return buffer;
}

}  // namespace

void write_metrics_csv(std::ostream& out, std::span<const MetricsRecord> records) {
  out << "step,group_reward,mean_abs_advantage,loss,grad_norm,kl_verifier,kl_gold,entropy,"
         "expected_cme,samples\n";
  for (const auto& r : records) {
    out << r.step << ',' << fmt(r.group_reward) << ',' << fmt(r.mean_abs_advantage) << ','
        << fmt(r.loss) << ',' << fmt(r.grad_norm) << ',' << fmt(r.kl_verifier) << ','
        << fmt(r.kl_gold) << ',' << fmt(r.entropy) << ',' << fmt(r.expected_cme) << ','
        << r.samples << '\n';
  }
}

void write_timing_csv(std::ostream& out, std::span<const MetricsRecord> records) {
  out << "step,wall_seconds\n";
  for (const auto& r : records) out << r.step << ',' << fmt(r.wall_seconds) << '\n';
}

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
  out << "rank,name,initial_kl_gold,final_kl_gold,kl_gold_improvement,final_expected_cme,"
         "final_kl_verifier,heldout_nll\n";
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto& r = rows[k];
    out << k + 1 << ',' << r.name << ',' << fmt(r.initial_kl_gold) << ',' << fmt(r.final_kl_gold)
        << ',' << fmt(r.kl_gold_improvement) << ',' << fmt(r.final_expected_cme) << ','
        << fmt(r.final_kl_verifier) << ',' << fmt(r.heldout_nll) << '\n';
  }
}

}  // namespace cmegrpo
