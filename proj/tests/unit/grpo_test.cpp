#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cmegrpo/errors.hpp"
#include "cmegrpo/grpo.hpp"
#include "support.hpp"

namespace cmegrpo {
namespace {

const Tokenizer kAbc(Alphabet::from_utf8("abc"));

RewardMatrix token_matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                          std::vector<std::uint8_t> mask = {}) {
  RewardMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.values = std::move(values);
  m.mask = mask.empty() ? std::vector<std::uint8_t>(rows * cols, 1) : std::move(mask);
  m.totals.assign(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t t = 0; t < cols; ++t) m.totals[i] += m.values[i * cols + t];
  }
  return m;
}

// Rewards that are multiples of 1/8 in [-8, 0]: shifts by integers and
// scaling by powers of two are exact on them.
RewardMatrix dyadic_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::uniform_int_distribution<int> v(-64, 0);
  std::bernoulli_distribution keep(0.8);
  RewardMatrix m = token_matrix(rows, cols, std::vector<double>(rows * cols));
  for (std::size_t k = 0; k < m.values.size(); ++k) {
    m.mask[k] = keep(rng) ? 1 : 0;
    m.values[k] = m.mask[k] ? v(rng) / 8.0 : 0.0;
  }
  return m;
}

Rollout make_rollout(const LanguageModel& old_policy, std::span<const TokenId> prompt,
                     std::vector<TokenId> ids) {
  Rollout r;
  r.ids = std::move(ids);
  r.old_logprobs = token_logprobs(old_policy, prompt, r.ids);
  const auto eos = old_policy.eos();
  r.ended = eos && !r.ids.empty() && r.ids.back() == *eos;
  const auto text = text_ids(old_policy, r.ids);
  r.text = old_policy.tokenizer().view(text);
  return r;
}

struct Scenario {
  RolloutGroup group;
  AdvantageMatrix advantages;
};

// A random group of `g` responses drawn from `old_policy`, with random
// advantages and a random mask that keeps at least one position per row.
Scenario random_scenario(std::mt19937_64& rng, const TinyNeuralLM& old_policy, std::size_t g) {
  Scenario s;
  s.group.prompt = "ab";
  s.group.prompt_ids = old_policy.tokenizer().encode("ab").ids();
  std::size_t cols = 0;
  for (std::size_t i = 0; i < g; ++i) {
    const SampledResponse r =
        sample_response(old_policy, s.group.prompt_ids, SamplerConfig{1.0, 5, rng()});
    s.group.responses.push_back(make_rollout(old_policy, s.group.prompt_ids, r.ids));
    cols = std::max(cols, r.ids.size());
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution keep(0.75);
  AdvantageMatrix& a = s.advantages;
  a.rows = g;
  a.cols = cols;
  a.values.assign(g * cols, 0.0);
  a.mask.assign(g * cols, 0);
  for (std::size_t i = 0; i < g; ++i) {
    const std::size_t len = s.group.responses[i].ids.size();
    for (std::size_t t = 0; t < len; ++t) {
      a.mask[i * cols + t] = keep(rng) || t == len - 1 ? 1 : 0;
      if (a.mask[i * cols + t]) a.values[i * cols + t] = normal(rng);
    }
  }
  return s;
}

TEST(NormalizeToken, ThreeValueColumn) {
  const AdvantageMatrix a = normalize_token(token_matrix(3, 1, {1.0, 2.0, 3.0}));
  const double expected = 1.0 / std::sqrt(2.0 / 3.0);
  EXPECT_NEAR(a.at(0, 0), -expected, 1e-15);
  EXPECT_EQ(a.at(1, 0), 0.0);
  EXPECT_NEAR(a.at(2, 0), expected, 1e-15);
  EXPECT_NEAR(a.at(2, 0), 1.2247, 1e-4);
  EXPECT_DOUBLE_EQ(a.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(a.stddev[0], std::sqrt(2.0 / 3.0));
}

TEST(NormalizeToken, EqualColumnIsDegenerate) {
  const AdvantageMatrix a = normalize_token(token_matrix(4, 1, {-1.5, -1.5, -1.5, -1.5}));
  for (double v : a.values) EXPECT_EQ(v, 0.0);
}

TEST(NormalizeToken, SingleValidRowIsDegenerate) {
  const AdvantageMatrix a =
      normalize_token(token_matrix(3, 2, {-1.0, -2.0, -3.0, 0.0, -5.0, 0.0}, {1, 1, 1, 0, 1, 0}));
  EXPECT_EQ(a.at(0, 1), 0.0);
  EXPECT_NE(a.at(0, 0), 0.0);
  EXPECT_EQ(a.at(1, 1), 0.0);
  EXPECT_FALSE(a.valid(1, 1));
}

TEST(NormalizeToken, TinySpreadIsDegenerate) {
  const AdvantageMatrix a = normalize_token(token_matrix(2, 1, {-1.0, -1.0 - 1e-9}));
  EXPECT_EQ(a.values, (std::vector<double>{0.0, 0.0}));
}

TEST(NormalizeToken, FewerThanTwoRowsIsDomainError) {
  EXPECT_THROW(normalize_token(token_matrix(1, 2, {-1.0, -2.0})), DomainError);
}

TEST(NormalizeToken, ColumnsHaveZeroMeanUnitStd) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> normal(-3.0, 2.0);
  for (int trial = 0; trial < 200; ++trial) {
    RewardMatrix m = dyadic_matrix(rng, 8, 6);
    for (std::size_t k = 0; k < m.values.size(); ++k) {
      if (m.mask[k]) m.values[k] = std::min(0.0, normal(rng));
    }
    const AdvantageMatrix a = normalize_token(m);
    for (std::size_t t = 0; t < m.cols; ++t) {
      double sum = 0.0, sq = 0.0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < m.rows; ++i) {
        if (!a.valid(i, t)) {
          EXPECT_EQ(a.at(i, t), 0.0);
          continue;
        }
        sum += a.at(i, t);
        sq += a.at(i, t) * a.at(i, t);
        ++n;
      }
      if (n < 2 || a.stddev[t] < kDegenerateStd) continue;
      EXPECT_NEAR(sum / static_cast<double>(n), 0.0, 1e-9);
      EXPECT_NEAR(std::sqrt(sq / static_cast<double>(n)), 1.0, 1e-6);
    }
  }
}

TEST(NormalizeToken, ShiftAndScaleAreBitExact) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    const RewardMatrix m = dyadic_matrix(rng, 8, 5);
    const AdvantageMatrix base = normalize_token(m);
    RewardMatrix shifted = m, scaled = m;
    const double c = static_cast<double>(static_cast<int>(rng() % 17) - 8);
    const double s = std::ldexp(1.0, static_cast<int>(rng() % 9) - 4);
    for (std::size_t k = 0; k < m.values.size(); ++k) {
      if (m.mask[k]) {
        shifted.values[k] += c;
        scaled.values[k] *= s;
      }
    }
    EXPECT_EQ(normalize_token(shifted).values, base.values);
    EXPECT_EQ(normalize_token(scaled).values, base.values);
  }
}

TEST(NormalizeSequence, Examples) {
  EXPECT_EQ(normalize_sequence(std::vector<double>{0, 0, 0, 0}), (std::vector<double>{0, 0, 0, 0}));
  EXPECT_EQ(normalize_sequence(std::vector<double>{-1, 1}), (std::vector<double>{-1, 1}));
  const std::vector<double> r{-2.5, -1.0, -4.25, -0.5};
  std::vector<double> shifted = r;
  for (auto& x : shifted) x += 3.0;
  EXPECT_EQ(normalize_sequence(shifted), normalize_sequence(r));
  EXPECT_THROW(normalize_sequence(std::vector<double>{-1.0}), DomainError);
}

TEST(NormalizeSequence, MatrixBroadcastsOverValidPositions) {
  RewardMatrix m = token_matrix(2, 3, {-1, -1, 0, -3, -3, -3}, {1, 1, 0, 1, 1, 1});
  m.mode = RewardMode::kSequence;
  m.totals = {-1.0, -3.0};
  const AdvantageMatrix a = normalize(m);
  EXPECT_EQ(a.values, (std::vector<double>{1, 1, 0, -1, -1, -1}));
  EXPECT_EQ(a.mean.size(), 1u);
}

TEST(ClippedSurrogate, Examples) {
  EXPECT_EQ(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
  EXPECT_EQ(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
  for (double adv : {-2.0, -0.3, 0.0, 0.7, 5.0}) {
    for (double eps : {0.01, 0.2, 0.9}) EXPECT_EQ(clipped_surrogate(1.0, adv, eps), adv);
  }
  EXPECT_EQ(clipped_surrogate(1.5, -1.0, 0.2), -1.5);
  EXPECT_EQ(clipped_surrogate(0.5, 1.0, 0.2), 0.5);
}

TEST(KlToReference, IdenticalIsZero) {
  const TinyNeuralLM m = TinyNeuralLM::random(kAbc, {2, 3, 4}, 1.0, 3);
  const std::vector<std::vector<TokenId>> contexts{{}, {0}, {1, 2}};
  EXPECT_EQ(kl_to_reference(m, m, contexts), 0.0);
}

TEST(KlToReference, PointMassAgainstUniform) {
  const Tokenizer four(Alphabet::from_utf8("abcd"));
  const auto point = testing::chain_model(four, {2}, false, 0);
  const UniformLM uniform(four, false);
  const std::vector<std::vector<TokenId>> contexts{{}};
  EXPECT_NEAR(kl_to_reference(point, uniform, contexts), std::log(4.0), 1e-15);
}

TEST(KlToReference, MatchesDirectSummation) {
  const auto p = testing::random_table_model(kAbc, true, 1);
  const auto q = testing::random_table_model(kAbc, true, 2);
  const std::vector<std::vector<TokenId>> contexts{{}, {0}, {2, 1}, {1, 1, 1}};
  double expected = 0.0;
  for (const auto& c : contexts) {
    const auto pd = p.full_distribution(c);
    const auto qd = q.full_distribution(c);
    for (std::size_t v = 0; v < pd.size(); ++v) expected += pd[v] * std::log(pd[v] / qd[v]);
  }
  expected /= static_cast<double>(contexts.size());
  EXPECT_NEAR(kl_to_reference(p, q, contexts), expected, 1e-12);
}

TEST(KlToReference, Errors) {
  const UniformLM a(kAbc, true);
  const UniformLM b(Tokenizer(Alphabet::from_utf8("abd")), true);
  const std::vector<std::vector<TokenId>> contexts{{}};
  EXPECT_THROW(kl_to_reference(a, b, contexts), DomainError);
  EXPECT_THROW(kl_to_reference(a, a, {}), DomainError);
}

TEST(Loss, TwoByTwoGroupIsZeroAtOldPolicy) {
  const TinyNeuralLM policy = TinyNeuralLM::random(kAbc, {2, 3, 4}, 0.5, 1);
  RolloutGroup group;
  group.prompt = "a";
  group.prompt_ids = {0};
  group.responses.push_back(make_rollout(policy, group.prompt_ids, {1, 2}));
  group.responses.push_back(make_rollout(policy, group.prompt_ids, {2, 2}));
  const AdvantageMatrix adv = normalize_token(token_matrix(2, 2, {-1.0, -0.5, -3.0, -0.25}));
  // Columns standardize to (+1, -1) and (-1, +1).
  EXPECT_EQ(adv.values, (std::vector<double>{1.0, -1.0, -1.0, 1.0}));
  const LossResult r = cme_grpo_loss(group, adv, policy, nullptr, GrpoConfig{2, 0.2, 0.0});
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_EQ(r.kl, 0.0);
}

TEST(Loss, ZeroAdvantagesGiveZeroLossAndGradient) {
  std::mt19937_64 rng(4);
  const TinyNeuralLM policy = TinyNeuralLM::random(kAbc, {2, 3, 4}, 0.5, 2);
  Scenario s = random_scenario(rng, policy, 4);
  std::fill(s.advantages.values.begin(), s.advantages.values.end(), 0.0);
  const LossResult r = cme_grpo_loss(s.group, s.advantages, policy, nullptr, GrpoConfig{4, 0.2, 0.0});
  EXPECT_EQ(r.loss, 0.0);
  for (double g : r.gradient) EXPECT_EQ(g, 0.0);
}

TEST(Loss, BetaZeroIsThePureSurrogateAndBetaAddsKl) {
  std::mt19937_64 rng(6);
  const TinyNeuralLM old_policy = TinyNeuralLM::random(kAbc, {2, 3, 4}, 0.5, 3);
  TinyNeuralLM policy = old_policy;
  for (auto& p : policy.parameters()) p += 0.05 * std::normal_distribution<double>()(rng);
  const Scenario s = random_scenario(rng, old_policy, 4);
  const LossResult plain =
      cme_grpo_loss(s.group, s.advantages, policy, &old_policy, GrpoConfig{4, 0.2, 0.0});
  const LossResult anchored =
      cme_grpo_loss(s.group, s.advantages, policy, &old_policy, GrpoConfig{4, 0.2, 0.5});
  EXPECT_EQ(plain.loss, plain.surrogate);
  EXPECT_DOUBLE_EQ(anchored.surrogate, plain.surrogate);
  EXPECT_GT(anchored.kl, 0.0);
  EXPECT_DOUBLE_EQ(anchored.loss, plain.surrogate + 0.5 * anchored.kl);

  // The KL is the mean exact divergence over every sampled context.
  std::vector<std::vector<TokenId>> contexts;
  for (const auto& r : s.group.responses) {
    std::vector<TokenId> ctx = s.group.prompt_ids;
    for (TokenId id : r.ids) {
      contexts.push_back(ctx);
      ctx.push_back(id);
    }
  }
  EXPECT_NEAR(anchored.kl, kl_to_reference(policy, old_policy, contexts), 1e-14);
}

TEST(Loss, SurrogateValueMatchesDefinition) {
  std::mt19937_64 rng(10);
  const TinyNeuralLM old_policy = TinyNeuralLM::random(kAbc, {2, 3, 4}, 0.5, 5);
  TinyNeuralLM policy = old_policy;
  for (auto& p : policy.parameters()) p += 0.3 * std::normal_distribution<double>()(rng);
  const Scenario s = random_scenario(rng, old_policy, 6);
  const GrpoConfig cfg{6, 0.2, 0.0};
  double expected = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    const Rollout& r = s.group.responses[i];
    const auto now = token_logprobs(policy, s.group.prompt_ids, r.ids);
    double row = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < r.ids.size(); ++t) {
      if (!s.advantages.valid(i, t)) continue;
      row += clipped_surrogate(std::exp(now[t] - r.old_logprobs[t]), s.advantages.at(i, t), 0.2);
      ++n;
    }
    expected -= row / static_cast<double>(n) / 6.0;
  }
  EXPECT_NEAR(cme_grpo_loss(s.group, s.advantages, policy, nullptr, cfg).loss, expected, 1e-13);
}

TEST(Loss, GradientAtOldPolicyIsVanillaPolicyGradient) {
  std::mt19937_64 rng(13);
  const TinyNeuralLM policy = TinyNeuralLM::random(kAbc, {2, 3, 4}, 0.5, 8);
  const Scenario s = random_scenario(rng, policy, 5);
  const LossResult r = cme_grpo_loss(s.group, s.advantages, policy, nullptr, GrpoConfig{5, 0.2, 0.0});
  std::vector<double> expected(policy.parameter_count(), 0.0);
  for (std::size_t i = 0; i < 5; ++i) {
    const Rollout& roll = s.group.responses[i];
    std::size_t n = 0;
    for (std::size_t t = 0; t < roll.ids.size(); ++t) n += s.advantages.valid(i, t) ? 1 : 0;
    std::vector<TokenId> ctx = s.group.prompt_ids;
    for (std::size_t t = 0; t < roll.ids.size(); ++t) {
      if (s.advantages.valid(i, t)) {
        const double scale = -s.advantages.at(i, t) / (5.0 * static_cast<double>(n));
        policy.accumulate_logprob_gradient(ctx, roll.ids[t], scale, expected);
      }
      ctx.push_back(roll.ids[t]);
    }
  }
  for (std::size_t k = 0; k < expected.size(); ++k) EXPECT_NEAR(r.gradient[k], expected[k], 1e-13);
}

TEST(Loss, GradientMatchesFiniteDifferencesAwayFromOldPolicy) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 6; ++trial) {
    const TinyNeuralLM old_policy = TinyNeuralLM::random(kAbc, {2, 3, 4}, 0.6, 20 + trial);
    TinyNeuralLM policy = old_policy;
    // Large enough that some ratios leave the clip interval.
    for (auto& p : policy.parameters()) p += 0.25 * std::normal_distribution<double>()(rng);
    const Scenario s = random_scenario(rng, old_policy, 4);
    const double beta = trial % 2 ? 0.1 : 0.0;
    const GrpoConfig cfg{4, 0.2, beta};
    const LossResult r = cme_grpo_loss(s.group, s.advantages, policy, &old_policy, cfg);
    for (std::size_t k = 0; k < policy.parameter_count(); ++k) {
      TinyNeuralLM up = policy, down = policy;
      up.parameters()[k] += 1e-5;
      down.parameters()[k] -= 1e-5;
      const double fd = (cme_grpo_loss(s.group, s.advantages, up, &old_policy, cfg).loss -
                         cme_grpo_loss(s.group, s.advantages, down, &old_policy, cfg).loss) /
                        2e-5;
      EXPECT_NEAR(r.gradient[k], fd, 1e-4 * std::max(std::abs(fd), 1e-4))
          << "trial " << trial << " parameter " << k;
    }
  }
}

TEST(Loss, MaskedAdvantagesNeverMatter) {
  std::mt19937_64 rng(19);
  const TinyNeuralLM old_policy = TinyNeuralLM::random(kAbc, {2, 3, 4}, 0.6, 4);
  TinyNeuralLM policy = old_policy;
  for (auto& p : policy.parameters()) p += 0.1 * std::normal_distribution<double>()(rng);
  for (int trial = 0; trial < 20; ++trial) {
    const Scenario s = random_scenario(rng, old_policy, 4);
    const GrpoConfig cfg{4, 0.2, trial % 2 ? 0.1 : 0.0};
    const LossResult base = cme_grpo_loss(s.group, s.advantages, policy, &old_policy, cfg);
    AdvantageMatrix poked = s.advantages;
    for (std::size_t k = 0; k < poked.values.size(); ++k) {
      if (!poked.mask[k]) poked.values[k] = 1e6 * std::normal_distribution<double>()(rng);
    }
    const LossResult other = cme_grpo_loss(s.group, poked, policy, &old_policy, cfg);
    EXPECT_EQ(other.loss, base.loss);
    EXPECT_EQ(other.gradient, base.gradient);
  }
}

TEST(Loss, ParallelMatchesSerialReference) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    const TinyNeuralLM old_policy = TinyNeuralLM::random(kAbc, {3, 4, 5}, 0.6, 40 + trial);
    TinyNeuralLM policy = old_policy;
    for (auto& p : policy.parameters()) p += 0.2 * std::normal_distribution<double>()(rng);
    const Scenario s = random_scenario(rng, old_policy, 8);
    const GrpoConfig cfg{8, 0.2, trial % 2 ? 0.1 : 0.0};
    const LossResult a = cme_grpo_loss(s.group, s.advantages, policy, &old_policy, cfg);
    const LossResult b = serial::cme_grpo_loss(s.group, s.advantages, policy, &old_policy, cfg);
    EXPECT_NEAR(a.loss, b.loss, 1e-13);
    EXPECT_NEAR(a.kl, b.kl, 1e-13);
    for (std::size_t k = 0; k < a.gradient.size(); ++k) EXPECT_NEAR(a.gradient[k], b.gradient[k], 1e-12);
  }
}

TEST(Loss, Errors) {
  std::mt19937_64 rng(29);
  const TinyNeuralLM policy = TinyNeuralLM::random(kAbc, {2, 3, 4}, 0.5, 1);
  Scenario s = random_scenario(rng, policy, 4);
  EXPECT_THROW(cme_grpo_loss(s.group, s.advantages, policy, nullptr, GrpoConfig{8, 0.2, 0.0}),
               DomainError);
  EXPECT_THROW(cme_grpo_loss(s.group, s.advantages, policy, nullptr, GrpoConfig{4, 0.2, 0.1}),
               DomainError);
  AdvantageMatrix dead = s.advantages;
  for (std::size_t t = 0; t < dead.cols; ++t) dead.mask[t] = 0;
  EXPECT_THROW(cme_grpo_loss(s.group, dead, policy, nullptr, GrpoConfig{4, 0.2, 0.0}), DomainError);
  RolloutGroup empty;
  EXPECT_THROW(cme_grpo_loss(empty, AdvantageMatrix{}, policy, nullptr, GrpoConfig{0, 0.2, 0.0}),
               DomainError);
}

}  // namespace
}  // namespace cmegrpo
