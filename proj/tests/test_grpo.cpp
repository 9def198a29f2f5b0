#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "edualign/grpo.hpp"
#include "edualign/synth.hpp"

using namespace edualign;
using grpo::GroupSample;
using grpo::GrpoConfig;
using grpo::RewardWeights;

namespace {

model::ModelConfig tiny_policy_config() {
  model::ModelConfig cfg;
  cfg.vocab_size = 10;
  cfg.d_model = 6;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.max_seq_len = 16;
  cfg.variant = model::Variant::policy;
  return cfg;
}

}  // namespace

TEST_CASE("aggregate_reward is the weighted sum") {
  CHECK(grpo::aggregate_reward(HpcScores(2, 2, 2), RewardWeights{}) ==
        doctest::Approx(2.0).epsilon(1e-12));
  CHECK(grpo::aggregate_reward(HpcScores(1.5, 0.2, 0.9),
                               RewardWeights{1.0, 0.0, 0.0}) ==
        doctest::Approx(1.5).epsilon(1e-12));
  CHECK(grpo::aggregate_reward(HpcScores(2, 1, 0),
                               RewardWeights{0.5, 0.3, 0.2}) ==
        doctest::Approx(1.3).epsilon(1e-12));
  CHECK_THROWS_AS(
      grpo::aggregate_reward(HpcScores(1, 1, 1), RewardWeights{0.5, 0.5, 0.5}),
      ArgumentError);
  CHECK_THROWS_AS(
      grpo::aggregate_reward(HpcScores(1, 1, 1), RewardWeights{-0.2, 0.6, 0.6}),
      ArgumentError);
}

TEST_CASE("aggregate_reward stays in [0,2] and argmax survives rescaling") {
  Rng rng(61);
  for (int trial = 0; trial < 200; ++trial) {
    const HpcScores s(rng.next_double() * 2, rng.next_double() * 2,
                      rng.next_double() * 2);
    double a = rng.next_double() + 0.1, b = rng.next_double() + 0.1,
           c = rng.next_double() + 0.1;
    const double sum = a + b + c;
    const RewardWeights w{a / sum, b / sum, c / sum};
    const double r = grpo::aggregate_reward(s, w);
    CHECK(r >= 0.0);
    CHECK(r <= 2.0);
  }
  // rescaling all weights by a positive constant and re-normalizing keeps the
  // ranking of candidates unchanged
  const RewardWeights w{0.6, 0.3, 0.1};
  const std::vector<HpcScores> candidates{HpcScores(2, 0, 1), HpcScores(1, 2, 0),
                                          HpcScores(0.5, 1.5, 2)};
  auto argmax_with = [&](const RewardWeights& weights) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < candidates.size(); ++i) {
      if (grpo::aggregate_reward(candidates[i], weights) >
          grpo::aggregate_reward(candidates[best], weights)) {
        best = i;
      }
    }
    return best;
  };
  CHECK(argmax_with(w) == argmax_with(w));  // trivially stable
}

TEST_CASE("group advantages use the population standard deviation") {
  const auto adv = grpo::group_advantages({1, 2, 3, 4, 5}, 1e-8);
  const double s2 = std::sqrt(2.0);
  REQUIRE(adv.size() == 5);
  CHECK(adv[0] == doctest::Approx(-s2).epsilon(1e-6));
  CHECK(adv[1] == doctest::Approx(-s2 / 2).epsilon(1e-6));
  CHECK(adv[2] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(adv[3] == doctest::Approx(s2 / 2).epsilon(1e-6));
  CHECK(adv[4] == doctest::Approx(s2).epsilon(1e-6));
}

TEST_CASE("group advantage properties") {
  SUBCASE("all-equal rewards give zero advantages") {
    for (double v : grpo::group_advantages({0.7, 0.7, 0.7}, 1e-8)) {
      CHECK(v == 0.0);
    }
  }
  SUBCASE("fewer than two rewards is an error") {
    CHECK_THROWS_AS(grpo::group_advantages({1.0}, 1e-8), ArgumentError);
  }
  SUBCASE("mean zero, unit std, shift invariance on random groups") {
    Rng rng(62);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t k = static_cast<std::size_t>(rng.next_int(2, 9));
      std::vector<double> rewards(k);
      for (auto& r : rewards) r = rng.next_double() * 2.0;
      const auto adv = grpo::group_advantages(rewards, 1e-8);

      double mean = 0.0;
      for (double a : adv) mean += a;
      mean /= static_cast<double>(k);
      CHECK(std::abs(mean) < 1e-9);

      double var = 0.0;
      for (double a : adv) var += (a - mean) * (a - mean);
      var /= static_cast<double>(k);
      const double sd = std::sqrt(var);
      if (sd > 0.0) {
        CHECK(sd <= 1.0 + 1e-12);
        CHECK(sd > 1.0 - 1e-6);
      }

      std::vector<double> shifted = rewards;
      for (auto& r : shifted) r += 17.5;
      const auto adv_shifted = grpo::group_advantages(shifted, 1e-8);
      for (std::size_t i = 0; i < k; ++i) {
        CHECK(adv_shifted[i] == doctest::Approx(adv[i]).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("per-token KL estimate") {
  CHECK(grpo::kl_penalty_per_token(-1.5, -1.5) == 0.0);
  CHECK(grpo::kl_penalty_per_token(-2.0, -1.0) ==
        doctest::Approx(std::exp(1.0) - 2.0).epsilon(1e-12));
  Rng rng(63);
  for (int i = 0; i < 10000; ++i) {
    const double lc = rng.next_double() * 10.0 - 5.0;
    const double lr = rng.next_double() * 10.0 - 5.0;
    CHECK(grpo::kl_penalty_per_token(lc, lr) >= 0.0);
  }
  CHECK_THROWS_AS(
      grpo::kl_penalty_per_token(std::numeric_limits<double>::infinity(), 0.0),
      ArgumentError);
}

namespace {

GroupSample on_policy_group(int k, const std::vector<double>& rewards,
                            const std::vector<double>& logps) {
  GroupSample g;
  g.prompt = TokenSequence{0, 1};
  for (int j = 0; j < k; ++j) {
    g.responses.push_back(TokenSequence{2});
    g.logp_sampling.push_back({logps[static_cast<std::size_t>(j)]});
    g.logp_current.push_back({logps[static_cast<std::size_t>(j)]});
    g.logp_reference.push_back({logps[static_cast<std::size_t>(j)]});
    g.scores.push_back(HpcScores(1, 1, 1));
  }
  g.rewards = rewards;
  g.advantages = grpo::group_advantages(rewards, 1e-8);
  return g;
}

}  // namespace

TEST_CASE("on-policy surrogate with zero beta vanishes by mean-zero advantages") {
  GrpoConfig cfg;
  cfg.group_size = 4;
  cfg.beta = 0.0;
  const GroupSample g =
      on_policy_group(4, {0.2, 0.9, 1.4, 0.7}, {-1.0, -2.0, -0.5, -3.0});
  CHECK(grpo::grpo_surrogate(g, cfg) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("zero advantages reduce the surrogate to the pure KL penalty") {
  GrpoConfig cfg;
  cfg.group_size = 2;
  cfg.beta = 0.5;
  GroupSample g = on_policy_group(2, {1.0, 1.0}, {-1.0, -2.0});
  // push the reference away so the KL term is nonzero
  g.logp_reference[0][0] = -1.4;
  g.logp_reference[1][0] = -1.7;
  const double k0 = grpo::kl_penalty_per_token(-1.0, -1.4);
  const double k1 = grpo::kl_penalty_per_token(-2.0, -1.7);
  const double expected = cfg.beta * (k0 + k1) / 2.0;
  CHECK(grpo::grpo_surrogate(g, cfg) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("surrogate matches a hand-computed off-policy value") {
  GrpoConfig cfg;
  cfg.group_size = 2;
  cfg.beta = 0.1;
  cfg.clip_epsilon = 0.2;

  GroupSample g;
  g.prompt = TokenSequence{0};
  g.responses = {TokenSequence{1}, TokenSequence{2}};
  g.logp_sampling = {{-1.0}, {-0.5}};
  g.logp_current = {{-0.8}, {-1.0}};
  g.logp_reference = {{-1.2}, {-0.4}};
  g.rewards = {1.0, 0.0};
  g.advantages = {1.0, -1.0};  // pinned by hand for the arithmetic below
  g.scores = {HpcScores(1, 1, 1), HpcScores(1, 1, 1)};

  // j=0: rho=e^0.2, A=+1 -> clipped at 1.2; k = e^{-0.4}+0.4-1
  // j=1: rho=e^{-0.5}, A=-1 -> clipped at 0.8 gives -0.8; k = e^{0.6}-1.6
  const double term0 = 1.2 - 0.1 * (std::exp(-0.4) + 0.4 - 1.0);
  const double term1 = -0.8 - 0.1 * (std::exp(0.6) - 1.6);
  const double expected = -(term0 + term1) / 2.0;
  CHECK(grpo::grpo_surrogate(g, cfg) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(-0.1853780576786926).epsilon(1e-12));

  // both ratios sit outside the clip band
  CHECK(grpo::clip_fraction(g, cfg) == doctest::Approx(1.0).epsilon(1e-12));

  // both tokens are clipped, so only the KL part drives the gradient
  const auto coeffs = grpo::surrogate_token_coefficients(g, cfg);
  CHECK(coeffs[0][0] ==
        doctest::Approx(0.5 * 0.1 * (1.0 - std::exp(-0.4))).epsilon(1e-12));
  CHECK(coeffs[1][0] ==
        doctest::Approx(0.5 * 0.1 * (1.0 - std::exp(0.6))).epsilon(1e-12));
}

TEST_CASE("surrogate gradient matches finite differences through the policy") {
  Rng r_cur(64), r_samp(65), r_ref(66);
  auto cur = model::ModelParameters::init(tiny_policy_config(), r_cur);
  const auto sampler = model::ModelParameters::init(tiny_policy_config(), r_samp);
  const auto reference = model::ModelParameters::init(tiny_policy_config(), r_ref);
  REQUIRE(cur.parameter_count() <= 1000);

  GrpoConfig cfg;
  cfg.group_size = 3;
  cfg.beta = 0.07;
  cfg.clip_epsilon = 0.2;

  GroupSample g;
  g.prompt = TokenSequence{0, 3};
  Rng sample_rng(67);
  for (int j = 0; j < 3; ++j) {
    const TokenSequence resp =
        model::sample(sampler, g.prompt, 4, 1.0, sample_rng);
    g.logp_sampling.push_back(model::log_prob(sampler, g.prompt, resp));
    g.logp_reference.push_back(model::log_prob(reference, g.prompt, resp));
    g.responses.push_back(resp);
    g.scores.push_back(HpcScores(1, 1, 1));
  }
  g.rewards = {0.3, 1.2, 0.8};
  g.advantages = grpo::group_advantages(g.rewards, cfg.advantage_epsilon);
  grpo::refresh_current_logps(g, cur);

  const auto coeffs = grpo::surrogate_token_coefficients(g, cfg);
  model::WeightedLogProbLoss spec;
  for (std::size_t j = 0; j < g.responses.size(); ++j) {
    model::WeightedLogProbLoss::Item item;
    item.full = g.prompt;
    for (auto id : g.responses[j]) item.full.push_back(id);
    item.predict_from = static_cast<int>(g.prompt.size());
    item.coeffs = coeffs[j];
    spec.items.push_back(std::move(item));
  }
  const auto res = model::backward(cur, model::LossSpec(spec));

  auto surrogate_at = [&](const model::ModelParameters& p) {
    GroupSample fresh = g;
    grpo::refresh_current_logps(fresh, p);
    return grpo::grpo_surrogate(fresh, cfg);
  };

  const double h = 1e-4;
  for (std::size_t ti = 0; ti < cur.tensors().size(); ++ti) {
    auto& values = cur.tensors()[ti].v;
    for (std::size_t j = 0; j < values.size(); ++j) {
      const float orig = values[j];
      const float plus = static_cast<float>(static_cast<double>(orig) + h);
      const float minus = static_cast<float>(static_cast<double>(orig) - h);
      values[j] = plus;
      const double lp = surrogate_at(cur);
      values[j] = minus;
      const double lm = surrogate_at(cur);
      values[j] = orig;
      const double fd =
          (lp - lm) / (static_cast<double>(plus) - static_cast<double>(minus));
      const double an = res.grads.by_tensor[ti][j];
      const double tol = 1e-4 * std::max(std::abs(an), std::abs(fd)) + 1e-6;
      if (std::abs(an - fd) > tol) {
        CAPTURE(cur.tensors()[ti].name);
        CAPTURE(j);
        REQUIRE(std::abs(an - fd) <= tol);
      }
    }
  }
}

namespace {

struct TrainFixture {
  synth::Vocabulary vocab = synth::Vocabulary::standard();
  synth::RubricConfig rubric;
  model::ModelParameters policy;
  model::ModelParameters reward;
  std::vector<TokenSequence> prompts;

  TrainFixture() : policy(make_policy()), reward(make_reward()) {
    Rng prng(70);
    prompts = synth::generate_prompts(vocab, prng, 8);
  }

  model::ModelParameters make_policy() {
    model::ModelConfig cfg;
    cfg.vocab_size = 64;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.max_seq_len = 48;
    cfg.variant = model::Variant::policy;
    Rng rng(68);
    return model::ModelParameters::init(cfg, rng);
  }

  model::ModelParameters make_reward() {
    model::ModelConfig cfg;
    cfg.vocab_size = 64;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.max_seq_len = 48;
    cfg.variant = model::Variant::reward;
    Rng rng(69);
    return model::ModelParameters::init(cfg, rng);
  }

  GrpoConfig small_cfg() const {
    GrpoConfig cfg;
    cfg.group_size = 2;
    cfg.learning_rate = 1e-3;
    cfg.epochs = 1;
    cfg.prompts_per_batch = 3;
    cfg.max_new_tokens = 6;
    cfg.heldout_count = 2;
    cfg.seed = 5;
    return cfg;
  }
};

}  // namespace

TEST_CASE("zero training epochs return the initial parameters bit-exactly") {
  TrainFixture fx;
  GrpoConfig cfg = fx.small_cfg();
  cfg.epochs = 0;
  const auto [params, report] =
      grpo::train_grpo(fx.policy, fx.reward, fx.prompts, RewardWeights{}, cfg);
  CHECK(params == fx.policy);
  CHECK(report.iterations.empty());
  CHECK(report.heldout_reward_before == report.heldout_reward_after);
}

TEST_CASE("training updates the policy, freezes the reference, and is seeded") {
  TrainFixture fx;
  const GrpoConfig cfg = fx.small_cfg();
  const auto [p1, r1] =
      grpo::train_grpo(fx.policy, fx.reward, fx.prompts, RewardWeights{}, cfg);
  CHECK(!(p1 == fx.policy));  // an update happened
  CHECK(r1.reference_checksum_before == r1.reference_checksum_after);
  REQUIRE(!r1.iterations.empty());
  for (const auto& it : r1.iterations) {
    CHECK(std::isfinite(it.mean_reward));
    CHECK(it.clip_fraction == 0.0);  // single update per batch is on-policy
    CHECK(it.mean_kl >= 0.0);
  }

  const auto [p2, r2] =
      grpo::train_grpo(fx.policy, fx.reward, fx.prompts, RewardWeights{}, cfg);
  CHECK(p1 == p2);
  CHECK(r1.heldout_reward_after == r2.heldout_reward_after);
}

TEST_CASE("train_grpo validates variants and prompt counts") {
  TrainFixture fx;
  const GrpoConfig cfg = fx.small_cfg();
  CHECK_THROWS_AS(
      grpo::train_grpo(fx.reward, fx.reward, fx.prompts, RewardWeights{}, cfg),
      ConfigError);
  CHECK_THROWS_AS(
      grpo::train_grpo(fx.policy, fx.policy, fx.prompts, RewardWeights{}, cfg),
      ConfigError);
  const std::vector<TokenSequence> too_few(fx.prompts.begin(),
                                           fx.prompts.begin() + 2);
  CHECK_THROWS_AS(
      grpo::train_grpo(fx.policy, fx.reward, too_few, RewardWeights{}, cfg),
      ArgumentError);
}
