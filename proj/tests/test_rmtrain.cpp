#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "edualign/dataset_io.hpp"
#include "edualign/rmtrain.hpp"
#include "edualign/synth.hpp"

using namespace edualign;

namespace {

const synth::Vocabulary kVocab = synth::Vocabulary::standard();
const synth::RubricConfig kRubric;

model::ModelConfig small_reward_config() {
  model::ModelConfig cfg;
  cfg.vocab_size = kVocab.vocab_size;
  cfg.d_model = 32;
  cfg.n_layers = 1;
  cfg.n_heads = 4;
  cfg.max_seq_len = 64;
  cfg.variant = model::Variant::reward;
  return cfg;
}

Dataset corpus(int n, std::uint64_t seed) {
  Rng rng(seed);
  return synth::generate_corpus(kVocab, kRubric, n, rng,
                                {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0});
}

}  // namespace

TEST_CASE("rm_loss on fresh heads follows the squared-error formula") {
  Rng rng(41);
  const auto params = model::ModelParameters::init(small_reward_config(), rng);
  // fresh reward heads predict exactly (1,1,1)
  std::vector<AnnotatedPair> pairs;
  pairs.push_back({{0, 2, 3}, {20, 21}, HpcScores(2, 0, 1), "oracle", false});
  CHECK(rm::rm_loss(params, pairs) == doctest::Approx(2.0).epsilon(1e-12));

  pairs.push_back({{0, 4, 5}, {22, 23}, HpcScores(1, 1, 1), "oracle", false});
  // per-pair losses 2.0 and 0.0 average to 1.0
  CHECK(rm::rm_loss(params, pairs) == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<AnnotatedPair> perfect;
  perfect.push_back({{0, 2}, {24}, HpcScores(1, 1, 1), "oracle", false});
  CHECK(rm::rm_loss(params, perfect) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("rm_loss matches an independent recomputation on random batches") {
  Rng rng(42);
  const auto params = model::ModelParameters::init(small_reward_config(), rng);
  const Dataset d = corpus(64, 43);
  for (int trial = 0; trial < 4; ++trial) {
    std::vector<AnnotatedPair> batch;
    for (int i = 0; i < 16; ++i) {
      batch.push_back(d.pairs()[static_cast<std::size_t>(rng.next_below(d.size()))]);
    }
    // brute force: explicit loops over pairs and dimensions
    double total = 0.0;
    for (const AnnotatedPair& p : batch) {
      const HpcScores pred = model::forward_reward(params, p.prompt, p.response);
      const double dh = pred.helpfulness() - p.scores.helpfulness();
      const double dp = pred.personalization() - p.scores.personalization();
      const double dc = pred.creativity() - p.scores.creativity();
      total += dh * dh + dp * dp + dc * dc;
    }
    const double expected = total / static_cast<double>(batch.size());
    CHECK(rm::rm_loss(params, batch) == doctest::Approx(expected).epsilon(1e-9));
  }
}

TEST_CASE("rm_loss rejects the wrong variant and empty batches") {
  Rng rng(44);
  model::ModelConfig cfg = small_reward_config();
  cfg.variant = model::Variant::policy;
  const auto policy = model::ModelParameters::init(cfg, rng);
  const std::vector<AnnotatedPair> empty;
  CHECK_THROWS_AS(rm::rm_loss(policy, empty), ConfigError);
  const auto reward = model::ModelParameters::init(small_reward_config(), rng);
  CHECK_THROWS_AS(rm::rm_loss(reward, empty), ArgumentError);
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(rm::cosine_lr(0, 100, 3e-5) == doctest::Approx(3e-5).epsilon(1e-12));
  CHECK(rm::cosine_lr(100, 100, 3e-5) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(rm::cosine_lr(50, 100, 3e-5) == doctest::Approx(1.5e-5).epsilon(1e-12));
  CHECK_THROWS_AS(rm::cosine_lr(-1, 100, 3e-5), ArgumentError);
  CHECK_THROWS_AS(rm::cosine_lr(101, 100, 3e-5), ArgumentError);
}

TEST_CASE("training reduces validation error on oracle labels") {
  const Dataset train = corpus(600, 45);
  const Dataset val = corpus(200, 46);
  Rng init_rng(47);
  const auto init = model::ModelParameters::init(small_reward_config(), init_rng);

  rm::RmTrainConfig cfg;
  cfg.learning_rate = 2e-3;
  cfg.epochs = 4;
  cfg.batch_size = 16;
  cfg.seed = 7;

  const auto [params, report] = rm::train_reward_model(init, train, val, cfg);
  REQUIRE(report.epochs.size() == 4);

  // fresh heads predict 1.0; the initial epoch must already beat that baseline
  const double initial_val = rm::rm_loss(init, val.pairs());
  const double final_val = report.epochs.back().val_loss;
  CHECK(final_val < 0.6 * initial_val);
  CHECK(report.epochs.back().train_loss < report.epochs.front().train_loss);
  for (const auto& e : report.epochs) {
    CHECK(std::isfinite(e.train_loss));
    CHECK(e.val_loss >= 0.0);
  }
  // returned parameters are the best-validation ones
  const double returned_val = rm::rm_loss(params, val.pairs());
  const double best_recorded =
      report.epochs[static_cast<std::size_t>(report.best_epoch)].val_loss;
  CHECK(returned_val == doctest::Approx(best_recorded).epsilon(1e-9));
}

TEST_CASE("training is deterministic in the seed") {
  const Dataset train = corpus(120, 48);
  const Dataset val = corpus(40, 49);
  Rng i1(50), i2(50);
  const auto init1 = model::ModelParameters::init(small_reward_config(), i1);
  const auto init2 = model::ModelParameters::init(small_reward_config(), i2);

  rm::RmTrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.seed = 99;

  const auto [p1, r1] = rm::train_reward_model(init1, train, val, cfg);
  const auto [p2, r2] = rm::train_reward_model(init2, train, val, cfg);
  CHECK(p1 == p2);  // bitwise-identical parameters
  REQUIRE(r1.epochs.size() == r2.epochs.size());
  for (std::size_t i = 0; i < r1.epochs.size(); ++i) {
    CHECK(r1.epochs[i].train_loss == r2.epochs[i].train_loss);
    CHECK(r1.epochs[i].val_loss == r2.epochs[i].val_loss);
  }
}

TEST_CASE("training on pure noise cannot beat the predict-the-mean baseline") {
  const Dataset clean_train = corpus(400, 51);
  const Dataset clean_val = corpus(150, 52);
  Rng noise_rng(53);
  const Dataset noisy_train = synth::corrupt_annotations(clean_train, 1.0, noise_rng);
  const Dataset noisy_val = synth::corrupt_annotations(clean_val, 1.0, noise_rng);

  Rng init_rng(54);
  const auto init = model::ModelParameters::init(small_reward_config(), init_rng);
  rm::RmTrainConfig cfg;
  cfg.learning_rate = 2e-3;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.seed = 11;
  const auto [params, report] =
      rm::train_reward_model(init, noisy_train, noisy_val, cfg);

  // per-dimension MSE against ORACLE labels vs the oracle label variance
  for (int dim = 0; dim < 3; ++dim) {
    double mean = 0.0;
    for (const auto& p : clean_val.pairs()) mean += p.scores.dim(dim);
    mean /= static_cast<double>(clean_val.size());
    double variance = 0.0, mse = 0.0;
    for (const auto& p : clean_val.pairs()) {
      const double label = p.scores.dim(dim);
      variance += (label - mean) * (label - mean);
      const HpcScores pred = model::forward_reward(params, p.prompt, p.response);
      mse += (pred.dim(dim) - label) * (pred.dim(dim) - label);
    }
    variance /= static_cast<double>(clean_val.size());
    mse /= static_cast<double>(clean_val.size());
    CHECK(mse > 0.9 * variance);
  }
}
