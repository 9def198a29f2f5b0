#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "edualign/eval.hpp"
#include "edualign/synth.hpp"

using namespace edualign;

namespace {

// Definitional re-implementations used as oracles. Deliberately written from
// the textbook formulas with plain loops and no shared helpers.

double bf_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double sum_x = 0, sum_y = 0;
  for (std::size_t i = 0; i < n; ++i) sum_x += x[i];
  for (std::size_t i = 0; i < n; ++i) sum_y += y[i];
  const double mean_x = sum_x / static_cast<double>(n);
  const double mean_y = sum_y / static_cast<double>(n);
  double num = 0, den_x = 0, den_y = 0;
  for (std::size_t i = 0; i < n; ++i) {
    num += (x[i] - mean_x) * (y[i] - mean_y);
    den_x += (x[i] - mean_x) * (x[i] - mean_x);
    den_y += (y[i] - mean_y) * (y[i] - mean_y);
  }
  return num / (std::sqrt(den_x) * std::sqrt(den_y));
}

std::vector<double> bf_ranks(const std::vector<double>& x) {
  // rank = (count of strictly smaller) + (count of equal + 1) / 2
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::size_t less = 0, equal = 0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (x[j] < x[i]) ++less;
      if (x[j] == x[i]) ++equal;
    }
    ranks[i] = static_cast<double>(less) + (static_cast<double>(equal) + 1.0) / 2.0;
  }
  return ranks;
}

double bf_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return bf_pearson(bf_ranks(x), bf_ranks(y));
}

double bf_kendall_tau_b(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double nc = 0, nd = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double prod = (x[i] - x[j]) * (y[i] - y[j]);
      if (prod > 0) nc += 1;
      if (prod < 0) nd += 1;
    }
  }
  double n0 = static_cast<double>(n) * (static_cast<double>(n) - 1) / 2.0;
  double tx = 0, ty = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (x[i] == x[j]) tx += 1;
      if (y[i] == y[j]) ty += 1;
    }
  }
  return (nc - nd) / std::sqrt((n0 - tx) * (n0 - ty));
}

std::vector<double> random_vector(Rng& rng, std::size_t n, bool with_ties) {
  std::vector<double> v(n);
  for (auto& e : v) {
    e = with_ties ? static_cast<double>(rng.next_int(0, 4))
                  : rng.next_double() * 10.0 - 5.0;
  }
  return v;
}

bool constant(const std::vector<double>& v) {
  for (double e : v) {
    if (e != v[0]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("accuracy rounds half away from zero and clamps") {
  CHECK(eval::accuracy({0.9, 1.2, 2.0}, {1, 1, 2}) == 1.0);
  CHECK(eval::accuracy({0.4, 1.2}, {1, 1}) == 0.5);
  CHECK(eval::accuracy({0.5}, {1}) == 1.0);   // .5 rounds up
  CHECK(eval::accuracy({1.5}, {2}) == 1.0);
  CHECK(eval::accuracy({1.9, 0.1}, {2, 0}) == 1.0);
  CHECK_THROWS_AS(eval::accuracy({0.5, 1.0}, {1}), ArgumentError);
}

TEST_CASE("accuracy is 1 whenever every prediction is within half a level") {
  Rng rng(31);
  std::vector<double> pred;
  std::vector<int> ref;
  for (int i = 0; i < 500; ++i) {
    const int label = rng.next_int(0, 2);
    ref.push_back(label);
    pred.push_back(label + (rng.next_double() - 0.5) * 0.98);
  }
  CHECK(eval::accuracy(pred, ref) == 1.0);
}

TEST_CASE("pearson hand-derived values") {
  CHECK(eval::pearson({1, 2, 3}, {5, 7, 9}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(eval::pearson({1, 2, 3}, {-1, -2, -3}) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(eval::pearson({1, 2, 3}, {1, 2, 4}) ==
        doctest::Approx(0.98198).epsilon(1e-5));
  CHECK(eval::pearson({1, 2, 3}, {1, 2, 4}) ==
        doctest::Approx(bf_pearson({1, 2, 3}, {1, 2, 4})).epsilon(1e-12));
  CHECK_THROWS_AS(eval::pearson({1, 1, 1}, {1, 2, 3}), UndefinedCorrelation);
}

TEST_CASE("spearman hand-derived values and tie handling") {
  CHECK(eval::spearman({1, 2, 3}, {2, 4, 9}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(eval::spearman({1, 2, 3}, {1, 3, 2}) == doctest::Approx(0.5).epsilon(1e-12));
  const auto ranks = eval::average_ranks({1, 2, 2, 3});
  CHECK(ranks == std::vector<double>{1.0, 2.5, 2.5, 4.0});
  CHECK_THROWS_AS(eval::spearman({2, 2, 2}, {1, 2, 3}), UndefinedCorrelation);
}

TEST_CASE("kendall hand-derived values") {
  CHECK(eval::kendall({1, 2, 3}, {1, 3, 2}) ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(eval::kendall({1, 2, 3, 4}, {1, 2, 3, 4}) == doctest::Approx(1.0));
  CHECK(eval::kendall({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK_THROWS_AS(eval::kendall({1, 1, 1}, {1, 2, 3}), UndefinedCorrelation);
}

TEST_CASE("metrics match brute-force oracles on 1000 random vectors") {
  Rng rng(32);
  int done = 0;
  while (done < 1000) {
    const std::size_t n = static_cast<std::size_t>(rng.next_int(2, 50));
    const bool ties = rng.next_double() < 0.5;
    const auto x = random_vector(rng, n, ties);
    const auto y = random_vector(rng, n, ties);
    if (constant(x) || constant(y)) continue;
    ++done;
    CHECK(eval::pearson(x, y) == doctest::Approx(bf_pearson(x, y)).epsilon(1e-9));
    CHECK(eval::spearman(x, y) == doctest::Approx(bf_spearman(x, y)).epsilon(1e-9));
    CHECK(eval::kendall(x, y) ==
          doctest::Approx(bf_kendall_tau_b(x, y)).epsilon(1e-9));
  }
}

TEST_CASE("correlations are symmetric and transform-invariant") {
  Rng rng(33);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = static_cast<std::size_t>(rng.next_int(3, 30));
    const auto x = random_vector(rng, n, trial % 2 == 0);
    const auto y = random_vector(rng, n, trial % 2 == 0);
    if (constant(x) || constant(y)) continue;

    CHECK(eval::pearson(x, y) == doctest::Approx(eval::pearson(y, x)).epsilon(1e-12));
    CHECK(eval::spearman(x, y) == doctest::Approx(eval::spearman(y, x)).epsilon(1e-12));
    CHECK(eval::kendall(x, y) == doctest::Approx(eval::kendall(y, x)).epsilon(1e-12));

    // positive affine transform of one argument
    std::vector<double> ax(n);
    for (std::size_t i = 0; i < n; ++i) ax[i] = 2.5 * x[i] + 3.0;
    CHECK(eval::pearson(ax, y) == doctest::Approx(eval::pearson(x, y)).epsilon(1e-9));

    // strictly increasing nonlinear transform preserves rank statistics
    std::vector<double> ex(n);
    for (std::size_t i = 0; i < n; ++i) ex[i] = std::exp(x[i] * 0.3);
    CHECK(eval::spearman(ex, y) == doctest::Approx(eval::spearman(x, y)).epsilon(1e-9));
    CHECK(eval::kendall(ex, y) == doctest::Approx(eval::kendall(x, y)).epsilon(1e-9));
  }
}

TEST_CASE("consistency report against the oracle itself is perfect") {
  const auto vocab = synth::Vocabulary::standard();
  const synth::RubricConfig rubric;
  Rng rng(34);
  const Dataset test = synth::generate_corpus(vocab, rubric, 300, rng,
                                              {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0});
  const eval::ScorerFn oracle = [&](const TokenSequence& p, const TokenSequence& r) {
    return synth::rubric_scores(vocab, rubric, p, r);
  };
  const auto report = eval::consistency_report_for(oracle, test, "self");
  for (int d = 0; d < 3; ++d) {
    CHECK(report.dims[d].acc == 1.0);
    REQUIRE(report.dims[d].pearson.has_value());
    CHECK(*report.dims[d].pearson == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(*report.dims[d].spearman == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(*report.dims[d].kendall == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("constant predictions surface as undefined markers, not NaN") {
  const auto vocab = synth::Vocabulary::standard();
  const synth::RubricConfig rubric;
  Rng rng(35);
  const Dataset test = synth::generate_corpus(vocab, rubric, 400, rng,
                                              {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0});
  const eval::ScorerFn constant_one = [](const TokenSequence&, const TokenSequence&) {
    return HpcScores(1.0, 1.0, 1.0);
  };
  const auto report = eval::consistency_report_for(constant_one, test, "fresh");
  for (int d = 0; d < 3; ++d) {
    CHECK(!report.dims[d].pearson.has_value());
    CHECK(!report.dims[d].spearman.has_value());
    CHECK(!report.dims[d].kendall.has_value());
    // constant 1.0 rounds to label 1, so ACC is the fraction of ones
    std::size_t ones = 0;
    for (const auto& p : test.pairs()) {
      if (p.scores.dim(d) == 1.0) ++ones;
    }
    CHECK(report.dims[d].acc ==
          doctest::Approx(static_cast<double>(ones) / test.size()).epsilon(1e-12));
  }
}

TEST_CASE("comparing a policy against itself gives zero deltas") {
  model::ModelConfig cfg;
  cfg.variant = model::Variant::policy;
  Rng init_rng(36);
  const auto policy = model::ModelParameters::init(cfg, init_rng);

  const auto vocab = synth::Vocabulary::standard();
  const synth::RubricConfig rubric;
  Rng prompt_rng(37);
  const auto prompts = synth::generate_prompts(vocab, prompt_rng, 10);
  const eval::ScorerFn oracle = [&](const TokenSequence& p, const TokenSequence& r) {
    return synth::rubric_scores(vocab, rubric, p, r);
  };
  Rng rng(38);
  const auto report =
      eval::compare_policies(policy, policy, prompts, oracle, "oracle", rng);
  CHECK(report.n_prompts == 10);
  for (int d = 0; d < 3; ++d) CHECK(report.dims[d].delta() == 0.0);
  CHECK(report.aggregate.delta() == 0.0);
}

TEST_CASE("reports round-trip through json") {
  eval::ConsistencyReport r;
  r.source = "oracle";
  r.n = 42;
  r.dims[0] = {0.9, 0.8, 0.7, 0.6};
  r.dims[1] = {0.5, std::nullopt, std::nullopt, std::nullopt};
  r.dims[2] = {1.0, 0.99, 0.98, 0.97};
  const auto dir = std::filesystem::temp_directory_path() / "edualign_eval_test";
  std::filesystem::create_directories(dir);
  eval::save_consistency(r, dir / "c.json");
  const auto loaded = eval::load_consistency(dir / "c.json");
  CHECK(loaded.source == r.source);
  CHECK(loaded.n == r.n);
  CHECK(loaded.dims[0].pearson == r.dims[0].pearson);
  CHECK(!loaded.dims[1].pearson.has_value());

  eval::ComparisonReport c;
  c.scorer = "oracle";
  c.n_prompts = 100;
  c.dims[0] = {0.2, 1.4};
  c.aggregate = {0.5, 0.9};
  eval::save_comparison(c, dir / "cmp.json");
  const auto loaded_c = eval::load_comparison(dir / "cmp.json");
  CHECK(loaded_c.scorer == "oracle");
  CHECK(loaded_c.dims[0].delta() == doctest::Approx(1.2).epsilon(1e-12));

  const std::string table = eval::consistency_table({r});
  CHECK(table.find("helpfulness") != std::string::npos);
  CHECK(table.find("n/a") != std::string::npos);
}
