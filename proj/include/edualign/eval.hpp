#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "edualign/grpo.hpp"
#include "edualign/model.hpp"
#include "edualign/rng.hpp"
#include "edualign/types.hpp"

namespace edualign::eval {

// Predictions rounded to the nearest integer (half away from zero), clamped
// to {0,1,2}, then exact-match rate against the reference labels.
double accuracy(const std::vector<double>& pred, const std::vector<int>& ref);

// Throw UndefinedCorrelation on constant input rather than returning NaN.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

// Pearson on fractional ranks; ties get average ranks.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// Kendall tau-b (tie-corrected in both variables).
double kendall(const std::vector<double>& x, const std::vector<double>& y);

// Average ranks (1-based, ties averaged); exposed for tests.
std::vector<double> average_ranks(const std::vector<double>& x);

struct DimensionMetrics {
  double acc = 0.0;
  // absent when the correlation is undefined (constant input)
  std::optional<double> pearson, spearman, kendall;
};

struct ConsistencyReport {
  DimensionMetrics dims[3];  // H, P, C
  int n = 0;
  std::string source;        // annotation source label, e.g. "oracle"
};

// Any scorer mapping a prompt/response pair to dimension scores.
using ScorerFn = std::function<HpcScores(const TokenSequence& prompt,
                                         const TokenSequence& response)>;

ScorerFn reward_model_scorer(const model::ModelParameters& rm);

// Four metrics per dimension for an arbitrary scorer against the reference
// labels of the test set.
ConsistencyReport consistency_report_for(const ScorerFn& scorer,
                                         const Dataset& test,
                                         const std::string& source);

ConsistencyReport consistency_report(const model::ModelParameters& rm,
                                     const Dataset& test,
                                     const std::string& source = "oracle");

struct ComparisonRow {
  double before = 0.0;
  double after = 0.0;
  double delta() const { return after - before; }
};

struct ComparisonReport {
  ComparisonRow dims[3];  // H, P, C
  ComparisonRow aggregate;
  int n_prompts = 0;
  std::string scorer;
};

// Greedy (temperature 0) response from each policy per prompt, scored by the
// given scorer; aggregate uses the reward weights.
ComparisonReport compare_policies(const model::ModelParameters& before,
                                  const model::ModelParameters& after,
                                  const std::vector<TokenSequence>& prompts,
                                  const ScorerFn& scorer,
                                  const std::string& scorer_label, Rng& rng,
                                  const grpo::RewardWeights& weights = {},
                                  int max_new = 24);

void save_consistency(const ConsistencyReport& r, const std::filesystem::path& path);
ConsistencyReport load_consistency(const std::filesystem::path& path);
void save_comparison(const ComparisonReport& r, const std::filesystem::path& path);
ComparisonReport load_comparison(const std::filesystem::path& path);

// Aligned text table, one row per (dimension, source).
std::string consistency_table(const std::vector<ConsistencyReport>& reports);
std::string comparison_table(const std::vector<ComparisonReport>& reports);

}  // namespace edualign::eval
