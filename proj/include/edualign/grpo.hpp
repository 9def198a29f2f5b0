#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "edualign/model.hpp"
#include "edualign/types.hpp"

namespace edualign::grpo {

// Simplex weights combining the three dimension scores into one scalar.
struct RewardWeights {
  double w_h = 1.0 / 3.0;
  double w_p = 1.0 / 3.0;
  double w_c = 1.0 / 3.0;

  void validate() const;  // nonnegative, sum to 1 within 1e-9
};

struct GrpoConfig {
  int group_size = 5;            // candidate responses per prompt
  double learning_rate = 1e-4;   // desk-scale default; reference setups use 5e-6
  int epochs = 1;
  double beta = 0.04;            // KL penalty coefficient
  double clip_epsilon = 0.2;
  double temperature = 1.0;
  double advantage_epsilon = 1e-8;
  std::uint64_t seed = 0;
  // plumbing
  int prompts_per_batch = 8;
  int max_new_tokens = 24;
  int heldout_count = 0;  // trailing prompts reserved for before/after reporting

  void validate() const;
};

// One prompt's worth of sampled candidates with everything the update needs.
struct GroupSample {
  TokenSequence prompt;
  std::vector<TokenSequence> responses;            // K
  std::vector<HpcScores> scores;                   // K
  std::vector<double> rewards;                     // K
  std::vector<double> advantages;                  // K
  std::vector<std::vector<double>> logp_sampling;  // per response, per token
  std::vector<std::vector<double>> logp_current;
  std::vector<std::vector<double>> logp_reference;
};

struct IterationStats {
  int iter = 0;
  double mean_reward = 0.0;
  double mean_h = 0.0, mean_p = 0.0, mean_c = 0.0;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
};

struct GrpoReport {
  std::vector<IterationStats> iterations;
  double heldout_reward_before = 0.0;
  double heldout_reward_after = 0.0;
  std::uint64_t reference_checksum_before = 0;  // FNV over reference bytes
  std::uint64_t reference_checksum_after = 0;
  double wall_clock_seconds = 0.0;
  std::string checkpoint_path;
};

// R = w_h*S_h + w_p*S_p + w_c*S_c, in [0, 2] for simplex weights.
double aggregate_reward(const HpcScores& scores, const RewardWeights& w);

// Group-relative advantages: (r - mean) / (population std + eps).
// All-equal rewards give all zeros.
std::vector<double> group_advantages(const std::vector<double>& rewards,
                                     double eps);

// Nonnegative per-token KL estimate: exp(d) - d - 1 with
// d = logp_reference - logp_current. Zero iff the log-probs agree.
double kl_penalty_per_token(double logp_current, double logp_reference);

// Clipped-ratio surrogate with the KL penalty, length-normalized per response:
//   -(1/K) sum_j (1/|y_j|) sum_t [ min(rho*A, clip(rho)*A) - beta*k_t ]
// with rho_t = exp(logp_current - logp_sampling).
double grpo_surrogate(const GroupSample& group, const GrpoConfig& cfg);

// d(surrogate)/d(logp_current) per response token; feeding these to the
// model's weighted log-prob backward yields the exact surrogate gradient.
std::vector<std::vector<double>> surrogate_token_coefficients(
    const GroupSample& group, const GrpoConfig& cfg);

// Fraction of tokens whose importance ratio left [1-eps, 1+eps].
double clip_fraction(const GroupSample& group, const GrpoConfig& cfg);

// Recompute logp_current for every response under the given parameters.
void refresh_current_logps(GroupSample& group,
                           const model::ModelParameters& params);

// Sampling -> scoring -> group advantages -> clipped update, one optimizer
// step per prompt batch. The reward model stays frozen; the reference policy
// is a frozen copy of the initial policy. The trailing cfg.heldout_count
// prompts are excluded from training and used for before/after reporting.
std::pair<model::ModelParameters, GrpoReport> train_grpo(
    const model::ModelParameters& policy_init,
    const model::ModelParameters& reward_model,
    const std::vector<TokenSequence>& prompts, const RewardWeights& w,
    const GrpoConfig& cfg);

void save_report(const GrpoReport& report, const std::filesystem::path& path);
void save_iteration_csv(const GrpoReport& report,
                        const std::filesystem::path& path);

// Mean per-token KL estimate of `policy` against `reference` over responses
// sampled from `policy` at the configured temperature (seeded, deterministic).
double mean_kl_on_prompts(const model::ModelParameters& policy,
                          const model::ModelParameters& reference,
                          const std::vector<TokenSequence>& prompts,
                          const GrpoConfig& cfg);

}  // namespace edualign::grpo
