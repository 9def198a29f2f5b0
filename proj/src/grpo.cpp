#include "edualign/grpo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "edualign/optim.hpp"
#include "edualign/rng.hpp"

namespace edualign::grpo {

using nlohmann::json;

void RewardWeights::validate() const {
  if (w_h < 0.0 || w_p < 0.0 || w_c < 0.0) {
    throw ArgumentError("RewardWeights: weights must be nonnegative");
  }
  const double sum = w_h + w_p + w_c;
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ArgumentError("RewardWeights: weights sum to " + std::to_string(sum) +
                        ", expected 1");
  }
}

void GrpoConfig::validate() const {
  if (group_size < 2) throw ConfigError("GrpoConfig: group_size must be >= 2");
  if (learning_rate <= 0.0) throw ConfigError("GrpoConfig: learning_rate must be > 0");
  if (epochs < 0) throw ConfigError("GrpoConfig: epochs must be >= 0");
  if (beta < 0.0) throw ConfigError("GrpoConfig: beta must be >= 0");
  if (clip_epsilon <= 0.0) throw ConfigError("GrpoConfig: clip_epsilon must be > 0");
  if (temperature < 0.0) throw ConfigError("GrpoConfig: temperature must be >= 0");
  if (advantage_epsilon <= 0.0) {
    throw ConfigError("GrpoConfig: advantage_epsilon must be > 0");
  }
  if (prompts_per_batch < 1) throw ConfigError("GrpoConfig: prompts_per_batch must be >= 1");
  if (max_new_tokens < 1) throw ConfigError("GrpoConfig: max_new_tokens must be >= 1");
  if (heldout_count < 0) throw ConfigError("GrpoConfig: heldout_count must be >= 0");
}

double aggregate_reward(const HpcScores& scores, const RewardWeights& w) {
  w.validate();
  return w.w_h * scores.helpfulness() + w.w_p * scores.personalization() +
         w.w_c * scores.creativity();
}

std::vector<double> group_advantages(const std::vector<double>& rewards,
                                     double eps) {
  const std::size_t k = rewards.size();
  if (k < 2) throw ArgumentError("group_advantages: need at least 2 rewards");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(k);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(k);  // population variance
  const double std_dev = std::sqrt(var);
  std::vector<double> out(k);
  if (std_dev == 0.0) return out;  // all-equal rewards: zero advantages
  for (std::size_t j = 0; j < k; ++j) {
    out[j] = (rewards[j] - mean) / (std_dev + eps);
  }
  return out;
}

double kl_penalty_per_token(double logp_current, double logp_reference) {
  if (!std::isfinite(logp_current) || !std::isfinite(logp_reference)) {
    throw ArgumentError("kl_penalty_per_token: inputs must be finite");
  }
  const double d = logp_reference - logp_current;
  return std::exp(d) - d - 1.0;
}

namespace {

double clip(double x, double lo, double hi) {
  return std::min(std::max(x, lo), hi);
}

void check_group(const GroupSample& g, const GrpoConfig& cfg) {
  const std::size_t k = g.responses.size();
  if (k != static_cast<std::size_t>(cfg.group_size) ||
      g.advantages.size() != k || g.logp_sampling.size() != k ||
      g.logp_current.size() != k || g.logp_reference.size() != k) {
    throw ArgumentError("grpo_surrogate: group not fully populated");
  }
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t len = g.responses[j].size();
    if (len == 0 || g.logp_sampling[j].size() != len ||
        g.logp_current[j].size() != len || g.logp_reference[j].size() != len) {
      throw ArgumentError("grpo_surrogate: log-prob lengths do not match responses");
    }
  }
}

}  // namespace

double grpo_surrogate(const GroupSample& group, const GrpoConfig& cfg) {
  check_group(group, cfg);
  const double k = static_cast<double>(group.responses.size());
  double total = 0.0;
  for (std::size_t j = 0; j < group.responses.size(); ++j) {
    const double adv = group.advantages[j];
    const std::size_t len = group.responses[j].size();
    double seq_term = 0.0;
    for (std::size_t t = 0; t < len; ++t) {
      const double rho =
          std::exp(group.logp_current[j][t] - group.logp_sampling[j][t]);
      if (!std::isfinite(rho)) {
        throw NumericalError("grpo_surrogate: non-finite ratio at token " +
                             std::to_string(t));
      }
      const double unclipped = rho * adv;
      const double clipped =
          clip(rho, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * adv;
      const double kl = kl_penalty_per_token(group.logp_current[j][t],
                                             group.logp_reference[j][t]);
      seq_term += std::min(unclipped, clipped) - cfg.beta * kl;
    }
    total += seq_term / static_cast<double>(len);
  }
  return -total / k;
}

std::vector<std::vector<double>> surrogate_token_coefficients(
    const GroupSample& group, const GrpoConfig& cfg) {
  check_group(group, cfg);
  const double k = static_cast<double>(group.responses.size());
  std::vector<std::vector<double>> coeffs(group.responses.size());
  for (std::size_t j = 0; j < group.responses.size(); ++j) {
    const double adv = group.advantages[j];
    const std::size_t len = group.responses[j].size();
    const double scale = -1.0 / (k * static_cast<double>(len));
    coeffs[j].resize(len);
    for (std::size_t t = 0; t < len; ++t) {
      const double rho =
          std::exp(group.logp_current[j][t] - group.logp_sampling[j][t]);
      const double unclipped = rho * adv;
      const double clipped =
          clip(rho, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * adv;
      // the min picks the unclipped branch unless the clipped value is
      // strictly smaller; d(rho*A)/d(logp) = rho*A, clipped branch is flat
      const double dmin = unclipped <= clipped ? unclipped : 0.0;
      const double d = group.logp_reference[j][t] - group.logp_current[j][t];
      const double dkl = 1.0 - std::exp(d);  // d(kl)/d(logp_current)
      coeffs[j][t] = scale * (dmin - cfg.beta * dkl);
    }
  }
  return coeffs;
}

double clip_fraction(const GroupSample& group, const GrpoConfig& cfg) {
  check_group(group, cfg);
  std::size_t clipped = 0, total = 0;
  for (std::size_t j = 0; j < group.responses.size(); ++j) {
    for (std::size_t t = 0; t < group.responses[j].size(); ++t) {
      const double rho =
          std::exp(group.logp_current[j][t] - group.logp_sampling[j][t]);
      if (rho < 1.0 - cfg.clip_epsilon || rho > 1.0 + cfg.clip_epsilon) ++clipped;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(clipped) / static_cast<double>(total);
}

void refresh_current_logps(GroupSample& group,
                           const model::ModelParameters& params) {
  group.logp_current.clear();
  for (const TokenSequence& resp : group.responses) {
    group.logp_current.push_back(model::log_prob(params, group.prompt, resp));
  }
}

namespace {

std::uint64_t params_checksum(const model::ModelParameters& p) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const model::Tensor& t : p.tensors()) {
    const unsigned char* bytes = reinterpret_cast<const unsigned char*>(t.v.data());
    for (std::size_t i = 0; i < t.v.size() * sizeof(float); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

int response_budget(const model::ModelConfig& policy_cfg,
                    const model::ModelConfig& rm_cfg,
                    const TokenSequence& prompt, int max_new) {
  const int policy_room =
      policy_cfg.max_seq_len - static_cast<int>(prompt.size());
  const int rm_room =
      rm_cfg.max_seq_len - static_cast<int>(prompt.size()) - 1;
  const int budget = std::min({max_new, policy_room, rm_room});
  if (budget < 1) {
    throw ConfigError("train_grpo: prompt leaves no room for a response");
  }
  return budget;
}

GroupSample build_group(const model::ModelParameters& policy,
                        const model::ModelParameters& reference,
                        const model::ModelParameters& reward_model,
                        const TokenSequence& prompt, const RewardWeights& w,
                        const GrpoConfig& cfg, int max_new, Rng& rng) {
  GroupSample g;
  g.prompt = prompt;
  for (int j = 0; j < cfg.group_size; ++j) {
    TokenSequence resp =
        model::sample(policy, prompt, max_new, cfg.temperature, rng);
    g.logp_sampling.push_back(model::log_prob(policy, prompt, resp));
    g.logp_reference.push_back(model::log_prob(reference, prompt, resp));
    const HpcScores s = model::forward_reward(reward_model, prompt, resp);
    g.rewards.push_back(aggregate_reward(s, w));
    g.scores.push_back(s);
    g.responses.push_back(std::move(resp));
  }
  // single update per batch: the sampling policy is the current policy
  g.logp_current = g.logp_sampling;
  g.advantages = group_advantages(g.rewards, cfg.advantage_epsilon);
  return g;
}

double heldout_mean_reward(const model::ModelParameters& policy,
                           const model::ModelParameters& reward_model,
                           const std::vector<TokenSequence>& prompts,
                           const RewardWeights& w, const GrpoConfig& cfg) {
  if (prompts.empty()) return 0.0;
  Rng dummy(0);  // greedy decoding draws nothing
  double total = 0.0;
  for (const TokenSequence& prompt : prompts) {
    const int budget = response_budget(policy.config(), reward_model.config(),
                                       prompt, cfg.max_new_tokens);
    const TokenSequence resp = model::sample(policy, prompt, budget, 0.0, dummy);
    total += aggregate_reward(model::forward_reward(reward_model, prompt, resp), w);
  }
  return total / static_cast<double>(prompts.size());
}

}  // namespace

std::pair<model::ModelParameters, GrpoReport> train_grpo(
    const model::ModelParameters& policy_init,
    const model::ModelParameters& reward_model,
    const std::vector<TokenSequence>& prompts, const RewardWeights& w,
    const GrpoConfig& cfg) {
  cfg.validate();
  w.validate();
  if (policy_init.config().variant != model::Variant::policy) {
    throw ConfigError("train_grpo: policy_init must be a policy model");
  }
  if (reward_model.config().variant != model::Variant::reward) {
    throw ConfigError("train_grpo: reward_model must be a reward model");
  }
  if (static_cast<int>(prompts.size()) <= cfg.heldout_count) {
    throw ArgumentError("train_grpo: no training prompts after holding out");
  }
  const auto t_start = std::chrono::steady_clock::now();

  model::ModelParameters policy = policy_init;
  const model::ModelParameters reference = policy_init;  // frozen KL anchor

  const std::size_t n_train = prompts.size() - static_cast<std::size_t>(cfg.heldout_count);
  const std::vector<TokenSequence> train_prompts(prompts.begin(),
                                                 prompts.begin() + static_cast<std::ptrdiff_t>(n_train));
  const std::vector<TokenSequence> heldout(prompts.begin() + static_cast<std::ptrdiff_t>(n_train),
                                           prompts.end());

  GrpoReport report;
  report.reference_checksum_before = params_checksum(reference);
  report.heldout_reward_before =
      heldout_mean_reward(policy, reward_model, heldout, w, cfg);

  optim::Adam adam(policy, 0.0);
  Rng rng = Rng(cfg.seed).split("grpo-train");
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), std::size_t{0});

  int iter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order, rng);
    for (std::size_t pos = 0; pos < n_train; pos += static_cast<std::size_t>(cfg.prompts_per_batch)) {
      const std::size_t end = std::min(n_train, pos + static_cast<std::size_t>(cfg.prompts_per_batch));
      const double n_groups = static_cast<double>(end - pos);

      model::WeightedLogProbLoss loss;
      IterationStats stats;
      stats.iter = iter;
      std::size_t token_count = 0;
      for (std::size_t gi = pos; gi < end; ++gi) {
        const TokenSequence& prompt = train_prompts[order[gi]];
        const int budget = response_budget(policy.config(), reward_model.config(),
                                           prompt, cfg.max_new_tokens);
        GroupSample group =
            build_group(policy, reference, reward_model, prompt, w, cfg, budget, rng);

        const auto coeffs = surrogate_token_coefficients(group, cfg);
        for (std::size_t j = 0; j < group.responses.size(); ++j) {
          model::WeightedLogProbLoss::Item item;
          item.full = prompt;
          for (std::int32_t id : group.responses[j]) item.full.push_back(id);
          item.predict_from = static_cast<int>(prompt.size());
          item.coeffs = coeffs[j];
          for (double& c : item.coeffs) c /= n_groups;
          loss.items.push_back(std::move(item));
        }

        for (std::size_t j = 0; j < group.responses.size(); ++j) {
          stats.mean_reward += group.rewards[j];
          stats.mean_h += group.scores[j].helpfulness();
          stats.mean_p += group.scores[j].personalization();
          stats.mean_c += group.scores[j].creativity();
          for (std::size_t t = 0; t < group.responses[j].size(); ++t) {
            stats.mean_kl += kl_penalty_per_token(group.logp_current[j][t],
                                                  group.logp_reference[j][t]);
            ++token_count;
          }
        }
        stats.clip_fraction += clip_fraction(group, cfg) / n_groups;
      }
      const double n_resp = n_groups * cfg.group_size;
      stats.mean_reward /= n_resp;
      stats.mean_h /= n_resp;
      stats.mean_p /= n_resp;
      stats.mean_c /= n_resp;
      stats.mean_kl /= static_cast<double>(token_count);

      model::BackwardResult res;
      try {
        res = model::backward(policy, model::LossSpec(std::move(loss)));
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at iteration " +
                             std::to_string(iter));
      }
      adam.step(policy, res.grads, cfg.learning_rate);

      report.iterations.push_back(stats);
      ++iter;
    }
  }

  report.heldout_reward_after =
      heldout_mean_reward(policy, reward_model, heldout, w, cfg);
  report.reference_checksum_after = params_checksum(reference);
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return {std::move(policy), std::move(report)};
}

double mean_kl_on_prompts(const model::ModelParameters& policy,
                          const model::ModelParameters& reference,
                          const std::vector<TokenSequence>& prompts,
                          const GrpoConfig& cfg) {
  Rng rng = Rng(cfg.seed).split("kl-eval");
  double total = 0.0;
  std::size_t tokens = 0;
  for (const TokenSequence& prompt : prompts) {
    const int room = policy.config().max_seq_len - static_cast<int>(prompt.size());
    const int budget = std::min(cfg.max_new_tokens, room);
    if (budget < 1) continue;
    const TokenSequence resp =
        model::sample(policy, prompt, budget, cfg.temperature, rng);
    const std::vector<double> lc = model::log_prob(policy, prompt, resp);
    const std::vector<double> lr = model::log_prob(reference, prompt, resp);
    for (std::size_t t = 0; t < lc.size(); ++t) {
      total += kl_penalty_per_token(lc[t], lr[t]);
      ++tokens;
    }
  }
  return tokens == 0 ? 0.0 : total / static_cast<double>(tokens);
}

void save_report(const GrpoReport& report, const std::filesystem::path& path) {
  json iters = json::array();
  for (const IterationStats& s : report.iterations) {
    iters.push_back(json{{"iter", s.iter},
                         {"mean_reward", s.mean_reward},
                         {"mean_h", s.mean_h},
                         {"mean_p", s.mean_p},
                         {"mean_c", s.mean_c},
                         {"mean_kl", s.mean_kl},
                         {"clip_fraction", s.clip_fraction}});
  }
  json j{{"iterations", iters},
         {"heldout_reward_before", report.heldout_reward_before},
         {"heldout_reward_after", report.heldout_reward_after},
         {"reference_checksum_before", report.reference_checksum_before},
         {"reference_checksum_after", report.reference_checksum_after},
         {"wall_clock_seconds", report.wall_clock_seconds},
         {"checkpoint_path", report.checkpoint_path}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write report: " + path.string());
  out << j.dump(2) << "\n";
}

void save_iteration_csv(const GrpoReport& report,
                        const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write csv: " + path.string());
  out << "iter,mean_reward,mean_h,mean_p,mean_c,mean_kl,clip_frac\n";
  char buf[256];
  for (const IterationStats& s : report.iterations) {
    std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                  s.iter, s.mean_reward, s.mean_h, s.mean_p, s.mean_c, s.mean_kl,
                  s.clip_fraction);
    out << buf;
  }
}

}  // namespace edualign::grpo
