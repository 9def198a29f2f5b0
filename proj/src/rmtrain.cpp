#include "edualign/rmtrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "edualign/optim.hpp"
#include "edualign/rng.hpp"

namespace edualign::rm {

using nlohmann::json;

void RmTrainConfig::validate() const {
  if (learning_rate <= 0.0) throw ConfigError("RmTrainConfig: learning_rate must be > 0");
  if (epochs < 1) throw ConfigError("RmTrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("RmTrainConfig: batch_size must be >= 1");
  if (weight_decay < 0.0) throw ConfigError("RmTrainConfig: weight_decay must be >= 0");
}

double rm_loss(const model::ModelParameters& params,
               std::span<const AnnotatedPair> batch) {
  if (params.config().variant != model::Variant::reward) {
    throw ConfigError("rm_loss: requires a reward-variant model");
  }
  if (batch.empty()) throw ArgumentError("rm_loss: empty batch");
  double total = 0.0;
  for (const AnnotatedPair& pair : batch) {
    const HpcScores pred =
        model::forward_reward(params, pair.prompt, pair.response);
    for (int i = 0; i < 3; ++i) {
      const double err = pred.dim(i) - pair.scores.dim(i);
      total += err * err;
    }
  }
  return total / static_cast<double>(batch.size());
}

double cosine_lr(int step, int total_steps, double base_lr) {
  if (total_steps < 1) throw ArgumentError("cosine_lr: total_steps must be >= 1");
  if (step < 0 || step > total_steps) {
    throw ArgumentError("cosine_lr: step " + std::to_string(step) +
                        " outside [0, " + std::to_string(total_steps) + "]");
  }
  return base_lr * 0.5 *
         (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) /
                         static_cast<double>(total_steps)));
}

namespace {

struct ValStats {
  double loss = 0.0;
  double mse[3] = {0, 0, 0};
};

ValStats validate_model(const model::ModelParameters& params, const Dataset& val) {
  ValStats s;
  for (const AnnotatedPair& pair : val.pairs()) {
    const HpcScores pred =
        model::forward_reward(params, pair.prompt, pair.response);
    for (int i = 0; i < 3; ++i) {
      const double err = pred.dim(i) - pair.scores.dim(i);
      s.mse[i] += err * err;
    }
  }
  const double n = static_cast<double>(val.size());
  for (int i = 0; i < 3; ++i) s.mse[i] /= n;
  s.loss = s.mse[0] + s.mse[1] + s.mse[2];
  return s;
}

}  // namespace

std::pair<model::ModelParameters, RmTrainReport> train_reward_model(
    const model::ModelParameters& init, const Dataset& train, const Dataset& val,
    const RmTrainConfig& cfg) {
  cfg.validate();
  if (init.config().variant != model::Variant::reward) {
    throw ConfigError("train_reward_model: requires a reward-variant model");
  }
  if (train.empty() || val.empty()) {
    throw ArgumentError("train_reward_model: datasets must be nonempty");
  }
  const auto t_start = std::chrono::steady_clock::now();

  model::ModelParameters params = init;
  optim::Adam adam(params, cfg.weight_decay);
  Rng rng = Rng(cfg.seed).split("rm-train");

  const int n = static_cast<int>(train.size());
  const int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int total_steps = steps_per_epoch * cfg.epochs;

  RmTrainReport report;
  model::ModelParameters best = params;
  double best_val = std::numeric_limits<double>::infinity();
  int step = 0;

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order, rng);
    double epoch_loss = 0.0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      model::RmSquaredErrorLoss spec;
      const int lo = s * cfg.batch_size;
      const int hi = std::min(n, lo + cfg.batch_size);
      for (int i = lo; i < hi; ++i) {
        const AnnotatedPair& pair = train.pairs()[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        spec.batch.push_back({pair.prompt, pair.response, pair.scores});
      }
      model::BackwardResult res;
      try {
        res = model::backward(params, model::LossSpec(std::move(spec)));
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at training step " +
                             std::to_string(step));
      }
      const double lr = cfg.lr_schedule == LrSchedule::cosine
                            ? cosine_lr(step, total_steps, cfg.learning_rate)
                            : cfg.learning_rate;
      adam.step(params, res.grads, lr);
      epoch_loss += res.loss;
      ++step;
    }

    const ValStats vs = validate_model(params, val);
    EpochStats es;
    es.epoch = epoch;
    es.train_loss = epoch_loss / steps_per_epoch;
    es.val_loss = vs.loss;
    for (int i = 0; i < 3; ++i) es.val_mse[i] = vs.mse[i];
    report.epochs.push_back(es);

    if (vs.loss < best_val) {
      best_val = vs.loss;
      best = params;
      report.best_epoch = epoch;
    }
  }

  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return {std::move(best), std::move(report)};
}

void save_report(const RmTrainReport& report, const std::filesystem::path& path) {
  json epochs = json::array();
  for (const EpochStats& e : report.epochs) {
    epochs.push_back(json{{"epoch", e.epoch},
                          {"train_loss", e.train_loss},
                          {"val_loss", e.val_loss},
                          {"val_mse_h", e.val_mse[0]},
                          {"val_mse_p", e.val_mse[1]},
                          {"val_mse_c", e.val_mse[2]}});
  }
  json j{{"epochs", epochs},
         {"best_epoch", report.best_epoch},
         {"wall_clock_seconds", report.wall_clock_seconds},
         {"checkpoint_path", report.checkpoint_path}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write report: " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace edualign::rm
