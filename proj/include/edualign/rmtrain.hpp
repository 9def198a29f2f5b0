#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "edualign/model.hpp"
#include "edualign/types.hpp"

namespace edualign::rm {

enum class LrSchedule { constant, cosine };

struct RmTrainConfig {
  double learning_rate = 3e-5;  // reference-scale default; the bundled
                                // pipeline config uses a desk-scale value
  int epochs = 3;
  int batch_size = 32;
  LrSchedule lr_schedule = LrSchedule::cosine;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;

  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;       // mean over steps
  double val_loss = 0.0;         // summed-squared-error objective on val
  double val_mse[3] = {0, 0, 0}; // per-dimension validation MSE
};

struct RmTrainReport {
  std::vector<EpochStats> epochs;
  int best_epoch = 0;
  double wall_clock_seconds = 0.0;
  std::string checkpoint_path;
};

// Mean over the batch of the summed squared error of the three predicted
// scores against the reference annotations.
double rm_loss(const model::ModelParameters& params,
               std::span<const AnnotatedPair> batch);

// base_lr * 0.5 * (1 + cos(pi * step / total_steps))
double cosine_lr(int step, int total_steps, double base_lr);

// Adam over shuffled minibatches with the configured schedule; validates per
// epoch and returns the parameters from the best-validation epoch.
std::pair<model::ModelParameters, RmTrainReport> train_reward_model(
    const model::ModelParameters& init, const Dataset& train, const Dataset& val,
    const RmTrainConfig& cfg);

void save_report(const RmTrainReport& report, const std::filesystem::path& path);

}  // namespace edualign::rm
