#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "edualign/grpo.hpp"
#include "edualign/model.hpp"
#include "edualign/rmtrain.hpp"
#include "edualign/synth.hpp"

namespace edualign::pipeline {

// Everything the CLI needs, loadable from one JSON file. Field defaults are
// the desk-scale configuration the acceptance suite runs.
struct PipelineConfig {
  std::uint64_t seed = 42;
  std::string out_dir = "out";

  synth::Vocabulary vocab = synth::Vocabulary::standard();
  synth::RubricConfig rubric;

  struct Corpus {
    int n_pairs = 10000;
    std::vector<double> split_fractions{0.8, 0.1, 0.1};  // train/val/test
    std::array<double, 3> quality_mix{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
    synth::CorpusShape shape;
  } corpus;

  struct Annotation {
    std::string source = "oracle";  // oracle | noisy | external
    double noise_rate = 0.5;
    int probe_count = 5;
    double min_reliability = 0.7;
    bool enforce_reliability = false;
    std::string external_file;  // pre-annotated dataset (external source)
    std::string external_url;   // live endpoint (overridden by env)
    std::string external_model;
  } annotation;

  model::ModelConfig policy_model;  // variant forced to policy
  model::ModelConfig reward_model;  // variant forced to reward

  rm::RmTrainConfig rm_train;

  struct Grpo {
    grpo::GrpoConfig cfg;
    grpo::RewardWeights weights;
    int n_train_prompts = 2000;
    std::string reward_source = "oracle";  // which rm checkpoint to train against
  } grpo_stage;

  struct Eval {
    int n_prompts = 100;
    int max_new_tokens = 24;
  } eval;

  void validate() const;

  static PipelineConfig defaults();
  static PipelineConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  // Artifact paths under out_dir.
  std::filesystem::path datasets_dir() const;
  std::filesystem::path checkpoints_dir() const;
  std::filesystem::path reports_dir() const;
  std::filesystem::path dataset_path(const std::string& name) const;
  std::filesystem::path probe_registry_path() const;
  std::filesystem::path prompts_path(const std::string& name) const;
  std::filesystem::path rm_checkpoint_path(const std::string& source) const;
  std::filesystem::path policy_checkpoint_path(const std::string& stage) const;
};

// Deterministic per-stage seed derivation from the global seed.
std::uint64_t stage_seed(std::uint64_t global_seed, std::string_view stage);

// Guards an output directory against concurrent invocations.
class OutDirLock {
 public:
  explicit OutDirLock(const std::filesystem::path& out_dir);
  ~OutDirLock();
  OutDirLock(const OutDirLock&) = delete;
  OutDirLock& operator=(const OutDirLock&) = delete;

 private:
  std::filesystem::path lock_path_;
};

// Pipeline commands; each throws edualign::Error subclasses on failure.
void cmd_synth(const PipelineConfig& cfg);
void cmd_train_rm(const PipelineConfig& cfg);
void cmd_eval_rm(const PipelineConfig& cfg);
void cmd_train_policy(const PipelineConfig& cfg);
void cmd_eval_policy(const PipelineConfig& cfg);
void cmd_report(const PipelineConfig& cfg);

}  // namespace edualign::pipeline
