#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "edualign/pipeline.hpp"

namespace {

using edualign::pipeline::PipelineConfig;

struct GlobalArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
};

PipelineConfig resolve_config(const GlobalArgs& args) {
  PipelineConfig cfg = args.config_path.empty()
                           ? PipelineConfig::defaults()
                           : PipelineConfig::load(args.config_path);
  if (args.seed) cfg.seed = *args.seed;
  if (args.out_dir) cfg.out_dir = *args.out_dir;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic tutoring-alignment pipeline: corpus synthesis, "
               "multi-dimensional reward-model training, group-relative policy "
               "optimization, and evaluation"};
  app.require_subcommand(1);

  GlobalArgs args;
  app.add_option("--config", args.config_path, "pipeline configuration JSON");
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "override the global seed");
  std::string out_value;
  auto* out_opt = app.add_option("--out", out_value, "override the output directory");

  auto* synth_cmd = app.add_subcommand("synth", "generate corpus, probes, and prompt sets");
  auto* train_rm_cmd = app.add_subcommand("train-rm", "train the reward model");
  auto* eval_rm_cmd = app.add_subcommand("eval-rm", "score reward models against the test set");
  auto* train_policy_cmd = app.add_subcommand("train-policy", "run policy optimization");
  auto* eval_policy_cmd = app.add_subcommand("eval-policy", "compare policies before/after");
  auto* report_cmd = app.add_subcommand("report", "merge artifacts into one report");

  double beta_value = 0.0;
  auto* beta_opt = train_policy_cmd->add_option(
      "--beta", beta_value, "override the KL penalty coefficient");
  std::string weights_value;
  auto* weights_opt = train_policy_cmd->add_option(
      "--weights", weights_value, "override reward weights, e.g. 0.5,0.3,0.2");

  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) args.seed = seed_value;
  if (*out_opt) args.out_dir = out_value;

  try {
    PipelineConfig cfg = resolve_config(args);
    if (*beta_opt) cfg.grpo_stage.cfg.beta = beta_value;
    if (*weights_opt) {
      std::array<double, 3> w{};
      if (std::sscanf(weights_value.c_str(), "%lf,%lf,%lf", &w[0], &w[1], &w[2]) != 3) {
        throw edualign::ConfigError("--weights expects three comma-separated numbers");
      }
      cfg.grpo_stage.weights = edualign::grpo::RewardWeights{w[0], w[1], w[2]};
      cfg.grpo_stage.weights.validate();
    }

    if (synth_cmd->parsed()) edualign::pipeline::cmd_synth(cfg);
    if (train_rm_cmd->parsed()) edualign::pipeline::cmd_train_rm(cfg);
    if (eval_rm_cmd->parsed()) edualign::pipeline::cmd_eval_rm(cfg);
    if (train_policy_cmd->parsed()) edualign::pipeline::cmd_train_policy(cfg);
    if (eval_policy_cmd->parsed()) edualign::pipeline::cmd_eval_policy(cfg);
    if (report_cmd->parsed()) edualign::pipeline::cmd_report(cfg);
  } catch (const edualign::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
