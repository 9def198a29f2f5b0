#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "edualign/dataset_io.hpp"
#include "edualign/pipeline.hpp"

using namespace edualign;
namespace fs = std::filesystem;

namespace {

std::string binary() {
  const char* bin = std::getenv("EDUALIGN_BIN");
  REQUIRE(bin != nullptr);
  return bin;
}

int run(const std::string& args) {
  const std::string cmd = binary() + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "edualign_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// A configuration small enough for the whole pipeline to run in seconds.
void write_small_config(const fs::path& path, const fs::path& out_dir,
                        std::uint64_t seed = 42) {
  std::ofstream out(path);
  out << R"({
  "seed": )" << seed << R"(,
  "out_dir": ")" << out_dir.string() << R"(",
  "corpus": {"n_pairs": 120, "split_fractions": [0.7, 0.15, 0.15]},
  "annotation": {"probe_count": 3},
  "policy_model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "max_seq_len": 64},
  "reward_model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "max_seq_len": 64},
  "rm_train": {"learning_rate": 0.001, "epochs": 1, "batch_size": 16},
  "grpo": {"group_size": 2, "learning_rate": 0.001, "epochs": 1,
           "prompts_per_batch": 4, "max_new_tokens": 6, "n_train_prompts": 12},
  "eval": {"n_prompts": 4, "max_new_tokens": 6}
})";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("synth writes datasets, probes, and prompt files") {
  const fs::path dir = fresh_dir("synth");
  const fs::path cfg = dir / "config.json";
  write_small_config(cfg, dir / "out");
  REQUIRE(run("synth --config " + cfg.string()) == 0);

  CHECK(fs::exists(dir / "out/datasets/train.jsonl"));
  CHECK(fs::exists(dir / "out/datasets/val.jsonl"));
  CHECK(fs::exists(dir / "out/datasets/test.jsonl"));
  CHECK(fs::exists(dir / "out/datasets/probes.json"));
  CHECK(fs::exists(dir / "out/datasets/prompts_train.jsonl"));
  CHECK(fs::exists(dir / "out/datasets/prompts_eval.jsonl"));

  const Dataset train = load_dataset(dir / "out/datasets/train.jsonl");
  CHECK(train.size() == 84 + 3);  // split share plus embedded probes
  const Dataset test = load_dataset(dir / "out/datasets/test.jsonl");
  CHECK(test.size() == 18);
}

TEST_CASE("synth is byte-identical across reruns with one seed") {
  const fs::path dir = fresh_dir("synth_repeat");
  const fs::path cfg1 = dir / "c1.json";
  const fs::path cfg2 = dir / "c2.json";
  write_small_config(cfg1, dir / "out1", 7);
  write_small_config(cfg2, dir / "out2", 7);
  REQUIRE(run("synth --config " + cfg1.string()) == 0);
  REQUIRE(run("synth --config " + cfg2.string()) == 0);
  for (const char* name :
       {"datasets/train.jsonl", "datasets/val.jsonl", "datasets/test.jsonl",
        "datasets/probes.json", "datasets/prompts_train.jsonl",
        "datasets/prompts_eval.jsonl"}) {
    CHECK(slurp(dir / "out1" / name) == slurp(dir / "out2" / name));
  }
  // a different seed changes the data
  const fs::path cfg3 = dir / "c3.json";
  write_small_config(cfg3, dir / "out3", 8);
  REQUIRE(run("synth --config " + cfg3.string()) == 0);
  CHECK(slurp(dir / "out1/datasets/train.jsonl") !=
        slurp(dir / "out3/datasets/train.jsonl"));
}

TEST_CASE("invalid configuration exits with code 2") {
  const fs::path dir = fresh_dir("bad_config");
  const fs::path cfg = dir / "config.json";
  std::ofstream(cfg) << "{ not json";
  CHECK(run("synth --config " + cfg.string()) == 2);

  std::ofstream(cfg, std::ios::trunc) << R"({"no_such_key": 1})";
  CHECK(run("synth --config " + cfg.string()) == 2);

  std::ofstream(cfg, std::ios::trunc)
      << R"({"grpo": {"weights": [0.9, 0.9, 0.9]}})";
  CHECK(run("synth --config " + cfg.string()) == 2);
}

TEST_CASE("commands demand their inputs with exit code 2") {
  const fs::path dir = fresh_dir("missing_inputs");
  const fs::path cfg = dir / "config.json";
  write_small_config(cfg, dir / "out");
  CHECK(run("train-rm --config " + cfg.string()) == 2);    // no datasets
  CHECK(run("eval-rm --config " + cfg.string()) == 2);     // no checkpoints
  CHECK(run("train-policy --config " + cfg.string()) == 2);
  CHECK(run("eval-policy --config " + cfg.string()) == 2);
}

TEST_CASE("a stale lock file blocks the run") {
  const fs::path dir = fresh_dir("locked");
  const fs::path cfg = dir / "config.json";
  write_small_config(cfg, dir / "out");
  fs::create_directories(dir / "out");
  std::ofstream(dir / "out/.lock") << "held\n";
  CHECK(run("synth --config " + cfg.string()) == 2);
}

TEST_CASE("full pipeline runs end to end at small scale") {
  const fs::path dir = fresh_dir("pipeline");
  const fs::path cfg = dir / "config.json";
  write_small_config(cfg, dir / "out");
  REQUIRE(run("synth --config " + cfg.string()) == 0);
  REQUIRE(run("train-rm --config " + cfg.string()) == 0);
  CHECK(fs::exists(dir / "out/checkpoints/rm_oracle.ckpt"));
  CHECK(fs::exists(dir / "out/reports/rm_train_oracle.json"));
  CHECK(fs::exists(dir / "out/reports/rm_train_oracle.log"));

  // a rerun refuses to overwrite the checkpoint
  CHECK(run("train-rm --config " + cfg.string()) == 2);

  REQUIRE(run("eval-rm --config " + cfg.string()) == 0);
  CHECK(fs::exists(dir / "out/reports/consistency_oracle.json"));
  const std::string table = slurp(dir / "out/reports/consistency_table.txt");
  CHECK(table.find("helpfulness") != std::string::npos);
  CHECK(table.find("personalization") != std::string::npos);
  CHECK(table.find("creativity") != std::string::npos);
  CHECK(table.find("ACC") != std::string::npos);
  CHECK(table.find("Kendall") != std::string::npos);

  REQUIRE(run("train-policy --config " + cfg.string()) == 0);
  CHECK(fs::exists(dir / "out/checkpoints/policy_before.ckpt"));
  CHECK(fs::exists(dir / "out/checkpoints/policy_after.ckpt"));
  CHECK(fs::exists(dir / "out/reports/grpo.json"));
  const std::string csv = slurp(dir / "out/reports/grpo_iters.csv");
  CHECK(csv.rfind("iter,mean_reward,mean_h,mean_p,mean_c,mean_kl,clip_frac", 0) == 0);

  REQUIRE(run("eval-policy --config " + cfg.string()) == 0);
  CHECK(fs::exists(dir / "out/reports/comparison_oracle.json"));
  CHECK(fs::exists(dir / "out/reports/comparison_rm.json"));

  REQUIRE(run("report --config " + cfg.string()) == 0);
  const std::string report = slurp(dir / "out/reports/report.md");
  CHECK(report.find("Reward-model consistency") != std::string::npos);
  CHECK(report.find("not run") == std::string::npos);

  // --beta and --weights overrides are accepted; bad weights are rejected
  CHECK(run("train-policy --config " + cfg.string() + " --weights 2,2,2") == 2);
}

TEST_CASE("report works with partial artifacts") {
  const fs::path dir = fresh_dir("partial_report");
  const fs::path cfg = dir / "config.json";
  write_small_config(cfg, dir / "out");
  REQUIRE(run("synth --config " + cfg.string()) == 0);
  REQUIRE(run("report --config " + cfg.string()) == 0);
  const std::string report = slurp(dir / "out/reports/report.md");
  CHECK(report.find("not run") != std::string::npos);
}

TEST_CASE("corrupt checkpoints exit with code 3") {
  const fs::path dir = fresh_dir("corrupt");
  const fs::path cfg = dir / "config.json";
  write_small_config(cfg, dir / "out");
  REQUIRE(run("synth --config " + cfg.string()) == 0);
  REQUIRE(run("train-rm --config " + cfg.string()) == 0);
  const fs::path ckpt = dir / "out/checkpoints/rm_oracle.ckpt";
  fs::resize_file(ckpt, fs::file_size(ckpt) / 2);
  CHECK(run("eval-rm --config " + cfg.string()) == 3);
}
