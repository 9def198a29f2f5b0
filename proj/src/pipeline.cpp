#include "edualign/pipeline.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "edualign/annotate.hpp"
#include "edualign/dataset_io.hpp"
#include "edualign/eval.hpp"

namespace edualign::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

std::uint64_t stage_seed(std::uint64_t global_seed, std::string_view stage) {
  return mix64(global_seed ^ fnv1a64(stage));
}

// ---------------------------------------------------------------------------
// Config JSON

namespace {

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
  for (const auto& [key, ignored] : j.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("config: unknown key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void vocab_from_json(const json& j, synth::Vocabulary& v) {
  reject_unknown_keys(j,
                      {"vocab_size", "bos_id", "eos_id", "profile_begin",
                       "profile_end", "h_positive", "h_negative"},
                      "vocab");
  maybe(j, "vocab_size", v.vocab_size);
  maybe(j, "bos_id", v.bos_id);
  maybe(j, "eos_id", v.eos_id);
  maybe(j, "profile_begin", v.profile_begin);
  maybe(j, "profile_end", v.profile_end);
  if (j.contains("h_positive")) {
    v.marker_sets["H"].positive = j.at("h_positive").get<std::vector<std::int32_t>>();
  }
  if (j.contains("h_negative")) {
    v.marker_sets["H"].negative = j.at("h_negative").get<std::vector<std::int32_t>>();
  }
}

json vocab_to_json(const synth::Vocabulary& v) {
  const auto it = v.marker_sets.find("H");
  return json{{"vocab_size", v.vocab_size},
              {"bos_id", v.bos_id},
              {"eos_id", v.eos_id},
              {"profile_begin", v.profile_begin},
              {"profile_end", v.profile_end},
              {"h_positive", it != v.marker_sets.end() ? it->second.positive
                                                       : std::vector<std::int32_t>{}},
              {"h_negative", it != v.marker_sets.end() ? it->second.negative
                                                       : std::vector<std::int32_t>{}}};
}

void model_from_json(const json& j, model::ModelConfig& m) {
  reject_unknown_keys(
      j, {"vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len"},
      "model");
  maybe(j, "vocab_size", m.vocab_size);
  maybe(j, "d_model", m.d_model);
  maybe(j, "n_layers", m.n_layers);
  maybe(j, "n_heads", m.n_heads);
  maybe(j, "max_seq_len", m.max_seq_len);
}

json model_to_json(const model::ModelConfig& m) {
  return json{{"vocab_size", m.vocab_size},
              {"d_model", m.d_model},
              {"n_layers", m.n_layers},
              {"n_heads", m.n_heads},
              {"max_seq_len", m.max_seq_len}};
}

}  // namespace

PipelineConfig PipelineConfig::defaults() {
  PipelineConfig cfg;
  // desk-scale training settings; module-level defaults mirror the reference
  // setup and are overridden here so a default run trains a useful model
  cfg.rm_train.learning_rate = 1e-3;
  cfg.rm_train.epochs = 12;
  cfg.rm_train.batch_size = 32;
  cfg.grpo_stage.cfg.learning_rate = 1e-3;
  cfg.grpo_stage.cfg.epochs = 2;
  return cfg;
}

void PipelineConfig::validate() const {
  vocab.validate();
  rubric.validate();
  if (corpus.n_pairs < 1) throw ConfigError("config: corpus.n_pairs must be >= 1");
  if (corpus.split_fractions.size() != 3) {
    throw ConfigError("config: corpus.split_fractions must have 3 entries");
  }
  if (annotation.source != "oracle" && annotation.source != "noisy" &&
      annotation.source != "external") {
    throw ConfigError("config: annotation.source must be oracle|noisy|external");
  }
  if (annotation.noise_rate < 0.0 || annotation.noise_rate > 1.0) {
    throw ConfigError("config: annotation.noise_rate must be in [0,1]");
  }
  if (annotation.probe_count < 1) {
    throw ConfigError("config: annotation.probe_count must be >= 1");
  }
  model::ModelConfig pm = policy_model;
  pm.variant = model::Variant::policy;
  pm.validate();
  model::ModelConfig rm_cfg = reward_model;
  rm_cfg.variant = model::Variant::reward;
  rm_cfg.validate();
  rm_train.validate();
  grpo_stage.cfg.validate();
  grpo_stage.weights.validate();
  if (grpo_stage.n_train_prompts < 1) {
    throw ConfigError("config: grpo.n_train_prompts must be >= 1");
  }
  if (eval.n_prompts < 1) throw ConfigError("config: eval.n_prompts must be >= 1");
  if (eval.max_new_tokens < 1) {
    throw ConfigError("config: eval.max_new_tokens must be >= 1");
  }
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in " + path.string() + ": " + e.what());
  }

  PipelineConfig cfg = defaults();
  try {
    reject_unknown_keys(j,
                        {"seed", "out_dir", "vocab", "rubric", "corpus",
                         "annotation", "policy_model", "reward_model", "rm_train",
                         "grpo", "eval"},
                        "top level");
    maybe(j, "seed", cfg.seed);
    maybe(j, "out_dir", cfg.out_dir);
    if (j.contains("vocab")) vocab_from_json(j.at("vocab"), cfg.vocab);
    if (j.contains("rubric")) {
      const json& r = j.at("rubric");
      reject_unknown_keys(r, {"window", "ttr_low", "ttr_high"}, "rubric");
      maybe(r, "window", cfg.rubric.window);
      maybe(r, "ttr_low", cfg.rubric.ttr_low);
      maybe(r, "ttr_high", cfg.rubric.ttr_high);
    }
    if (j.contains("corpus")) {
      const json& c = j.at("corpus");
      reject_unknown_keys(c,
                          {"n_pairs", "split_fractions", "quality_mix",
                           "profile_len", "body_len", "response_min",
                           "response_max"},
                          "corpus");
      maybe(c, "n_pairs", cfg.corpus.n_pairs);
      maybe(c, "split_fractions", cfg.corpus.split_fractions);
      maybe(c, "quality_mix", cfg.corpus.quality_mix);
      maybe(c, "profile_len", cfg.corpus.shape.profile_len);
      maybe(c, "body_len", cfg.corpus.shape.body_len);
      maybe(c, "response_min", cfg.corpus.shape.response_min);
      maybe(c, "response_max", cfg.corpus.shape.response_max);
    }
    if (j.contains("annotation")) {
      const json& a = j.at("annotation");
      reject_unknown_keys(a,
                          {"source", "noise_rate", "probe_count",
                           "min_reliability", "enforce_reliability",
                           "external_file", "external_url", "external_model"},
                          "annotation");
      maybe(a, "source", cfg.annotation.source);
      maybe(a, "noise_rate", cfg.annotation.noise_rate);
      maybe(a, "probe_count", cfg.annotation.probe_count);
      maybe(a, "min_reliability", cfg.annotation.min_reliability);
      maybe(a, "enforce_reliability", cfg.annotation.enforce_reliability);
      maybe(a, "external_file", cfg.annotation.external_file);
      maybe(a, "external_url", cfg.annotation.external_url);
      maybe(a, "external_model", cfg.annotation.external_model);
    }
    if (j.contains("policy_model")) model_from_json(j.at("policy_model"), cfg.policy_model);
    if (j.contains("reward_model")) model_from_json(j.at("reward_model"), cfg.reward_model);
    if (j.contains("rm_train")) {
      const json& r = j.at("rm_train");
      reject_unknown_keys(
          r, {"learning_rate", "epochs", "batch_size", "lr_schedule", "weight_decay"},
          "rm_train");
      maybe(r, "learning_rate", cfg.rm_train.learning_rate);
      maybe(r, "epochs", cfg.rm_train.epochs);
      maybe(r, "batch_size", cfg.rm_train.batch_size);
      maybe(r, "weight_decay", cfg.rm_train.weight_decay);
      if (r.contains("lr_schedule")) {
        const std::string s = r.at("lr_schedule").get<std::string>();
        if (s == "constant") cfg.rm_train.lr_schedule = rm::LrSchedule::constant;
        else if (s == "cosine") cfg.rm_train.lr_schedule = rm::LrSchedule::cosine;
        else throw ConfigError("config: rm_train.lr_schedule must be constant|cosine");
      }
    }
    if (j.contains("grpo")) {
      const json& g = j.at("grpo");
      reject_unknown_keys(g,
                          {"group_size", "learning_rate", "epochs", "beta",
                           "clip_epsilon", "temperature", "advantage_epsilon",
                           "prompts_per_batch", "max_new_tokens", "weights",
                           "n_train_prompts", "reward_source"},
                          "grpo");
      maybe(g, "group_size", cfg.grpo_stage.cfg.group_size);
      maybe(g, "learning_rate", cfg.grpo_stage.cfg.learning_rate);
      maybe(g, "epochs", cfg.grpo_stage.cfg.epochs);
      maybe(g, "beta", cfg.grpo_stage.cfg.beta);
      maybe(g, "clip_epsilon", cfg.grpo_stage.cfg.clip_epsilon);
      maybe(g, "temperature", cfg.grpo_stage.cfg.temperature);
      maybe(g, "advantage_epsilon", cfg.grpo_stage.cfg.advantage_epsilon);
      maybe(g, "prompts_per_batch", cfg.grpo_stage.cfg.prompts_per_batch);
      maybe(g, "max_new_tokens", cfg.grpo_stage.cfg.max_new_tokens);
      maybe(g, "n_train_prompts", cfg.grpo_stage.n_train_prompts);
      maybe(g, "reward_source", cfg.grpo_stage.reward_source);
      if (g.contains("weights")) {
        const auto w = g.at("weights").get<std::vector<double>>();
        if (w.size() != 3) throw ConfigError("config: grpo.weights needs 3 entries");
        cfg.grpo_stage.weights = grpo::RewardWeights{w[0], w[1], w[2]};
      }
    }
    if (j.contains("eval")) {
      const json& e = j.at("eval");
      reject_unknown_keys(e, {"n_prompts", "max_new_tokens"}, "eval");
      maybe(e, "n_prompts", cfg.eval.n_prompts);
      maybe(e, "max_new_tokens", cfg.eval.max_new_tokens);
    }
  } catch (const json::exception& e) {
    throw ConfigError("config error in " + path.string() + ": " + e.what());
  }
  cfg.validate();
  return cfg;
}

void PipelineConfig::save(const fs::path& path) const {
  json j{
      {"seed", seed},
      {"out_dir", out_dir},
      {"vocab", vocab_to_json(vocab)},
      {"rubric", json{{"window", rubric.window},
                      {"ttr_low", rubric.ttr_low},
                      {"ttr_high", rubric.ttr_high}}},
      {"corpus", json{{"n_pairs", corpus.n_pairs},
                      {"split_fractions", corpus.split_fractions},
                      {"quality_mix", corpus.quality_mix},
                      {"profile_len", corpus.shape.profile_len},
                      {"body_len", corpus.shape.body_len},
                      {"response_min", corpus.shape.response_min},
                      {"response_max", corpus.shape.response_max}}},
      {"annotation",
       json{{"source", annotation.source},
            {"noise_rate", annotation.noise_rate},
            {"probe_count", annotation.probe_count},
            {"min_reliability", annotation.min_reliability},
            {"enforce_reliability", annotation.enforce_reliability},
            {"external_file", annotation.external_file},
            {"external_url", annotation.external_url},
            {"external_model", annotation.external_model}}},
      {"policy_model", model_to_json(policy_model)},
      {"reward_model", model_to_json(reward_model)},
      {"rm_train",
       json{{"learning_rate", rm_train.learning_rate},
            {"epochs", rm_train.epochs},
            {"batch_size", rm_train.batch_size},
            {"lr_schedule",
             rm_train.lr_schedule == rm::LrSchedule::cosine ? "cosine" : "constant"},
            {"weight_decay", rm_train.weight_decay}}},
      {"grpo", json{{"group_size", grpo_stage.cfg.group_size},
                    {"learning_rate", grpo_stage.cfg.learning_rate},
                    {"epochs", grpo_stage.cfg.epochs},
                    {"beta", grpo_stage.cfg.beta},
                    {"clip_epsilon", grpo_stage.cfg.clip_epsilon},
                    {"temperature", grpo_stage.cfg.temperature},
                    {"advantage_epsilon", grpo_stage.cfg.advantage_epsilon},
                    {"prompts_per_batch", grpo_stage.cfg.prompts_per_batch},
                    {"max_new_tokens", grpo_stage.cfg.max_new_tokens},
                    {"weights", std::vector<double>{grpo_stage.weights.w_h,
                                                    grpo_stage.weights.w_p,
                                                    grpo_stage.weights.w_c}},
                    {"n_train_prompts", grpo_stage.n_train_prompts},
                    {"reward_source", grpo_stage.reward_source}}},
      {"eval", json{{"n_prompts", eval.n_prompts},
                    {"max_new_tokens", eval.max_new_tokens}}}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write config: " + path.string());
  out << j.dump(2) << "\n";
}

fs::path PipelineConfig::datasets_dir() const { return fs::path(out_dir) / "datasets"; }
fs::path PipelineConfig::checkpoints_dir() const { return fs::path(out_dir) / "checkpoints"; }
fs::path PipelineConfig::reports_dir() const { return fs::path(out_dir) / "reports"; }
fs::path PipelineConfig::dataset_path(const std::string& name) const {
  return datasets_dir() / (name + ".jsonl");
}
fs::path PipelineConfig::probe_registry_path() const {
  return datasets_dir() / "probes.json";
}
fs::path PipelineConfig::prompts_path(const std::string& name) const {
  return datasets_dir() / ("prompts_" + name + ".jsonl");
}
fs::path PipelineConfig::rm_checkpoint_path(const std::string& source) const {
  return checkpoints_dir() / ("rm_" + source + ".ckpt");
}
fs::path PipelineConfig::policy_checkpoint_path(const std::string& stage) const {
  return checkpoints_dir() / ("policy_" + stage + ".ckpt");
}

// ---------------------------------------------------------------------------
// Lock file

OutDirLock::OutDirLock(const fs::path& out_dir) {
  fs::create_directories(out_dir);
  lock_path_ = out_dir / ".lock";
  std::error_code ec;
  if (fs::exists(lock_path_, ec)) {
    throw ConfigError("output directory is locked by another invocation: " +
                      lock_path_.string());
  }
  std::ofstream lock(lock_path_, std::ios::trunc);
  if (!lock) throw IoError("cannot create lock file: " + lock_path_.string());
  lock << "locked\n";
}

OutDirLock::~OutDirLock() {
  std::error_code ec;
  fs::remove(lock_path_, ec);
}

// ---------------------------------------------------------------------------
// Commands

namespace {

model::ModelConfig policy_config(const PipelineConfig& cfg) {
  model::ModelConfig m = cfg.policy_model;
  m.variant = model::Variant::policy;
  m.bos_id = cfg.vocab.bos_id;
  m.eos_id = cfg.vocab.eos_id;
  m.vocab_size = cfg.vocab.vocab_size;
  return m;
}

model::ModelConfig reward_config(const PipelineConfig& cfg) {
  model::ModelConfig m = cfg.reward_model;
  m.variant = model::Variant::reward;
  m.bos_id = cfg.vocab.bos_id;
  m.eos_id = cfg.vocab.eos_id;
  m.vocab_size = cfg.vocab.vocab_size;
  return m;
}

void require_file(const fs::path& p, const std::string& hint) {
  if (!fs::exists(p)) {
    throw ConfigError("missing " + p.string() + "; " + hint);
  }
}

// Re-label every pair with the given annotator (used for live external
// annotation); probe flags and token streams are untouched.
Dataset annotate_dataset(const Dataset& d, const annotate::Annotator& annotator) {
  std::vector<AnnotatedPair> pairs = d.pairs();
  for (AnnotatedPair& p : pairs) {
    p.scores = annotate::annotate_pair(annotator, p.prompt, p.response);
    p.annotator_id = annotator.id;
  }
  return Dataset(d.vocab_size(), std::move(pairs), d.metadata());
}

}  // namespace

void cmd_synth(const PipelineConfig& cfg) {
  cfg.validate();
  OutDirLock lock(cfg.out_dir);
  fs::create_directories(cfg.datasets_dir());

  Rng rng = Rng(stage_seed(cfg.seed, "synth"));
  const Dataset corpus = synth::generate_corpus(
      cfg.vocab, cfg.rubric, cfg.corpus.n_pairs, rng, cfg.corpus.quality_mix,
      cfg.corpus.shape);
  std::vector<Dataset> parts = split(corpus, cfg.corpus.split_fractions, rng);

  auto [train, registry] = annotate::embed_probes(
      parts[0], cfg.annotation.probe_count, cfg.vocab, cfg.rubric, rng);
  save_dataset(train, cfg.dataset_path("train"));
  save_dataset(parts[1], cfg.dataset_path("val"));
  save_dataset(parts[2], cfg.dataset_path("test"));
  registry.save(cfg.probe_registry_path());

  PromptSet rl_prompts{cfg.vocab.vocab_size,
                       synth::generate_prompts(cfg.vocab, rng,
                                               cfg.grpo_stage.n_train_prompts,
                                               cfg.corpus.shape)};
  save_prompts(rl_prompts, cfg.prompts_path("train"));
  PromptSet eval_prompts{cfg.vocab.vocab_size,
                         synth::generate_prompts(cfg.vocab, rng, cfg.eval.n_prompts,
                                                 cfg.corpus.shape)};
  save_prompts(eval_prompts, cfg.prompts_path("eval"));

  std::cout << "synth: train=" << train.size() << " (+" << cfg.annotation.probe_count
            << " probes) val=" << parts[1].size() << " test=" << parts[2].size()
            << " rl_prompts=" << rl_prompts.prompts.size()
            << " eval_prompts=" << eval_prompts.prompts.size() << "\n";
}

void cmd_train_rm(const PipelineConfig& cfg) {
  cfg.validate();
  OutDirLock lock(cfg.out_dir);
  require_file(cfg.dataset_path("train"), "run the synth command first");
  require_file(cfg.dataset_path("val"), "run the synth command first");
  const std::string source = cfg.annotation.source;
  const fs::path ckpt_path = cfg.rm_checkpoint_path(source);
  if (fs::exists(ckpt_path)) {
    throw ConfigError("checkpoint already exists (resume is not supported): " +
                      ckpt_path.string());
  }

  Dataset train = load_dataset(cfg.dataset_path("train"));
  Dataset val = load_dataset(cfg.dataset_path("val"));
  const annotate::ProbeRegistry registry =
      annotate::ProbeRegistry::load(cfg.probe_registry_path());

  if (source == "noisy") {
    Rng noise_rng(stage_seed(cfg.seed, "annotation-noise"));
    train = synth::corrupt_annotations(train, cfg.annotation.noise_rate, noise_rng);
    val = synth::corrupt_annotations(val, cfg.annotation.noise_rate, noise_rng);
  } else if (source == "external") {
    const char* env_url = std::getenv("EDUALIGN_ANNOTATOR_URL");
    const std::string url = env_url ? env_url : cfg.annotation.external_url;
    if (!cfg.annotation.external_file.empty()) {
      train = load_dataset(cfg.annotation.external_file);
    } else if (!url.empty()) {
      annotate::ExternalEndpoint ep;
      ep.url = url;
      ep.model = cfg.annotation.external_model;
      if (const char* token = std::getenv("EDUALIGN_ANNOTATOR_TOKEN")) {
        ep.bearer_token = token;
      }
      const annotate::Annotator ext =
          annotate::Annotator::external("external", std::move(ep));
      train = annotate_dataset(train, ext);
    } else {
      throw ConfigError(
          "annotation.source=external needs external_file or an endpoint "
          "(annotation.external_url or EDUALIGN_ANNOTATOR_URL)");
    }
  }

  // Assess every annotator appearing in the training set on the probe pairs,
  // then drop probes (and, when enforcement is on, unreliable annotators).
  std::map<std::string, annotate::Annotator> annotators;
  std::map<std::string, std::map<std::string, HpcScores>> probe_responses;
  for (const AnnotatedPair& p : train.pairs()) {
    if (!annotators.count(p.annotator_id)) {
      annotators.emplace(p.annotator_id, annotate::Annotator::oracle(
                                             p.annotator_id, cfg.vocab, cfg.rubric));
    }
    if (p.is_probe) {
      probe_responses[p.annotator_id][annotate::probe_key(p.prompt, p.response)] =
          p.scores;
    }
  }
  for (auto& [id, annotator] : annotators) {
    const auto it = probe_responses.find(id);
    if (it != probe_responses.end() && registry.size() > 0) {
      annotate::assess_annotator(annotator, registry, it->second);
      std::cout << "annotator " << id << " reliability "
                << *annotator.reliability << "\n";
    } else {
      annotator.reliability = 1.0;  // no probes annotated by this source
    }
  }
  const double min_rel =
      cfg.annotation.enforce_reliability ? cfg.annotation.min_reliability : 0.0;
  train = annotate::filter_annotations(train, annotators, min_rel);
  if (train.empty()) {
    throw ConfigError("train-rm: no training pairs left after reliability filter");
  }

  rm::RmTrainConfig train_cfg = cfg.rm_train;
  train_cfg.seed = stage_seed(cfg.seed, "rm-train-" + source);
  Rng init_rng(stage_seed(cfg.seed, "rm-init"));
  const model::ModelParameters init =
      model::ModelParameters::init(reward_config(cfg), init_rng);

  auto [params, report] = rm::train_reward_model(init, train, val, train_cfg);

  fs::create_directories(cfg.checkpoints_dir());
  fs::create_directories(cfg.reports_dir());
  model::save_checkpoint(params, ckpt_path);
  report.checkpoint_path = ckpt_path.string();
  rm::save_report(report, cfg.reports_dir() / ("rm_train_" + source + ".json"));

  std::ofstream log(cfg.reports_dir() / ("rm_train_" + source + ".log"));
  for (const rm::EpochStats& e : report.epochs) {
    log << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_loss "
        << e.val_loss << " val_mse " << e.val_mse[0] << " " << e.val_mse[1]
        << " " << e.val_mse[2] << "\n";
  }
  std::cout << "train-rm[" << source << "]: val_loss "
            << report.epochs.front().val_loss << " -> "
            << report.epochs[static_cast<std::size_t>(report.best_epoch)].val_loss
            << " (best epoch " << report.best_epoch << ")\n";
}

void cmd_eval_rm(const PipelineConfig& cfg) {
  cfg.validate();
  OutDirLock lock(cfg.out_dir);
  require_file(cfg.dataset_path("test"), "run the synth command first");
  const Dataset test = load_dataset(cfg.dataset_path("test"));

  std::vector<eval::ConsistencyReport> reports;
  if (!fs::exists(cfg.checkpoints_dir())) {
    throw ConfigError("no checkpoints directory; run train-rm first");
  }
  std::vector<fs::path> ckpts;
  for (const auto& entry : fs::directory_iterator(cfg.checkpoints_dir())) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("rm_", 0) == 0 && entry.path().extension() == ".ckpt") {
      ckpts.push_back(entry.path());
    }
  }
  std::sort(ckpts.begin(), ckpts.end());
  if (ckpts.empty()) {
    throw ConfigError("no reward-model checkpoints found; run train-rm first");
  }

  fs::create_directories(cfg.reports_dir());
  for (const fs::path& path : ckpts) {
    const std::string stem = path.stem().string();          // rm_<source>
    const std::string source = stem.substr(3);
    const model::ModelParameters rm_params =
        model::load_checkpoint(path, model::Variant::reward);
    const eval::ConsistencyReport report =
        eval::consistency_report(rm_params, test, source);
    eval::save_consistency(report,
                           cfg.reports_dir() / ("consistency_" + source + ".json"));
    reports.push_back(report);
  }
  const std::string table = eval::consistency_table(reports);
  std::ofstream table_out(cfg.reports_dir() / "consistency_table.txt");
  table_out << table;
  std::cout << table;
}

void cmd_train_policy(const PipelineConfig& cfg) {
  cfg.validate();
  OutDirLock lock(cfg.out_dir);
  const fs::path rm_path = cfg.rm_checkpoint_path(cfg.grpo_stage.reward_source);
  require_file(rm_path, "run train-rm first");
  require_file(cfg.prompts_path("train"), "run the synth command first");
  require_file(cfg.prompts_path("eval"), "run the synth command first");

  const model::ModelParameters rm_params =
      model::load_checkpoint(rm_path, model::Variant::reward);
  const PromptSet train_prompts = load_prompts(cfg.prompts_path("train"));
  const PromptSet eval_prompts = load_prompts(cfg.prompts_path("eval"));

  std::vector<TokenSequence> prompts = train_prompts.prompts;
  prompts.insert(prompts.end(), eval_prompts.prompts.begin(),
                 eval_prompts.prompts.end());

  grpo::GrpoConfig grpo_cfg = cfg.grpo_stage.cfg;
  grpo_cfg.seed = stage_seed(cfg.seed, "grpo");
  grpo_cfg.heldout_count = static_cast<int>(eval_prompts.prompts.size());

  Rng init_rng(stage_seed(cfg.seed, "policy-init"));
  const model::ModelParameters policy_init =
      model::ModelParameters::init(policy_config(cfg), init_rng);

  fs::create_directories(cfg.checkpoints_dir());
  fs::create_directories(cfg.reports_dir());
  model::save_checkpoint(policy_init, cfg.policy_checkpoint_path("before"));

  auto [policy, report] = grpo::train_grpo(policy_init, rm_params, prompts,
                                           cfg.grpo_stage.weights, grpo_cfg);
  const fs::path after_path = cfg.policy_checkpoint_path("after");
  model::save_checkpoint(policy, after_path);
  report.checkpoint_path = after_path.string();
  grpo::save_report(report, cfg.reports_dir() / "grpo.json");
  grpo::save_iteration_csv(report, cfg.reports_dir() / "grpo_iters.csv");

  std::cout << "train-policy: heldout reward " << report.heldout_reward_before
            << " -> " << report.heldout_reward_after << " over "
            << report.iterations.size() << " iterations\n";
}

void cmd_eval_policy(const PipelineConfig& cfg) {
  cfg.validate();
  OutDirLock lock(cfg.out_dir);
  require_file(cfg.policy_checkpoint_path("before"), "run train-policy first");
  require_file(cfg.policy_checkpoint_path("after"), "run train-policy first");
  require_file(cfg.prompts_path("eval"), "run the synth command first");
  const fs::path rm_path = cfg.rm_checkpoint_path(cfg.grpo_stage.reward_source);
  require_file(rm_path, "run train-rm first");

  const model::ModelParameters before =
      model::load_checkpoint(cfg.policy_checkpoint_path("before"),
                             model::Variant::policy);
  const model::ModelParameters after = model::load_checkpoint(
      cfg.policy_checkpoint_path("after"), model::Variant::policy);
  const model::ModelParameters rm_params =
      model::load_checkpoint(rm_path, model::Variant::reward);
  const PromptSet eval_prompts = load_prompts(cfg.prompts_path("eval"));

  Rng rng(stage_seed(cfg.seed, "eval-policy"));
  const eval::ScorerFn oracle = [&cfg](const TokenSequence& prompt,
                                       const TokenSequence& response) {
    return synth::rubric_scores(cfg.vocab, cfg.rubric, prompt, response);
  };

  fs::create_directories(cfg.reports_dir());
  std::vector<eval::ComparisonReport> reports;
  reports.push_back(eval::compare_policies(before, after, eval_prompts.prompts,
                                           oracle, "oracle", rng,
                                           cfg.grpo_stage.weights,
                                           cfg.eval.max_new_tokens));
  eval::save_comparison(reports.back(), cfg.reports_dir() / "comparison_oracle.json");
  reports.push_back(eval::compare_policies(
      before, after, eval_prompts.prompts, eval::reward_model_scorer(rm_params),
      "reward-model", rng, cfg.grpo_stage.weights, cfg.eval.max_new_tokens));
  eval::save_comparison(reports.back(), cfg.reports_dir() / "comparison_rm.json");

  const std::string table = eval::comparison_table(reports);
  std::ofstream table_out(cfg.reports_dir() / "comparison_table.txt");
  table_out << table;
  std::cout << table;
}

void cmd_report(const PipelineConfig& cfg) {
  cfg.validate();
  OutDirLock lock(cfg.out_dir);
  fs::create_directories(cfg.reports_dir());
  std::ostringstream md;
  md << "# Pipeline report\n\n";

  md << "## Reward-model consistency\n\n";
  std::vector<eval::ConsistencyReport> consistency;
  for (const std::string source : {"oracle", "noisy", "external"}) {
    const fs::path p = cfg.reports_dir() / ("consistency_" + source + ".json");
    if (fs::exists(p)) consistency.push_back(eval::load_consistency(p));
  }
  if (consistency.empty()) {
    md << "not run\n\n";
  } else {
    md << "```\n" << eval::consistency_table(consistency) << "```\n\n";
  }

  md << "## Policy training\n\n";
  const fs::path grpo_path = cfg.reports_dir() / "grpo.json";
  if (fs::exists(grpo_path)) {
    std::ifstream in(grpo_path);
    json j;
    in >> j;
    md << "Held-out mean reward (reward-model scorer): "
       << j.at("heldout_reward_before").get<double>() << " before, "
       << j.at("heldout_reward_after").get<double>() << " after.\n\n";
  } else {
    md << "not run\n\n";
  }

  md << "## Policy comparison\n\n";
  std::vector<eval::ComparisonReport> comparisons;
  for (const std::string name : {"comparison_oracle.json", "comparison_rm.json"}) {
    const fs::path p = cfg.reports_dir() / name;
    if (fs::exists(p)) comparisons.push_back(eval::load_comparison(p));
  }
  if (comparisons.empty()) {
    md << "not run\n";
  } else {
    md << "```\n" << eval::comparison_table(comparisons) << "```\n";
  }

  std::ofstream out(cfg.reports_dir() / "report.md");
  out << md.str();
  std::cout << md.str();
}

}  // namespace edualign::pipeline
