#include "edualign/annotate.hpp"

#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

namespace edualign::annotate {

using nlohmann::json;

ScoringPrompt render_prompt(const std::string& template_text,
                            const std::string& q, const std::string& a) {
  auto count_of = [&](const std::string& needle) {
    std::size_t count = 0, pos = 0;
    while ((pos = template_text.find(needle, pos)) != std::string::npos) {
      ++count;
      pos += needle.size();
    }
    return count;
  };
  if (count_of("{Q}") != 1 || count_of("{A}") != 1) {
    throw AnnotationError(
        "render_prompt: template must contain exactly one {Q} and one {A}");
  }

  const std::size_t q_pos = template_text.find("{Q}");
  const std::size_t a_pos = template_text.find("{A}");
  // substitute both placeholders against the original template only;
  // substituted text is never re-expanded
  std::string rendered;
  if (q_pos < a_pos) {
    rendered = template_text.substr(0, q_pos) + q +
               template_text.substr(q_pos + 3, a_pos - q_pos - 3) + a +
               template_text.substr(a_pos + 3);
  } else {
    rendered = template_text.substr(0, a_pos) + a +
               template_text.substr(a_pos + 3, q_pos - a_pos - 3) + q +
               template_text.substr(q_pos + 3);
  }
  return ScoringPrompt{template_text, std::move(rendered), 0, 2};
}

std::string default_scoring_template() {
  return "You are grading a tutoring exchange. Rate the answer on three "
         "criteria, each as an integer from 0 (worst) to 2 (best): "
         "helpfulness, personalization to the student described in the "
         "question, and creativity.\n"
         "Question tokens: {Q}\n"
         "Answer tokens: {A}\n"
         "Reply with exactly: H:<int> P:<int> C:<int>";
}

HpcScores parse_score_reply(const std::string& body) {
  static const std::regex grammar(
      R"(H:\s*(-?\d+)\s+P:\s*(-?\d+)\s+C:\s*(-?\d+))");
  std::smatch m;
  if (!std::regex_search(body, m, grammar)) {
    throw AnnotationError("annotation reply does not match the score grammar "
                          "'H:<int> P:<int> C:<int>'; raw reply: " + body);
  }
  const long h = std::stol(m[1].str());
  const long p = std::stol(m[2].str());
  const long c = std::stol(m[3].str());
  for (long v : {h, p, c}) {
    if (v < 0 || v > 2) {
      throw AnnotationError("annotation score " + std::to_string(v) +
                            " outside {0,1,2}; raw reply: " + body);
    }
  }
  return HpcScores(static_cast<double>(h), static_cast<double>(p),
                   static_cast<double>(c));
}

ExternalClient::ExternalClient(ExternalEndpoint endpoint)
    : endpoint_(std::move(endpoint)) {
  if (endpoint_.url.rfind("http://", 0) != 0) {
    throw ConfigError("external annotator url must start with http://: " +
                      endpoint_.url);
  }
}

HpcScores ExternalClient::annotate(const std::string& rendered_prompt) const {
  const std::string rest = endpoint_.url.substr(7);
  const std::size_t slash = rest.find('/');
  const std::string host_port = rest.substr(0, slash);
  const std::string path =
      slash == std::string::npos ? std::string("/") : rest.substr(slash);

  httplib::Client client(("http://" + host_port).c_str());
  client.set_connection_timeout(0, endpoint_.timeout_ms * 1000);
  client.set_read_timeout(endpoint_.timeout_ms / 1000,
                          (endpoint_.timeout_ms % 1000) * 1000);
  httplib::Headers headers;
  if (!endpoint_.bearer_token.empty()) {
    headers.emplace("Authorization", "Bearer " + endpoint_.bearer_token);
  }
  const std::string body =
      json{{"model", endpoint_.model}, {"prompt_text", rendered_prompt}}.dump();

  std::string last_error;
  for (int attempt = 0; attempt <= endpoint_.max_retries; ++attempt) {
    auto res = client.Post(path.c_str(), headers, body, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;  // transport failure; retry
    }
    if (res->status < 200 || res->status >= 300) {
      throw AnnotationError("external annotator returned status " +
                            std::to_string(res->status) + ": " + res->body);
    }
    return parse_score_reply(res->body);
  }
  throw RetryableAnnotationError("external annotator unreachable after " +
                                 std::to_string(endpoint_.max_retries + 1) +
                                 " attempts: " + last_error);
}

Annotator Annotator::oracle(std::string id, const synth::Vocabulary& vocab,
                            const synth::RubricConfig& rubric) {
  Annotator a;
  a.id = std::move(id);
  a.kind = AnnotatorKind::oracle;
  a.vocab = vocab;
  a.rubric = rubric;
  return a;
}

Annotator Annotator::noisy(std::string id, const synth::Vocabulary& vocab,
                           const synth::RubricConfig& rubric, double noise_rate,
                           std::uint64_t seed) {
  if (noise_rate < 0.0 || noise_rate > 1.0) {
    throw ArgumentError("Annotator::noisy: noise_rate must be in [0,1]");
  }
  Annotator a;
  a.id = std::move(id);
  a.kind = AnnotatorKind::noisy;
  a.vocab = vocab;
  a.rubric = rubric;
  a.noise_rate = noise_rate;
  a.seed = seed;
  return a;
}

Annotator Annotator::external(std::string id, ExternalEndpoint endpoint,
                              std::string template_text) {
  Annotator a;
  a.id = std::move(id);
  a.kind = AnnotatorKind::external;
  a.client = std::make_shared<ExternalClient>(std::move(endpoint));
  a.template_text = std::move(template_text);
  return a;
}

namespace {

std::uint64_t pair_hash(const TokenSequence& prompt,
                        const TokenSequence& response) {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](std::int32_t v) {
    for (int b = 0; b < 4; ++b) {
      h ^= static_cast<unsigned char>(v >> (8 * b));
      h *= 1099511628211ULL;
    }
  };
  for (std::int32_t id : prompt) feed(id);
  feed(-1);  // separator so ([1,2],[3]) != ([1],[2,3])
  for (std::int32_t id : response) feed(id);
  return h;
}

std::string token_text(const TokenSequence& seq) {
  std::ostringstream out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out << ' ';
    out << seq[i];
  }
  return out.str();
}

}  // namespace

HpcScores annotate_pair(const Annotator& annotator, const TokenSequence& prompt,
                        const TokenSequence& response) {
  switch (annotator.kind) {
    case AnnotatorKind::oracle:
      return synth::rubric_scores(annotator.vocab, annotator.rubric, prompt,
                                  response);
    case AnnotatorKind::noisy: {
      const HpcScores clean = synth::rubric_scores(annotator.vocab,
                                                   annotator.rubric, prompt,
                                                   response);
      Rng rng(mix64(annotator.seed ^ pair_hash(prompt, response)));
      double v[3] = {clean.helpfulness(), clean.personalization(),
                     clean.creativity()};
      for (double& dim : v) {
        if (rng.next_double() < annotator.noise_rate) {
          dim = static_cast<double>(rng.next_below(3));
        }
      }
      return HpcScores(v[0], v[1], v[2]);
    }
    case AnnotatorKind::external: {
      if (!annotator.client) {
        throw ConfigError("annotate_pair: external annotator has no client");
      }
      const ScoringPrompt sp = render_prompt(
          annotator.template_text, token_text(prompt), token_text(response));
      return annotator.client->annotate(sp.rendered);
    }
  }
  throw ConfigError("annotate_pair: unknown annotator kind");
}

std::string probe_key(const TokenSequence& prompt, const TokenSequence& response) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(pair_hash(prompt, response)));
  return buf;
}

void ProbeRegistry::add(const std::string& key, const HpcScores& gold) {
  if (!gold.is_integral()) {
    throw ArgumentError("ProbeRegistry: gold scores must be integers in {0,1,2}");
  }
  gold_[key] = gold;
}

bool ProbeRegistry::contains(const std::string& key) const {
  return gold_.count(key) > 0;
}

const HpcScores& ProbeRegistry::gold(const std::string& key) const {
  const auto it = gold_.find(key);
  if (it == gold_.end()) {
    throw ArgumentError("ProbeRegistry: unknown probe key " + key);
  }
  return it->second;
}

void ProbeRegistry::save(const std::filesystem::path& path) const {
  json j = json::object();
  for (const auto& [key, gold] : gold_) {
    j[key] = json{{"h", gold.helpfulness()},
                  {"p", gold.personalization()},
                  {"c", gold.creativity()}};
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write probe registry: " + path.string());
  out << j.dump(2) << "\n";
}

ProbeRegistry ProbeRegistry::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open probe registry: " + path.string());
  json j;
  ProbeRegistry reg;
  try {
    in >> j;
    for (const auto& [key, val] : j.items()) {
      reg.add(key, HpcScores(val.at("h").get<double>(), val.at("p").get<double>(),
                             val.at("c").get<double>()));
    }
  } catch (const json::exception& e) {
    throw CorruptionError("bad probe registry " + path.string() + ": " + e.what());
  }
  return reg;
}

std::pair<Dataset, ProbeRegistry> embed_probes(const Dataset& d, int count,
                                               const synth::Vocabulary& vocab,
                                               const synth::RubricConfig& rubric,
                                               Rng& rng) {
  if (count < 1) throw ArgumentError("embed_probes: count must be >= 1");
  const Dataset probes = synth::generate_corpus(
      vocab, rubric, count, rng, {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0});
  std::vector<AnnotatedPair> pairs = d.pairs();
  ProbeRegistry registry;
  for (AnnotatedPair probe : probes.pairs()) {
    probe.is_probe = true;
    registry.add(probe_key(probe.prompt, probe.response), probe.scores);
    pairs.push_back(std::move(probe));
  }
  return {Dataset(d.vocab_size(), std::move(pairs), d.metadata()),
          std::move(registry)};
}

double assess_annotator(Annotator& annotator, const ProbeRegistry& probes,
                        const std::map<std::string, HpcScores>& responses) {
  if (probes.size() == 0) {
    throw ArgumentError("assess_annotator: empty probe set");
  }
  std::size_t matches = 0, total = 0;
  for (const auto& [key, gold] : probes.entries()) {
    const auto it = responses.find(key);
    if (it == responses.end()) {
      throw ArgumentError("assess_annotator: missing response for probe " + key);
    }
    for (int dim = 0; dim < 3; ++dim) {
      if (it->second.dim(dim) == gold.dim(dim)) ++matches;
      ++total;
    }
  }
  const double reliability =
      static_cast<double>(matches) / static_cast<double>(total);
  annotator.reliability = reliability;
  return reliability;
}

Dataset filter_annotations(const Dataset& d,
                           const std::map<std::string, Annotator>& annotators,
                           double min_reliability) {
  std::vector<AnnotatedPair> kept;
  for (const AnnotatedPair& pair : d.pairs()) {
    if (pair.is_probe) continue;  // instrumentation, not training data
    const auto it = annotators.find(pair.annotator_id);
    if (it == annotators.end()) {
      throw ArgumentError("filter_annotations: unknown annotator '" +
                          pair.annotator_id + "'");
    }
    if (!it->second.reliability.has_value()) {
      throw ArgumentError("filter_annotations: annotator '" + pair.annotator_id +
                          "' has not been assessed");
    }
    if (*it->second.reliability >= min_reliability) kept.push_back(pair);
  }
  return Dataset(d.vocab_size(), std::move(kept), d.metadata());
}

}  // namespace edualign::annotate
