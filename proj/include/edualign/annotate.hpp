#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "edualign/rng.hpp"
#include "edualign/synth.hpp"
#include "edualign/types.hpp"

namespace edualign::annotate {

// A scoring request rendered from the template. The scale is fixed at 0..2.
struct ScoringPrompt {
  std::string template_text;
  std::string rendered;
  int scale_min = 0;
  int scale_max = 2;
};

// Single-pass substitution of {Q} and {A}; text substituted in is never
// re-expanded. The template must contain exactly one of each placeholder.
ScoringPrompt render_prompt(const std::string& template_text,
                            const std::string& q, const std::string& a);

// Default template used when scoring requests are sent to an external
// annotator endpoint.
std::string default_scoring_template();

// Reply grammar for external annotators: the first occurrence of
// "H:<int> P:<int> C:<int>" anywhere in the body wins.
HpcScores parse_score_reply(const std::string& body);

struct ExternalEndpoint {
  std::string url;    // http://host[:port][/path]
  std::string model;  // provider model name forwarded in the request
  std::string bearer_token;
  int timeout_ms = 10000;
  int max_retries = 2;
};

// HTTP client posting {"model":..., "prompt_text":...}; the reply body is
// searched for the score grammar.
class ExternalClient {
 public:
  explicit ExternalClient(ExternalEndpoint endpoint);
  HpcScores annotate(const std::string& rendered_prompt) const;
  const ExternalEndpoint& endpoint() const { return endpoint_; }

 private:
  ExternalEndpoint endpoint_;
};

enum class AnnotatorKind { oracle, noisy, external };

struct Annotator {
  std::string id;
  AnnotatorKind kind = AnnotatorKind::oracle;
  synth::Vocabulary vocab;
  synth::RubricConfig rubric;
  double noise_rate = 0.0;     // noisy kind
  std::uint64_t seed = 0;      // noisy kind; corruption is per-pair seeded
  std::shared_ptr<ExternalClient> client;  // external kind
  std::string template_text;               // external kind
  std::optional<double> reliability;       // set by assess_annotator

  static Annotator oracle(std::string id, const synth::Vocabulary& vocab,
                          const synth::RubricConfig& rubric);
  static Annotator noisy(std::string id, const synth::Vocabulary& vocab,
                         const synth::RubricConfig& rubric, double noise_rate,
                         std::uint64_t seed);
  static Annotator external(std::string id, ExternalEndpoint endpoint,
                            std::string template_text = default_scoring_template());
};

// Integer scores in {0,1,2} per dimension. The oracle delegates to the
// rubric; noisy corrupts the oracle per-pair (same pair, same seed => same
// corruption, so concurrent or re-ordered annotation runs agree); external
// renders the template and queries the endpoint.
HpcScores annotate_pair(const Annotator& annotator, const TokenSequence& prompt,
                        const TokenSequence& response);

// Stable identity of a probe pair: hash of its token streams.
std::string probe_key(const TokenSequence& prompt, const TokenSequence& response);

// Gold scores for embedded probe pairs, keyed by probe_key.
class ProbeRegistry {
 public:
  void add(const std::string& key, const HpcScores& gold);
  bool contains(const std::string& key) const;
  const HpcScores& gold(const std::string& key) const;
  std::size_t size() const { return gold_.size(); }
  const std::map<std::string, HpcScores>& entries() const { return gold_; }

  void save(const std::filesystem::path& path) const;
  static ProbeRegistry load(const std::filesystem::path& path);

 private:
  std::map<std::string, HpcScores> gold_;
};

// Append `count` freshly generated probe pairs (is_probe = true) to the
// dataset and record their gold rubric scores in the registry.
std::pair<Dataset, ProbeRegistry> embed_probes(const Dataset& d, int count,
                                               const synth::Vocabulary& vocab,
                                               const synth::RubricConfig& rubric,
                                               Rng& rng);

// Fraction of probe dimension-scores exactly matching gold (3 comparisons per
// probe); stores the result on the annotator.
double assess_annotator(Annotator& annotator, const ProbeRegistry& probes,
                        const std::map<std::string, HpcScores>& responses);

// Keep pairs whose annotator reliability is >= min_reliability; probe pairs
// are instrumentation and are always dropped from the output.
Dataset filter_annotations(const Dataset& d,
                           const std::map<std::string, Annotator>& annotators,
                           double min_reliability);

}  // namespace edualign::annotate
