#include "edualign/synth.hpp"

#include <algorithm>
#include <set>
#include <unordered_set>

namespace edualign::synth {

Vocabulary Vocabulary::standard() {
  Vocabulary v;
  v.vocab_size = 64;
  v.bos_id = 0;
  v.eos_id = 1;
  v.profile_begin = 2;
  v.profile_end = 10;
  v.marker_sets["H"] = MarkerSet{{10, 11, 12, 13}, {14, 15, 16, 17}};
  return v;
}

void Vocabulary::validate() const {
  if (vocab_size <= 0) throw ConfigError("Vocabulary: vocab_size must be positive");
  auto in_range = [&](std::int32_t id) { return id >= 0 && id < vocab_size; };
  if (!in_range(bos_id) || !in_range(eos_id) || bos_id == eos_id) {
    throw ConfigError("Vocabulary: bad bos/eos ids");
  }
  if (profile_begin >= profile_end || profile_begin < 0 ||
      profile_end > vocab_size) {
    throw ConfigError("Vocabulary: bad profile band");
  }
  std::set<std::int32_t> seen{bos_id, eos_id};
  for (std::int32_t id = profile_begin; id < profile_end; ++id) {
    if (!seen.insert(id).second) {
      throw ConfigError("Vocabulary: profile band overlaps reserved ids");
    }
  }
  for (const auto& [dim, ms] : marker_sets) {
    for (const auto* side : {&ms.positive, &ms.negative}) {
      for (std::int32_t id : *side) {
        if (!in_range(id)) throw ConfigError("Vocabulary: marker id out of range");
        if (!seen.insert(id).second) {
          throw ConfigError("Vocabulary: marker id " + std::to_string(id) +
                            " overlaps another reserved set");
        }
      }
    }
  }
}

std::vector<std::int32_t> Vocabulary::plain_ids() const {
  std::set<std::int32_t> reserved{bos_id, eos_id};
  for (std::int32_t id = profile_begin; id < profile_end; ++id) reserved.insert(id);
  for (const auto& [dim, ms] : marker_sets) {
    reserved.insert(ms.positive.begin(), ms.positive.end());
    reserved.insert(ms.negative.begin(), ms.negative.end());
  }
  std::vector<std::int32_t> out;
  for (std::int32_t id = 0; id < vocab_size; ++id) {
    if (!reserved.count(id)) out.push_back(id);
  }
  return out;
}

void RubricConfig::validate() const {
  if (window < 1) throw ConfigError("RubricConfig: window must be >= 1");
  if (!(0.0 < ttr_low && ttr_low < ttr_high && ttr_high < 1.0)) {
    throw ConfigError("RubricConfig: need 0 < ttr_low < ttr_high < 1");
  }
}

namespace {

// Sample k distinct elements; order is rng-dependent.
std::vector<std::int32_t> pick_distinct(std::vector<std::int32_t> pool, int k,
                                        Rng& rng) {
  shuffle(pool, rng);
  pool.resize(static_cast<std::size_t>(k));
  return pool;
}

int ttr_level(double ttr, const RubricConfig& cfg) {
  if (ttr < cfg.ttr_low) return 0;
  if (ttr < cfg.ttr_high) return 1;
  return 2;
}

}  // namespace

TokenSequence generate_prompt(const Vocabulary& vocab, Rng& rng, int profile_len,
                              int body_len, int max_seq_len) {
  vocab.validate();
  if (profile_len < 1 || body_len < 1) {
    throw ArgumentError("generate_prompt: lengths must be >= 1");
  }
  if (1 + profile_len + body_len > max_seq_len) {
    throw ArgumentError("generate_prompt: total length exceeds max_seq_len");
  }
  const int band = vocab.profile_end - vocab.profile_begin;
  if (profile_len > band) {
    throw ArgumentError("generate_prompt: profile_len exceeds profile band");
  }
  std::vector<std::int32_t> profile_pool;
  for (std::int32_t id = vocab.profile_begin; id < vocab.profile_end; ++id) {
    profile_pool.push_back(id);
  }
  const std::vector<std::int32_t> profile =
      pick_distinct(std::move(profile_pool), profile_len, rng);
  const std::vector<std::int32_t> plain = vocab.plain_ids();
  if (plain.empty()) throw ConfigError("generate_prompt: no plain ids available");

  TokenSequence out;
  out.push_back(vocab.bos_id);
  for (std::int32_t id : profile) out.push_back(id);
  for (int i = 0; i < body_len; ++i) {
    out.push_back(plain[rng.next_below(plain.size())]);
  }
  return out;
}

HpcScores rubric_scores(const Vocabulary& vocab, const RubricConfig& cfg,
                        const TokenSequence& prompt,
                        const TokenSequence& response) {
  if (response.empty()) {
    throw ArgumentError("rubric_scores: response must be nonempty");
  }

  // Helpfulness: capped positive minus capped negative marker occurrences.
  const auto it = vocab.marker_sets.find("H");
  int pos = 0, neg = 0;
  if (it != vocab.marker_sets.end()) {
    const MarkerSet& ms = it->second;
    std::unordered_set<std::int32_t> pos_ids(ms.positive.begin(), ms.positive.end());
    std::unordered_set<std::int32_t> neg_ids(ms.negative.begin(), ms.negative.end());
    for (std::int32_t id : response) {
      if (pos_ids.count(id)) ++pos;
      if (neg_ids.count(id)) ++neg;
    }
  }
  pos = std::min(pos, cfg.window);
  neg = std::min(neg, cfg.window);
  const int helpfulness = std::clamp(pos - neg, 0, 2);

  // Personalization: distinct prompt-profile tokens echoed in the response.
  std::set<std::int32_t> prompt_profile;
  for (std::int32_t id : prompt) {
    if (vocab.in_profile_band(id)) prompt_profile.insert(id);
  }
  std::set<std::int32_t> echoed;
  for (std::int32_t id : response) {
    if (prompt_profile.count(id)) echoed.insert(id);
  }
  const int personalization = std::min<int>(2, static_cast<int>(echoed.size()));

  // Creativity: type-token ratio bucketed by the thresholds.
  std::set<std::int32_t> distinct(response.begin(), response.end());
  const double ttr = static_cast<double>(distinct.size()) /
                     static_cast<double>(response.size());
  const int creativity = ttr_level(ttr, cfg);

  return HpcScores(helpfulness, personalization, creativity);
}

namespace {

// Per-tier distribution over target levels {0,1,2}, one draw per dimension.
int draw_level(int tier, Rng& rng) {
  static constexpr double kCdf[3][2] = {
      {0.05, 0.30},  // good:    P(0)=.05 P(1)=.25 P(2)=.70
      {0.25, 0.75},  // average: P(0)=.25 P(1)=.50 P(2)=.25
      {0.70, 0.95},  // poor:    P(0)=.70 P(1)=.25 P(2)=.05
  };
  const double u = rng.next_double();
  if (u < kCdf[tier][0]) return 0;
  if (u < kCdf[tier][1]) return 1;
  return 2;
}

TokenSequence build_response(const Vocabulary& vocab, const RubricConfig& cfg,
                             const TokenSequence& prompt, int target_h,
                             int target_p, int target_c,
                             const CorpusShape& shape,
                             const std::vector<std::int32_t>& plain, Rng& rng) {
  const int n = rng.next_int(shape.response_min, shape.response_max);
  const MarkerSet& ms = vocab.marker_sets.at("H");

  std::vector<std::int32_t> planted;
  for (std::int32_t id : pick_distinct(ms.positive, target_h, rng)) {
    planted.push_back(id);
  }
  if (target_h == 0 && rng.next_double() < 0.5) {
    planted.push_back(ms.negative[rng.next_below(ms.negative.size())]);
  }
  std::vector<std::int32_t> prompt_profile;
  for (std::int32_t id : prompt) {
    if (vocab.in_profile_band(id) &&
        std::find(prompt_profile.begin(), prompt_profile.end(), id) ==
            prompt_profile.end()) {
      prompt_profile.push_back(id);
    }
  }
  const int echo = std::min<int>(target_p, static_cast<int>(prompt_profile.size()));
  for (std::int32_t id : pick_distinct(prompt_profile, echo, rng)) {
    planted.push_back(id);
  }

  // Remaining slots are filler; the distinct-filler count d steers the
  // type-token ratio (k + d) / n into the target bucket.
  const int k = static_cast<int>(planted.size());
  const int m = n - k;
  const int d_max = std::min<int>(m, static_cast<int>(plain.size()));
  std::vector<int> feasible;
  for (int d = 1; d <= d_max; ++d) {
    const double ttr = static_cast<double>(k + d) / static_cast<double>(n);
    if (ttr_level(ttr, cfg) == target_c) feasible.push_back(d);
  }
  const int d = feasible.empty()
                    ? 1
                    : feasible[rng.next_below(feasible.size())];

  const std::vector<std::int32_t> filler_ids = pick_distinct(plain, d, rng);
  std::vector<std::int32_t> tokens = planted;
  for (int i = 0; i < m; ++i) {
    tokens.push_back(i < d ? filler_ids[static_cast<std::size_t>(i)]
                           : filler_ids[rng.next_below(filler_ids.size())]);
  }
  shuffle(tokens, rng);
  return TokenSequence(std::move(tokens));
}

}  // namespace

Dataset generate_corpus(const Vocabulary& vocab, const RubricConfig& cfg,
                        int n_pairs, Rng& rng,
                        const std::array<double, 3>& quality_mix,
                        const CorpusShape& shape) {
  vocab.validate();
  cfg.validate();
  if (n_pairs < 1) throw ArgumentError("generate_corpus: n_pairs must be >= 1");
  const auto it = vocab.marker_sets.find("H");
  if (it == vocab.marker_sets.end() || it->second.positive.empty() ||
      it->second.negative.empty()) {
    throw ConfigError("generate_corpus: vocabulary has no helpfulness markers");
  }
  double mix_sum = 0.0;
  for (double w : quality_mix) {
    if (w < 0.0) throw ArgumentError("generate_corpus: negative quality mix");
    mix_sum += w;
  }
  if (std::abs(mix_sum - 1.0) > 1e-9) {
    throw ArgumentError("generate_corpus: quality mix must sum to 1");
  }

  const std::vector<std::int32_t> plain = vocab.plain_ids();
  std::vector<AnnotatedPair> pairs;
  pairs.reserve(static_cast<std::size_t>(n_pairs));
  std::array<int, 3> tier_counts{0, 0, 0};

  for (int i = 0; i < n_pairs; ++i) {
    const double u = rng.next_double();
    const int tier = u < quality_mix[0] ? 0 : (u < quality_mix[0] + quality_mix[1] ? 1 : 2);
    ++tier_counts[static_cast<std::size_t>(tier)];

    AnnotatedPair p;
    p.prompt = generate_prompt(vocab, rng, shape.profile_len, shape.body_len);
    const int th = draw_level(tier, rng);
    const int tp = draw_level(tier, rng);
    const int tc = draw_level(tier, rng);
    p.response = build_response(vocab, cfg, p.prompt, th, tp, tc, shape, plain, rng);
    p.scores = rubric_scores(vocab, cfg, p.prompt, p.response);
    p.annotator_id = "oracle";
    p.is_probe = false;
    pairs.push_back(std::move(p));
  }

  std::map<std::string, std::string> metadata{
      {"tier_good", std::to_string(tier_counts[0])},
      {"tier_average", std::to_string(tier_counts[1])},
      {"tier_poor", std::to_string(tier_counts[2])}};
  return Dataset(vocab.vocab_size, std::move(pairs), std::move(metadata));
}

Dataset corrupt_annotations(const Dataset& d, double noise_rate, Rng& rng) {
  if (noise_rate < 0.0 || noise_rate > 1.0) {
    throw ArgumentError("corrupt_annotations: noise_rate must be in [0,1]");
  }
  std::vector<AnnotatedPair> pairs = d.pairs();
  for (AnnotatedPair& p : pairs) {
    double v[3] = {p.scores.helpfulness(), p.scores.personalization(),
                   p.scores.creativity()};
    for (double& dim : v) {
      if (rng.next_double() < noise_rate) {
        dim = static_cast<double>(rng.next_below(3));
      }
    }
    p.scores = HpcScores(v[0], v[1], v[2]);
    p.annotator_id += "-noisy";
  }
  return Dataset(d.vocab_size(), std::move(pairs), d.metadata());
}

std::vector<TokenSequence> generate_prompts(const Vocabulary& vocab, Rng& rng,
                                            int count, const CorpusShape& shape) {
  if (count < 0) throw ArgumentError("generate_prompts: count must be >= 0");
  std::vector<TokenSequence> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(generate_prompt(vocab, rng, shape.profile_len, shape.body_len));
  }
  return out;
}

}  // namespace edualign::synth
