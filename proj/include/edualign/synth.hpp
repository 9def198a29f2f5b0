#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "edualign/rng.hpp"
#include "edualign/types.hpp"

namespace edualign::synth {

struct MarkerSet {
  std::vector<std::int32_t> positive;
  std::vector<std::int32_t> negative;
};

// Token-id layout of the synthetic domain. Ids are partitioned into reserved
// control ids (bos/eos), a band of student-profile ids, per-dimension marker
// ids, and plain filler ids.
struct Vocabulary {
  int vocab_size = 64;
  std::int32_t bos_id = 0;
  std::int32_t eos_id = 1;
  std::int32_t profile_begin = 2;  // [profile_begin, profile_end)
  std::int32_t profile_end = 10;
  std::map<std::string, MarkerSet> marker_sets;  // keyed by dimension, "H"

  static Vocabulary standard();  // the default 64-id layout

  void validate() const;
  bool in_profile_band(std::int32_t id) const {
    return id >= profile_begin && id < profile_end;
  }
  // Ids that are neither control, profile, nor marker tokens.
  std::vector<std::int32_t> plain_ids() const;
};

// Scoring rule configuration. Marker counts are capped at `window`;
// the type-token ratio is bucketed by the two thresholds.
struct RubricConfig {
  int window = 4;
  double ttr_low = 0.4;
  double ttr_high = 0.7;

  void validate() const;
};

// Prompt = [bos, profile tokens, body tokens]. Profile tokens are drawn from
// the profile band without replacement; body tokens from the plain ids.
TokenSequence generate_prompt(const Vocabulary& vocab, Rng& rng, int profile_len,
                              int body_len, int max_seq_len = 64);

// The deterministic scoring oracle:
//   helpfulness     clamp(#positive - #negative markers, 0, 2), counts capped
//   personalization min(2, distinct prompt-profile tokens echoed in response)
//   creativity      type-token ratio bucketed by (ttr_low, ttr_high)
HpcScores rubric_scores(const Vocabulary& vocab, const RubricConfig& cfg,
                        const TokenSequence& prompt,
                        const TokenSequence& response);

// Knobs for corpus generation beyond the required arguments.
struct CorpusShape {
  int profile_len = 3;
  int body_len = 6;
  int response_min = 16;
  int response_max = 30;
};

// Generate n_pairs annotated pairs. Responses come from three responder
// quality tiers (good/average/poor) mixed per `quality_mix`; each tier biases
// the planted marker, profile-echo, and diversity levels so that every
// dimension's labels cover {0,1,2}. Stored scores are exactly the rubric's.
Dataset generate_corpus(const Vocabulary& vocab, const RubricConfig& cfg,
                        int n_pairs, Rng& rng,
                        const std::array<double, 3>& quality_mix,
                        const CorpusShape& shape = {});

// Independently replace each dimension of each pair's scores with a uniform
// draw from {0,1,2} with probability noise_rate. Annotator ids get a "-noisy"
// suffix; everything else is unchanged.
Dataset corrupt_annotations(const Dataset& d, double noise_rate, Rng& rng);

// Prompts for the reinforcement-learning stage (same shape as corpus prompts).
std::vector<TokenSequence> generate_prompts(const Vocabulary& vocab, Rng& rng,
                                            int count,
                                            const CorpusShape& shape = {});

}  // namespace edualign::synth
