#pragma once

#include <filesystem>
#include <vector>

#include "edualign/rng.hpp"
#include "edualign/types.hpp"

namespace edualign {

// Dataset files are UTF-8 JSON Lines. The first line is a header object
// {"vocab_size": N, "metadata": {...}}; each following line is one pair:
// {"prompt": [ids], "response": [ids], "scores": {"h":..,"p":..,"c":..},
//  "annotator_id": "...", "is_probe": bool}.
Dataset load_dataset(const std::filesystem::path& path);
void save_dataset(const Dataset& d, const std::filesystem::path& path);

// Partition into disjoint, exhaustive subsets whose sizes match the fractions
// within one element. The shuffle is driven entirely by rng.
std::vector<Dataset> split(const Dataset& d, const std::vector<double>& fractions,
                           Rng& rng);

// Prompt sets share the dataset header convention; each line after the header
// is {"prompt": [ids]}.
struct PromptSet {
  int vocab_size = 1;
  std::vector<TokenSequence> prompts;
};

PromptSet load_prompts(const std::filesystem::path& path);
void save_prompts(const PromptSet& ps, const std::filesystem::path& path);

}  // namespace edualign
