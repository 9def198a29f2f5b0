#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "edualign/error.hpp"

namespace edualign {

// A tokenized text. Token ids are the native representation; the synthetic
// vocabulary gives them meaning.
struct TokenSequence {
  std::vector<std::int32_t> tokens;

  TokenSequence() = default;
  TokenSequence(std::initializer_list<std::int32_t> ids) : tokens(ids) {}
  explicit TokenSequence(std::vector<std::int32_t> ids)
      : tokens(std::move(ids)) {}

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
  std::int32_t operator[](std::size_t i) const { return tokens[i]; }
  auto begin() const { return tokens.begin(); }
  auto end() const { return tokens.end(); }
  void push_back(std::int32_t id) { tokens.push_back(id); }

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

// Dimension scores (helpfulness, personalization, creativity) on [0, 2].
// Reference annotations are integers in {0,1,2}; model predictions may be any
// real in [0,2]. Construction validates the bounds, so no valid HpcScores can
// exist outside [0,2]^3.
class HpcScores {
 public:
  HpcScores() = default;
  HpcScores(double h, double p, double c) : h_(h), p_(p), c_(c) {
    auto check = [](double v, const char* name) {
      if (!(v >= 0.0 && v <= 2.0)) {
        throw ArgumentError(std::string("HpcScores: ") + name +
                            " out of [0,2]: " + std::to_string(v));
      }
    };
    check(h, "helpfulness");
    check(p, "personalization");
    check(c, "creativity");
  }

  double helpfulness() const { return h_; }
  double personalization() const { return p_; }
  double creativity() const { return c_; }

  double dim(int i) const { return i == 0 ? h_ : (i == 1 ? p_ : c_); }

  bool is_integral() const {
    auto ok = [](double v) { return v == 0.0 || v == 1.0 || v == 2.0; };
    return ok(h_) && ok(p_) && ok(c_);
  }

  friend bool operator==(const HpcScores&, const HpcScores&) = default;

 private:
  double h_ = 0.0, p_ = 0.0, c_ = 0.0;
};

inline constexpr const char* kDimensionNames[3] = {
    "helpfulness", "personalization", "creativity"};

// One row of the annotated training set.
struct AnnotatedPair {
  TokenSequence prompt;
  TokenSequence response;
  HpcScores scores;
  std::string annotator_id;
  bool is_probe = false;

  friend bool operator==(const AnnotatedPair&, const AnnotatedPair&) = default;
};

// Ordered collection of annotated pairs over one vocabulary. Order is
// significant and preserved; shuffling happens only through split().
class Dataset {
 public:
  Dataset() = default;
  Dataset(int vocab_size, std::vector<AnnotatedPair> pairs,
          std::map<std::string, std::string> metadata = {})
      : vocab_size_(vocab_size),
        pairs_(std::move(pairs)),
        metadata_(std::move(metadata)) {
    if (vocab_size_ <= 0) throw ArgumentError("Dataset: vocab_size must be positive");
    for (std::size_t i = 0; i < pairs_.size(); ++i) {
      validate_tokens(pairs_[i].prompt, i, "prompt");
      validate_tokens(pairs_[i].response, i, "response");
    }
  }

  int vocab_size() const { return vocab_size_; }
  const std::vector<AnnotatedPair>& pairs() const { return pairs_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }
  std::size_t size() const { return pairs_.size(); }
  bool empty() const { return pairs_.empty(); }

  friend bool operator==(const Dataset&, const Dataset&) = default;

 private:
  void validate_tokens(const TokenSequence& seq, std::size_t row,
                       const char* field) const {
    for (std::int32_t id : seq) {
      if (id < 0 || id >= vocab_size_) {
        throw ArgumentError("Dataset: pair " + std::to_string(row) + " " +
                            field + " token id " + std::to_string(id) +
                            " outside vocabulary of size " +
                            std::to_string(vocab_size_));
      }
    }
  }

  int vocab_size_ = 1;
  std::vector<AnnotatedPair> pairs_;
  std::map<std::string, std::string> metadata_;
};

}  // namespace edualign
