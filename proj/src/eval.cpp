#include "edualign/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace edualign::eval {

using nlohmann::json;

double accuracy(const std::vector<double>& pred, const std::vector<int>& ref) {
  if (pred.size() != ref.size()) {
    throw ArgumentError("accuracy: length mismatch");
  }
  if (pred.empty()) throw ArgumentError("accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    // std::round rounds halves away from zero
    const int rounded = std::clamp(static_cast<int>(std::round(pred[i])), 0, 2);
    if (rounded == ref[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ArgumentError("pearson: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) throw ArgumentError("pearson: need at least 2 points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw UndefinedCorrelation("pearson: constant input");
  }
  return sxy / std::sqrt(sxx * syy);
}

std::vector<double> average_ranks(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ArgumentError("spearman: length mismatch");
  if (x.size() < 2) throw ArgumentError("spearman: need at least 2 points");
  try {
    return pearson(average_ranks(x), average_ranks(y));
  } catch (const UndefinedCorrelation&) {
    throw UndefinedCorrelation("spearman: constant input");
  }
}

double kendall(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ArgumentError("kendall: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) throw ArgumentError("kendall: need at least 2 points");
  long long concordant = 0, discordant = 0;
  long long ties_x = 0, ties_y = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = x[i] - x[j];
      const double dy = y[i] - y[j];
      if (dx == 0.0 && dy == 0.0) {
        ++ties_x;
        ++ties_y;
      } else if (dx == 0.0) {
        ++ties_x;
      } else if (dy == 0.0) {
        ++ties_y;
      } else if ((dx > 0.0) == (dy > 0.0)) {
        ++concordant;
      } else {
        ++discordant;
      }
    }
  }
  const long long n0 = static_cast<long long>(n) * (static_cast<long long>(n) - 1) / 2;
  const double denom_x = static_cast<double>(n0 - ties_x);
  const double denom_y = static_cast<double>(n0 - ties_y);
  if (denom_x == 0.0 || denom_y == 0.0) {
    throw UndefinedCorrelation("kendall: all pairs tied");
  }
  return static_cast<double>(concordant - discordant) / std::sqrt(denom_x * denom_y);
}

ScorerFn reward_model_scorer(const model::ModelParameters& rm) {
  if (rm.config().variant != model::Variant::reward) {
    throw ConfigError("reward_model_scorer: requires a reward-variant model");
  }
  return [&rm](const TokenSequence& prompt, const TokenSequence& response) {
    return model::forward_reward(rm, prompt, response);
  };
}

ConsistencyReport consistency_report_for(const ScorerFn& scorer,
                                         const Dataset& test,
                                         const std::string& source) {
  if (test.empty()) throw ArgumentError("consistency_report: empty test set");
  std::vector<double> pred[3];
  std::vector<int> ref[3];
  std::vector<double> ref_d[3];
  for (const AnnotatedPair& pair : test.pairs()) {
    const HpcScores s = scorer(pair.prompt, pair.response);
    for (int d = 0; d < 3; ++d) {
      pred[d].push_back(s.dim(d));
      const double label = pair.scores.dim(d);
      ref[d].push_back(static_cast<int>(std::lround(label)));
      ref_d[d].push_back(label);
    }
  }
  ConsistencyReport report;
  report.n = static_cast<int>(test.size());
  report.source = source;
  for (int d = 0; d < 3; ++d) {
    DimensionMetrics& m = report.dims[d];
    m.acc = accuracy(pred[d], ref[d]);
    try {
      m.pearson = pearson(pred[d], ref_d[d]);
    } catch (const UndefinedCorrelation&) {
    }
    try {
      m.spearman = spearman(pred[d], ref_d[d]);
    } catch (const UndefinedCorrelation&) {
    }
    try {
      m.kendall = kendall(pred[d], ref_d[d]);
    } catch (const UndefinedCorrelation&) {
    }
  }
  return report;
}

ConsistencyReport consistency_report(const model::ModelParameters& rm,
                                     const Dataset& test,
                                     const std::string& source) {
  return consistency_report_for(reward_model_scorer(rm), test, source);
}

ComparisonReport compare_policies(const model::ModelParameters& before,
                                  const model::ModelParameters& after,
                                  const std::vector<TokenSequence>& prompts,
                                  const ScorerFn& scorer,
                                  const std::string& scorer_label, Rng& rng,
                                  const grpo::RewardWeights& weights,
                                  int max_new) {
  if (before.config().variant != model::Variant::policy ||
      after.config().variant != model::Variant::policy) {
    throw ConfigError("compare_policies: both models must be policy variants");
  }
  if (prompts.empty()) throw ArgumentError("compare_policies: no prompts");
  weights.validate();

  ComparisonReport report;
  report.n_prompts = static_cast<int>(prompts.size());
  report.scorer = scorer_label;
  for (const TokenSequence& prompt : prompts) {
    const TokenSequence r_before = model::sample(before, prompt, max_new, 0.0, rng);
    const TokenSequence r_after = model::sample(after, prompt, max_new, 0.0, rng);
    const HpcScores s_before = scorer(prompt, r_before);
    const HpcScores s_after = scorer(prompt, r_after);
    for (int d = 0; d < 3; ++d) {
      report.dims[d].before += s_before.dim(d);
      report.dims[d].after += s_after.dim(d);
    }
    report.aggregate.before += grpo::aggregate_reward(s_before, weights);
    report.aggregate.after += grpo::aggregate_reward(s_after, weights);
  }
  const double n = static_cast<double>(prompts.size());
  for (int d = 0; d < 3; ++d) {
    report.dims[d].before /= n;
    report.dims[d].after /= n;
  }
  report.aggregate.before /= n;
  report.aggregate.after /= n;
  return report;
}

namespace {

json metrics_to_json(const DimensionMetrics& m) {
  json j{{"acc", m.acc}};
  j["pearson"] = m.pearson ? json(*m.pearson) : json(nullptr);
  j["spearman"] = m.spearman ? json(*m.spearman) : json(nullptr);
  j["kendall"] = m.kendall ? json(*m.kendall) : json(nullptr);
  return j;
}

DimensionMetrics metrics_from_json(const json& j) {
  DimensionMetrics m;
  m.acc = j.at("acc").get<double>();
  if (!j.at("pearson").is_null()) m.pearson = j.at("pearson").get<double>();
  if (!j.at("spearman").is_null()) m.spearman = j.at("spearman").get<double>();
  if (!j.at("kendall").is_null()) m.kendall = j.at("kendall").get<double>();
  return m;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%6.3f", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) {
  return v ? fmt(*v) : "   n/a";
}

}  // namespace

void save_consistency(const ConsistencyReport& r, const std::filesystem::path& path) {
  json j{{"source", r.source},
         {"n", r.n},
         {"helpfulness", metrics_to_json(r.dims[0])},
         {"personalization", metrics_to_json(r.dims[1])},
         {"creativity", metrics_to_json(r.dims[2])}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write report: " + path.string());
  out << j.dump(2) << "\n";
}

ConsistencyReport load_consistency(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open report: " + path.string());
  json j;
  try {
    in >> j;
    ConsistencyReport r;
    r.source = j.at("source").get<std::string>();
    r.n = j.at("n").get<int>();
    r.dims[0] = metrics_from_json(j.at("helpfulness"));
    r.dims[1] = metrics_from_json(j.at("personalization"));
    r.dims[2] = metrics_from_json(j.at("creativity"));
    return r;
  } catch (const json::exception& e) {
    throw CorruptionError("bad consistency report " + path.string() + ": " + e.what());
  }
}

void save_comparison(const ComparisonReport& r, const std::filesystem::path& path) {
  auto row = [](const ComparisonRow& c) {
    return json{{"before", c.before}, {"after", c.after}, {"delta", c.delta()}};
  };
  json j{{"scorer", r.scorer},
         {"n_prompts", r.n_prompts},
         {"helpfulness", row(r.dims[0])},
         {"personalization", row(r.dims[1])},
         {"creativity", row(r.dims[2])},
         {"aggregate", row(r.aggregate)}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write report: " + path.string());
  out << j.dump(2) << "\n";
}

ComparisonReport load_comparison(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open report: " + path.string());
  json j;
  try {
    in >> j;
    ComparisonReport r;
    r.scorer = j.at("scorer").get<std::string>();
    r.n_prompts = j.at("n_prompts").get<int>();
    const char* keys[4] = {"helpfulness", "personalization", "creativity", "aggregate"};
    ComparisonRow* rows[4] = {&r.dims[0], &r.dims[1], &r.dims[2], &r.aggregate};
    for (int i = 0; i < 4; ++i) {
      rows[i]->before = j.at(keys[i]).at("before").get<double>();
      rows[i]->after = j.at(keys[i]).at("after").get<double>();
    }
    return r;
  } catch (const json::exception& e) {
    throw CorruptionError("bad comparison report " + path.string() + ": " + e.what());
  }
}

std::string consistency_table(const std::vector<ConsistencyReport>& reports) {
  std::ostringstream out;
  out << "dimension        source      n      ACC  Pearson  Spearman  Kendall\n";
  for (int d = 0; d < 3; ++d) {
    for (const ConsistencyReport& r : reports) {
      char line[160];
      std::snprintf(line, sizeof(line), "%-16s %-10s %5d   %s   %s    %s   %s\n",
                    kDimensionNames[d], r.source.c_str(), r.n,
                    fmt(r.dims[d].acc).c_str(), fmt_opt(r.dims[d].pearson).c_str(),
                    fmt_opt(r.dims[d].spearman).c_str(),
                    fmt_opt(r.dims[d].kendall).c_str());
      out << line;
    }
  }
  return out.str();
}

std::string comparison_table(const std::vector<ComparisonReport>& reports) {
  std::ostringstream out;
  out << "dimension        scorer        n   before    after    delta\n";
  for (const ComparisonReport& r : reports) {
    const ComparisonRow* rows[4] = {&r.dims[0], &r.dims[1], &r.dims[2], &r.aggregate};
    const char* names[4] = {kDimensionNames[0], kDimensionNames[1],
                            kDimensionNames[2], "aggregate"};
    for (int i = 0; i < 4; ++i) {
      char line[160];
      std::snprintf(line, sizeof(line), "%-16s %-12s %4d  %s   %s   %+.3f\n",
                    names[i], r.scorer.c_str(), r.n_prompts,
                    fmt(rows[i]->before).c_str(), fmt(rows[i]->after).c_str(),
                    rows[i]->delta());
      out << line;
    }
  }
  return out.str();
}

}  // namespace edualign::eval
