#include "edualign/dataset_io.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace edualign {

using nlohmann::json;

namespace {

json scores_to_json(const HpcScores& s) {
  return json{{"h", s.helpfulness()},
              {"p", s.personalization()},
              {"c", s.creativity()}};
}

HpcScores scores_from_json(const json& j) {
  const double h = j.at("h").get<double>();
  const double p = j.at("p").get<double>();
  const double c = j.at("c").get<double>();
  return HpcScores(h, p, c);  // bounds enforced by the constructor
}

std::vector<std::int32_t> ids_from_json(const json& j) {
  return j.get<std::vector<std::int32_t>>();
}

std::ifstream open_for_read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return in;
}

std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  return out;
}

json parse_line(const std::string& line, std::size_t line_no,
                const std::filesystem::path& path) {
  try {
    return json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ":" + std::to_string(line_no) +
                     ": malformed JSON line: " + e.what());
  }
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in = open_for_read(path);
  std::string line;
  std::size_t line_no = 0;

  int vocab_size = 1;
  std::map<std::string, std::string> metadata;
  bool have_header = false;
  std::vector<AnnotatedPair> pairs;

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = parse_line(line, line_no, path);
    try {
      if (!have_header) {
        vocab_size = j.at("vocab_size").get<int>();
        if (j.contains("metadata")) {
          metadata = j.at("metadata").get<std::map<std::string, std::string>>();
        }
        have_header = true;
        continue;
      }
      AnnotatedPair p;
      p.prompt = TokenSequence(ids_from_json(j.at("prompt")));
      p.response = TokenSequence(ids_from_json(j.at("response")));
      p.scores = scores_from_json(j.at("scores"));
      p.annotator_id = j.at("annotator_id").get<std::string>();
      p.is_probe = j.at("is_probe").get<bool>();
      pairs.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                       ": bad record: " + e.what());
    } catch (const ArgumentError& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " +
                      e.what());
    }
  }
  if (!have_header && !pairs.empty()) {
    throw ParseError(path.string() + ": missing header line");
  }
  try {
    return have_header ? Dataset(vocab_size, std::move(pairs), std::move(metadata))
                       : Dataset();
  } catch (const ArgumentError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream out = open_for_write(path);
  json header{{"vocab_size", d.vocab_size()}, {"metadata", d.metadata()}};
  out << header.dump() << "\n";
  for (const AnnotatedPair& p : d.pairs()) {
    json j{{"prompt", p.prompt.tokens},
           {"response", p.response.tokens},
           {"scores", scores_to_json(p.scores)},
           {"annotator_id", p.annotator_id},
           {"is_probe", p.is_probe}};
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<Dataset> split(const Dataset& d, const std::vector<double>& fractions,
                           Rng& rng) {
  if (fractions.empty()) throw ArgumentError("split: no fractions given");
  double sum = 0.0;
  for (double f : fractions) {
    if (f <= 0.0) throw ArgumentError("split: fractions must be positive");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ArgumentError("split: fractions sum to " + std::to_string(sum) +
                        ", expected 1");
  }

  const std::size_t n = d.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(order, rng);

  // Largest-remainder apportionment keeps every size within 1 of n*f.
  const std::size_t k = fractions.size();
  std::vector<std::size_t> sizes(k);
  std::vector<std::pair<double, std::size_t>> remainders(k);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double exact = fractions[i] * static_cast<double>(n);
    sizes[i] = static_cast<std::size_t>(exact);
    remainders[i] = {exact - static_cast<double>(sizes[i]), i};
    assigned += sizes[i];
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) {
    sizes[remainders[i % k].second] += 1;
  }

  std::vector<Dataset> out;
  out.reserve(k);
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<AnnotatedPair> part;
    part.reserve(sizes[i]);
    for (std::size_t j = 0; j < sizes[i]; ++j) {
      part.push_back(d.pairs()[order[cursor++]]);
    }
    out.emplace_back(d.vocab_size(), std::move(part), d.metadata());
  }
  return out;
}

PromptSet load_prompts(const std::filesystem::path& path) {
  std::ifstream in = open_for_read(path);
  std::string line;
  std::size_t line_no = 0;
  PromptSet ps;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = parse_line(line, line_no, path);
    try {
      if (!have_header) {
        ps.vocab_size = j.at("vocab_size").get<int>();
        have_header = true;
        continue;
      }
      ps.prompts.emplace_back(ids_from_json(j.at("prompt")));
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                       ": bad record: " + e.what());
    }
  }
  return ps;
}

void save_prompts(const PromptSet& ps, const std::filesystem::path& path) {
  std::ofstream out = open_for_write(path);
  json header{{"vocab_size", ps.vocab_size}, {"metadata", json::object()}};
  out << header.dump() << "\n";
  for (const TokenSequence& p : ps.prompts) {
    out << json{{"prompt", p.tokens}}.dump() << "\n";
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace edualign
