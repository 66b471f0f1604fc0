#pragma once

#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "recurlens/error.hpp"
#include "recurlens/lenses.hpp"

namespace recurlens {

// Line-oriented JSON, UTF-8. Line 1 is the header, every further line one
// LensRecord. See docs/trace-format.md.
inline constexpr int kTraceVersion = 1;

/// Token standing in for an unrelated word when tracking ranks.
inline constexpr std::string_view kBaselineToken = "t";

struct TraceHeader {
  int version = kTraceVersion;
  std::size_t vocab_size = 0;
  std::size_t r = 0;
  std::string model_fingerprint;
  double sigma = 0.0;
  std::string baseline_token{kBaselineToken};

  friend bool operator==(const TraceHeader&, const TraceHeader&) = default;
};

struct TraceData {
  TraceHeader header;
  std::string run_id;
  std::vector<LensRecord> records;

  friend bool operator==(const TraceData&, const TraceData&) = default;
};

inline nlohmann::ordered_json header_to_json(const TraceHeader& h) {
  nlohmann::ordered_json j;
  j["version"] = h.version;
  j["vocab_size"] = h.vocab_size;
  j["r"] = h.r;
  j["model_fingerprint"] = h.model_fingerprint;
  j["sigma"] = h.sigma;
  j["baseline_token"] = h.baseline_token;
  return j;
}

inline nlohmann::ordered_json record_to_json(const LensRecord& rec, const std::string& run_id) {
  nlohmann::ordered_json j;
  j["version"] = kTraceVersion;
  j["run_id"] = run_id;
  j["question_id"] = rec.question_id;
  j["block_index"] = rec.block_index;
  j["cycle"] = rec.cycle;
  j["block_role"] = rec.block_role;
  j["lens"] = to_string(rec.lens);
  auto topk = nlohmann::ordered_json::array();
  for (const auto& t : rec.topk) topk.push_back({t.text, t.logit});
  j["topk"] = std::move(topk);
  nlohmann::ordered_json ranks = nlohmann::ordered_json::object();
  for (const char* key : {"final", "intermediate", "random"}) {
    auto it = rec.tracked_ranks.find(key);
    if (it != rec.tracked_ranks.end()) ranks[key] = it->second;
  }
  j["tracked_ranks"] = std::move(ranks);
  return j;
}

inline void write_trace(std::ostream& os, const TraceData& data) {
  os << header_to_json(data.header).dump() << '\n';
  for (const auto& rec : data.records) os << record_to_json(rec, data.run_id).dump() << '\n';
}

inline void save_trace(const std::string& path, const TraceData& data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_trace(os, data);
  if (!os) throw IoError("failed writing " + path);
}

namespace detail {

template <class T>
T field(const nlohmann::json& j, const char* key, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end()) throw ParseError(line, std::string("missing field '") + key + "'");
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError(line, std::string("field '") + key + "' has the wrong type");
  }
}

inline std::size_t count_field(const nlohmann::json& j, const char* key, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end()) throw ParseError(line, std::string("missing field '") + key + "'");
  if (!it->is_number_unsigned()) throw ParseError(line, std::string("field '") + key + "' must be a non-negative integer");
  return it->get<std::size_t>();
}

inline nlohmann::json parse_line(const std::string& text, std::size_t line) {
  try {
    auto j = nlohmann::json::parse(text);
    if (!j.is_object()) throw ParseError(line, "expected a JSON object");
    return j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(line, std::string("malformed JSON: ") + e.what());
  }
}

inline void check_version(const nlohmann::json& j, std::size_t line) {
  const auto v = count_field(j, "version", line);
  if (v != static_cast<std::size_t>(kTraceVersion)) {
    throw ParseError(line, "trace version " + std::to_string(v) + " unsupported (expected " +
                               std::to_string(kTraceVersion) + ")");
  }
}

}  // namespace detail

/// Parses a trace; every error names its 1-based line.
inline TraceData read_trace(std::istream& is) {
  TraceData data;
  std::string text;
  std::size_t line = 0;
  bool have_header = false, have_run = false;
  while (std::getline(is, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.empty()) throw ParseError(line, "blank line");
    const auto j = detail::parse_line(text, line);
    detail::check_version(j, line);
    if (!have_header) {
      TraceHeader& h = data.header;
      h.vocab_size = detail::count_field(j, "vocab_size", line);
      h.r = detail::count_field(j, "r", line);
      h.model_fingerprint = detail::field<std::string>(j, "model_fingerprint", line);
      h.sigma = detail::field<double>(j, "sigma", line);
      h.baseline_token = detail::field<std::string>(j, "baseline_token", line);
      if (h.vocab_size == 0) throw ParseError(line, "vocab_size must be positive");
      if (h.r == 0) throw ParseError(line, "r must be >= 1");
      have_header = true;
      continue;
    }
    LensRecord rec;
    const auto run_id = detail::field<std::string>(j, "run_id", line);
    if (!have_run) {
      data.run_id = run_id;
      have_run = true;
    } else if (run_id != data.run_id) {
      throw ParseError(line, "run_id '" + run_id + "' differs from '" + data.run_id + "'");
    }
    rec.question_id = detail::count_field(j, "question_id", line);
    rec.block_index = detail::count_field(j, "block_index", line);
    rec.cycle = detail::count_field(j, "cycle", line);
    rec.block_role = detail::field<std::string>(j, "block_role", line);
    if (rec.block_index == 0) throw ParseError(line, "block_index starts at 1");
    if (rec.cycle > data.header.r) throw ParseError(line, "cycle exceeds r");
    try {
      rec.lens = parse_lens(detail::field<std::string>(j, "lens", line));
    } catch (const InputError& e) {
      throw ParseError(line, e.what());
    }
    const auto topk = j.find("topk");
    if (topk == j.end() || !topk->is_array() || topk->empty()) throw ParseError(line, "topk must be a non-empty array");
    if (topk->size() > data.header.vocab_size) throw ParseError(line, "topk longer than the vocabulary");
    for (const auto& entry : *topk) {
      if (!entry.is_array() || entry.size() != 2 || !entry[0].is_string() || !entry[1].is_number()) {
        throw ParseError(line, "topk entries must be [token_text, logit]");
      }
      rec.topk.push_back({entry[0].get<std::string>(), entry[1].get<double>()});
    }
    const auto ranks = j.find("tracked_ranks");
    if (ranks == j.end() || !ranks->is_object()) throw ParseError(line, "tracked_ranks must be an object");
    for (const auto& [key, value] : ranks->items()) {
      if (key != "final" && key != "intermediate" && key != "random") {
        throw ParseError(line, "unknown tracked rank '" + key + "'");
      }
      if (!value.is_number_unsigned()) throw ParseError(line, "rank '" + key + "' must be a positive integer");
      const auto rank = value.get<std::size_t>();
      if (rank < 1 || rank > data.header.vocab_size) {
        throw ParseError(line, "rank '" + key + "' = " + std::to_string(rank) + " outside [1, " +
                                   std::to_string(data.header.vocab_size) + "]");
      }
      rec.tracked_ranks[key] = rank;
    }
    data.records.push_back(std::move(rec));
  }
  if (!have_header) throw ParseError(1, "empty trace file (missing header)");
  return data;
}

inline TraceData load_trace(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open trace " + path);
  return read_trace(is);
}

}  // namespace recurlens
