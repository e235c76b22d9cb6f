#pragma once

// Raw (pre-vocabulary) datasets: a behavior log plus labelled queries, and
// their on-disk form.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fin/detail/text.hpp"
#include "fin/errors.hpp"
#include "fin/store.hpp"

namespace fin {

/// How a raw event's spatial key is derived during preparation.
enum class spatial_source {
  geohash,  // from lat/lon at the configured precision
  price,    // equal-frequency price bin of extra["price"]
};

inline const char* to_string(spatial_source s) { return s == spatial_source::geohash ? "geohash" : "price"; }

inline spatial_source parse_spatial_source(std::string_view s) {
  if (s == "geohash") return spatial_source::geohash;
  if (s == "price") return spatial_source::price;
  throw format_error("unknown spatial source '" + std::string(s) + "'");
}

inline constexpr std::string_view price_key = "price";

/// Value stored under `key` in a raw event's extra map, or "" when absent.
inline std::string extra_value(const raw_event& e, std::string_view key) {
  for (const auto& [k, v] : e.extra)
    if (k == key) return v;
  return {};
}

/// A labelled request: the candidate item shown at the query's time and place.
struct raw_sample {
  raw_event query;
  int label = 0;
};

struct raw_dataset {
  spatial_source spatial = spatial_source::geohash;
  std::vector<raw_event> behaviors;
  std::vector<raw_sample> samples;
};

inline std::string format_sample_line(const raw_sample& s) {
  return std::to_string(s.label) + '\t' + format_behavior_line(s.query);
}

inline raw_sample parse_sample_line(std::string_view line, std::size_t line_no) {
  const auto tab = line.find('\t');
  if (tab == std::string_view::npos) throw format_error("line " + std::to_string(line_no) + ": missing label column");
  raw_sample s;
  s.label = detail::parse_number<int>(line.substr(0, tab), "label", line_no);
  if (s.label != 0 && s.label != 1) throw format_error("line " + std::to_string(line_no) + ": label must be 0 or 1");
  s.query = parse_behavior_line(line.substr(tab + 1), line_no);
  return s;
}

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw data_error("cannot open '" + p.string() + "' for writing");
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& p, std::string_view producer = {}) {
  std::ifstream in(p, std::ios::binary);
  if (!in) {
    std::string msg = "missing artifact '" + p.string() + "'";
    if (!producer.empty()) msg += "; run `" + std::string(producer) + "` first";
    throw data_error(msg);
  }
  return in;
}

}  // namespace detail

/// Writes behaviors.tsv, samples.tsv and raw.json into `dir`.
inline void save_raw_dataset(const raw_dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    auto out = detail::open_out(dir / "behaviors.tsv");
    for (const auto& e : d.behaviors) out << format_behavior_line(e) << '\n';
  }
  {
    auto out = detail::open_out(dir / "samples.tsv");
    for (const auto& s : d.samples) out << format_sample_line(s) << '\n';
  }
  nlohmann::json j;
  j["spatial"] = to_string(d.spatial);
  j["behaviors"] = d.behaviors.size();
  j["samples"] = d.samples.size();
  auto out = detail::open_out(dir / "raw.json");
  out << j.dump(2) << '\n';
}

inline raw_dataset load_raw_dataset(const std::filesystem::path& dir) {
  raw_dataset d;
  {
    auto in = detail::open_in(dir / "raw.json", "gen-data");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
      d.spatial = parse_spatial_source(j.at("spatial").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw format_error("raw.json: " + std::string(e.what()));
    }
  }
  {
    auto in = detail::open_in(dir / "behaviors.tsv", "gen-data");
    d.behaviors = read_behavior_log(in);
  }
  auto in = detail::open_in(dir / "samples.tsv", "gen-data");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    d.samples.push_back(parse_sample_line(detail::strip_cr(line), line_no));
  }
  return d;
}

}  // namespace fin
