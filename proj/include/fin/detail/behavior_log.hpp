#pragma once

#include <json.hpp>

#include "fin/detail/text.hpp"
#include "fin/store.hpp"

namespace fin {

inline raw_event parse_behavior_line(std::string_view line, std::size_t line_no) {
  const auto cols = detail::split(detail::strip_cr(line), '\t');
  if (cols.size() != 6 && cols.size() != 7) {
    throw format_error("line " + std::to_string(line_no) + ": expected 7 tab-separated columns, got " +
                       std::to_string(cols.size()));
  }
  raw_event r;
  r.user_id = std::string(cols[0]);
  r.item_id = std::string(cols[1]);
  r.category_id = std::string(cols[2]);
  if (r.user_id.empty() || r.item_id.empty()) {
    throw format_error("line " + std::to_string(line_no) + ": empty user or item id");
  }
  r.lat = detail::parse_number<double>(cols[3], "lat", line_no);
  r.lon = detail::parse_number<double>(cols[4], "lon", line_no);
  r.timestamp = detail::parse_number<timestamp_t>(cols[5], "timestamp", line_no);
  if (r.timestamp <= 0) throw format_error("line " + std::to_string(line_no) + ": timestamp must be > 0");
  try {
    validate(geo_point{r.lat, r.lon});
  } catch (const input_domain_error& e) {
    throw format_error("line " + std::to_string(line_no) + ": " + e.what());
  }
  if (cols.size() == 7 && !detail::trim(cols[6]).empty()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(cols[6]);
    } catch (const nlohmann::json::parse_error& e) {
      throw format_error("line " + std::to_string(line_no) + ": bad extra_json: " + e.what());
    }
    if (!j.is_object()) throw format_error("line " + std::to_string(line_no) + ": extra_json must be an object");
    for (const auto& [k, v] : j.items()) {
      r.extra.emplace_back(k, v.is_string() ? v.get<std::string>() : v.dump());
    }
  }
  return r;
}

inline std::string format_behavior_line(const raw_event& r) {
  nlohmann::json extra = nlohmann::json::object();
  for (const auto& [k, v] : r.extra) extra[k] = v;
  std::string line = r.user_id;
  line += '\t';
  line += r.item_id;
  line += '\t';
  line += r.category_id;
  line += '\t';
  line += detail::format_double(r.lat);
  line += '\t';
  line += detail::format_double(r.lon);
  line += '\t';
  line += std::to_string(r.timestamp);
  line += '\t';
  line += extra.dump();
  return line;
}

/// Reads a whole behavior log. Malformed rows either abort (default) or are
/// skipped and counted.
inline std::vector<raw_event> read_behavior_log(std::istream& in, bool skip_malformed = false,
                                                std::size_t* skipped = nullptr) {
  std::vector<raw_event> out;
  std::string line;
  std::size_t line_no = 0;
  std::size_t bad = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    try {
      out.push_back(parse_behavior_line(line, line_no));
    } catch (const format_error&) {
      if (!skip_malformed) throw;
      ++bad;
    }
  }
  if (skipped) *skipped = bad;
  return out;
}

}  // namespace fin
