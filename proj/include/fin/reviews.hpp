#pragma once

// Review-style public datasets: every review is both a behavior and a
// positive request at its own timestamp, paired with one sampled negative.

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fin/raw.hpp"
#include "fin/rng.hpp"

namespace fin {

enum class review_schema {
  amazon,        // user, item, category, timestamp[, price]
  google_local,  // user, item, category, lat, lon, timestamp
};

inline review_schema parse_review_schema(std::string_view s) {
  if (s == "amazon") return review_schema::amazon;
  if (s == "google_local") return review_schema::google_local;
  throw config_error("unknown review schema '" + std::string(s) + "' (amazon, google_local)");
}

struct ingest_options {
  review_schema schema = review_schema::amazon;
  bool skip_malformed = false;
  std::uint64_t seed = 1;
};

struct ingest_result {
  raw_dataset data;
  std::size_t skipped_rows = 0;
  std::size_t skipped_negatives = 0;  // users who reviewed every item
};

struct item_info {
  std::string category;
  std::string price;  // empty when unknown
};

/// `item \t category \t price` lines; fills in category and price for items
/// and makes metadata-only items eligible as negatives.
inline std::map<std::string, item_info> read_item_metadata(std::istream& in) {
  std::map<std::string, item_info> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto s = detail::strip_cr(line);
    if (detail::trim(s).empty()) continue;
    const auto cols = detail::split(s, '\t');
    if (cols.size() < 2 || cols.size() > 3 || cols[0].empty()) {
      throw format_error("metadata line " + std::to_string(line_no) + ": expected item<TAB>category[<TAB>price]");
    }
    item_info info{std::string(cols[1]), cols.size() == 3 ? std::string(detail::trim(cols[2])) : std::string()};
    if (!info.price.empty()) (void)detail::parse_number<double>(info.price, "price", line_no);
    out[std::string(cols[0])] = std::move(info);
  }
  return out;
}

namespace detail {

inline raw_event parse_review_line(std::string_view line, std::size_t line_no, review_schema schema) {
  const auto cols = split(strip_cr(line), '\t');
  const auto where = "line " + std::to_string(line_no) + ": ";
  raw_event e;
  if (schema == review_schema::amazon) {
    if (cols.size() != 4 && cols.size() != 5) throw format_error(where + "expected 4 or 5 tab-separated columns");
    e.timestamp = parse_number<timestamp_t>(cols[3], "timestamp", line_no);
    if (cols.size() == 5 && !trim(cols[4]).empty()) {
      const auto price = trim(cols[4]);
      (void)parse_number<double>(price, "price", line_no);
      e.extra.emplace_back(std::string(price_key), std::string(price));
    }
  } else {
    if (cols.size() != 6) throw format_error(where + "expected 6 tab-separated columns");
    e.lat = parse_number<double>(cols[3], "lat", line_no);
    e.lon = parse_number<double>(cols[4], "lon", line_no);
    try {
      validate(geo_point{e.lat, e.lon});
    } catch (const input_domain_error& err) {
      throw format_error(where + err.what());
    }
    e.timestamp = parse_number<timestamp_t>(cols[5], "timestamp", line_no);
  }
  e.user_id = std::string(cols[0]);
  e.item_id = std::string(cols[1]);
  e.category_id = std::string(cols[2]);
  if (e.user_id.empty() || e.item_id.empty()) throw format_error(where + "empty user or item id");
  if (e.timestamp <= 0) throw format_error(where + "timestamp must be > 0");
  return e;
}

}  // namespace detail

/// Parses a review file. Each review becomes a behavior and a positive
/// sample; each positive gets one negative drawn uniformly from the known
/// items the user never reviewed, sharing the positive's time and place.
inline ingest_result ingest_reviews(std::istream& in, const ingest_options& opt,
                                    const std::map<std::string, item_info>& metadata = {}) {
  ingest_result res;
  res.data.spatial = opt.schema == review_schema::amazon ? spatial_source::price : spatial_source::geohash;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    try {
      res.data.behaviors.push_back(detail::parse_review_line(line, line_no, opt.schema));
    } catch (const format_error& e) {
      if (!opt.skip_malformed) throw data_error(e.what());
      ++res.skipped_rows;
    }
  }

  std::map<std::string, item_info> items = metadata;
  for (auto& e : res.data.behaviors) {
    auto& info = items[e.item_id];
    if (info.category.empty()) info.category = e.category_id;
    if (e.category_id.empty()) e.category_id = info.category;
    const std::string price = extra_value(e, price_key);
    if (info.price.empty()) info.price = price;
    if (price.empty() && !info.price.empty()) e.extra.emplace_back(std::string(price_key), info.price);
  }
  std::vector<std::string> catalogue;
  catalogue.reserve(items.size());
  for (const auto& [id, info] : items) catalogue.push_back(id);

  std::unordered_map<std::string, std::unordered_set<std::string>> history;
  for (const auto& e : res.data.behaviors) history[e.user_id].insert(e.item_id);

  // Samples in user order, then time order, so output does not depend on
  // input row order beyond timestamp ties.
  std::vector<std::size_t> order(res.data.behaviors.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto& beh = res.data.behaviors;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (beh[a].user_id != beh[b].user_id) return beh[a].user_id < beh[b].user_id;
    return beh[a].timestamp < beh[b].timestamp;
  });
  rng r(opt.seed);
  for (std::size_t i : order) {
    const raw_event& e = beh[i];
    res.data.samples.push_back({e, 1});
    const auto& seen = history[e.user_id];
    if (seen.size() >= catalogue.size()) {
      ++res.skipped_negatives;
      continue;
    }
    std::string neg;
    do {
      neg = catalogue[r.below(catalogue.size())];
    } while (seen.count(neg) != 0);
    raw_event n = e;
    n.item_id = neg;
    const auto& info = items.at(neg);
    n.category_id = info.category;
    n.extra.clear();
    if (!info.price.empty()) n.extra.emplace_back(std::string(price_key), info.price);
    res.data.samples.push_back({std::move(n), 0});
  }
  return res;
}

inline ingest_result ingest_reviews(const std::filesystem::path& path, const ingest_options& opt,
                                    const std::filesystem::path& metadata_path = {}) {
  auto in = detail::open_in(path);
  std::map<std::string, item_info> meta;
  if (!metadata_path.empty()) {
    auto m = detail::open_in(metadata_path);
    meta = read_item_metadata(m);
  }
  return ingest_reviews(in, opt, meta);
}

}  // namespace fin
