#pragma once

// Test-side oracles and fixtures. The oracles are deliberately naive: they
// recompute results from definitions without reusing library internals.

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fin/fin.hpp"

namespace fin::testing {

inline constexpr timestamp_t day = 86400;

// Random lifelong sequence over a small key space so matches are common.
inline lifelong_sequence random_sequence(std::mt19937_64& g, std::size_t max_len, timestamp_t start,
                                         timestamp_t span) {
  std::uniform_int_distribution<std::size_t> len(0, max_len);
  std::uniform_int_distribution<int> small(0, 3);
  std::uniform_int_distribution<timestamp_t> when(start, start + span);
  lifelong_sequence s;
  s.user_id = "u";
  const std::size_t n = len(g);
  for (std::size_t i = 0; i < n; ++i) {
    behavior_event e;
    e.item_id = "i" + std::to_string(small(g) + small(g));
    e.category_id = "c" + std::to_string(small(g));
    e.geohash = "g" + std::to_string(small(g));
    e.period_id = small(g);
    e.timestamp = when(g);
    s.events.push_back(e);
  }
  std::stable_sort(s.events.begin(), s.events.end(),
                   [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
  return s;
}

template <typename Pred>
std::vector<behavior_event> brute_filter(const lifelong_sequence& s, timestamp_t from, timestamp_t to,
                                         std::size_t cap, Pred pred) {
  std::vector<behavior_event> hits;
  for (const auto& e : s.events)
    if (e.timestamp >= from && e.timestamp < to && pred(e)) hits.push_back(e);
  std::reverse(hits.begin(), hits.end());
  if (hits.size() > cap) hits.resize(cap);
  return hits;
}

struct dedup_row {
  std::string item;
  int count;
  timestamp_t last;
};

// Group-by-item over the long window, sorted by last occurrence descending
// then item ascending.
inline std::vector<dedup_row> brute_dedup(const lifelong_sequence& s, const query_context& q) {
  const timestamp_t from = q.request_time - q.long_term_window_days * day;
  std::map<std::string, dedup_row> groups;
  for (const auto& e : s.events) {
    if (e.timestamp < from || e.timestamp >= q.request_time) continue;
    auto [it, fresh] = groups.try_emplace(e.item_id, dedup_row{e.item_id, 0, e.timestamp});
    it->second.count += e.click_count;
    it->second.last = std::max(it->second.last, e.timestamp);
  }
  std::vector<dedup_row> out;
  for (auto& [k, v] : groups) out.push_back(v);
  std::sort(out.begin(), out.end(), [](const dedup_row& a, const dedup_row& b) {
    return a.last != b.last ? a.last > b.last : a.item < b.item;
  });
  return out;
}

// Probability that a random positive outscores a random negative, ties half.
inline double pair_count_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

// Geohash by explicit interval halving, longitude first.
inline std::string reference_geohash(double lat, double lon, int precision) {
  static const char* alphabet = "0123456789bcdefghjkmnpqrstuvwxyz";
  double lat_lo = -90, lat_hi = 90, lon_lo = -180, lon_hi = 180;
  std::string out;
  int bit = 0, value = 0;
  bool even = true;
  while (static_cast<int>(out.size()) < precision) {
    if (even) {
      const double mid = (lon_lo + lon_hi) / 2;
      value = value * 2 + (lon >= mid ? 1 : 0);
      (lon >= mid ? lon_lo : lon_hi) = mid;
    } else {
      const double mid = (lat_lo + lat_hi) / 2;
      value = value * 2 + (lat >= mid ? 1 : 0);
      (lat >= mid ? lat_lo : lat_hi) = mid;
    }
    even = !even;
    if (++bit == 5) {
      out += alphabet[value];
      bit = 0;
      value = 0;
    }
  }
  return out;
}

// Random encoded sample with all channels populated (or empty on request).
struct sample_shape {
  std::array<std::size_t, max_field_count> vocab{30, 8, 6, 10, 16, 16};
  std::size_t users = 5;
  std::array<std::size_t, channel_count> lengths{12, 9, 7, 15};
};

inline encoded_sequence random_channel(std::mt19937_64& g, const sample_shape& sh, std::size_t fields,
                                       std::size_t n) {
  encoded_sequence s;
  s.fields = fields;
  std::vector<std::int32_t> row(fields);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t f = 0; f < fields; ++f) {
      row[f] = static_cast<std::int32_t>(std::uniform_int_distribution<std::size_t>(0, sh.vocab[f] - 1)(g));
    }
    s.push(row, static_cast<double>(std::uniform_int_distribution<int>(1, 4)(g)));
  }
  return s;
}

inline encoded_sample random_sample(std::mt19937_64& g, const sample_shape& sh = {}) {
  encoded_sample s;
  s.user = static_cast<std::int32_t>(std::uniform_int_distribution<std::size_t>(0, sh.users - 1)(g));
  for (std::size_t f = 0; f < base_field_count; ++f) {
    s.input.query[f] = static_cast<std::int32_t>(std::uniform_int_distribution<std::size_t>(1, sh.vocab[f] - 1)(g));
  }
  for (std::size_t c = 0; c < channel_count; ++c) {
    s.input.channels[c] = random_channel(g, sh, fields_of(static_cast<channel>(c)), sh.lengths[c]);
  }
  const std::span<const std::int32_t> q(s.input.query.data(), base_field_count);
  for (std::size_t c = 0; c < 2; ++c) s.input.long_summary[c] = summarize(s.input.channels[c], q);
  s.long_window = summarize(random_channel(g, sh, base_field_count, 20), q);
  s.label = std::uniform_int_distribution<int>(0, 1)(g);
  return s;
}

inline model_config small_config(std::string_view variant = "full_fin", const sample_shape& sh = {}) {
  model_config c;
  c.field_vocab = sh.vocab;
  c.user_vocab = sh.users;
  return apply_variant(c, variant);
}

// Small synthetic pipeline used by several suites.
inline prepared_dataset small_prepared(std::size_t users = 120, std::uint64_t seed = 7) {
  synthetic_spec spec;
  spec.users = users;
  spec.items = 200;
  spec.categories = 10;
  spec.behaviors_per_user = 60;
  spec.seed = seed;
  return prepare(generate_synthetic(spec).raw, prepare_config{});
}

}  // namespace fin::testing
