#pragma once

// Lifelong behavior storage and the hard-search extraction of the four
// sub-sequences (geohash block, meal time, short term, long-term dedup).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fin/errors.hpp"
#include "fin/stkeys.hpp"

namespace fin {

using timestamp_t = std::int64_t;

inline constexpr timestamp_t seconds_per_day = 86400;

inline constexpr std::string_view time_interval_key = "time_interval";

struct behavior_event {
  std::string item_id;
  std::string category_id;
  std::string geohash;  // spatial key; a price-bin token for review data without coordinates
  int period_id = 0;
  timestamp_t timestamp = 0;
  std::vector<std::pair<std::string, std::string>> extra;
  int click_count = 1;

  std::optional<std::string_view> extra_value(std::string_view key) const {
    for (const auto& [k, v] : extra) {
      if (k == key) return std::string_view(v);
    }
    return std::nullopt;
  }

  void set_extra(std::string key, std::string value) {
    for (auto& [k, v] : extra) {
      if (k == key) {
        v = std::move(value);
        return;
      }
    }
    extra.emplace_back(std::move(key), std::move(value));
  }

  bool operator==(const behavior_event&) const = default;
};

struct lifelong_sequence {
  std::string user_id;
  std::vector<behavior_event> events;  // ascending timestamp

  bool is_sorted() const {
    return std::is_sorted(events.begin(), events.end(),
                          [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
  }
};

struct query_context {
  behavior_event query_item;  // geohash and period_id describe the request
  timestamp_t request_time = 0;
  int short_term_window_days = 30;
  int long_term_window_days = 365;
};

struct retrieval_caps {
  std::size_t geohash_block = 200;
  std::size_t meal_time = 200;
  std::size_t short_term = 20;
  std::size_t long_term = 100;
};

struct subsequence_bundle {
  std::vector<behavior_event> geohash_block;
  std::vector<behavior_event> meal_time;
  std::vector<behavior_event> short_term;
  std::vector<behavior_event> long_term_dedup;
};

// log2 bucket of elapsed whole days: 0 for under a day, then 1 + floor(log2(days)),
// capped at 15.
inline int time_interval_bucket(timestamp_t elapsed_seconds) {
  const timestamp_t days = std::max<timestamp_t>(0, elapsed_seconds) / seconds_per_day;
  if (days == 0) return 0;
  int b = 1;
  for (timestamp_t d = days; d > 1; d >>= 1) ++b;
  return std::min(b, 15);
}

// Same log2 scheme for click counts (count 1 -> bucket 1).
inline int click_count_bucket(int count) {
  if (count <= 0) return 0;
  int b = 1;
  for (int c = count; c > 1; c >>= 1) ++b;
  return std::min(b, 15);
}

namespace detail {

// Index range [first, last) of events with timestamp in [from, to).
inline std::pair<std::size_t, std::size_t> window(const lifelong_sequence& seq, timestamp_t from,
                                                  timestamp_t to) {
  const auto by_time = [](const behavior_event& e, timestamp_t t) { return e.timestamp < t; };
  const auto lo = std::lower_bound(seq.events.begin(), seq.events.end(), from, by_time);
  const auto hi = std::lower_bound(lo, seq.events.end(), to, by_time);
  return {static_cast<std::size_t>(lo - seq.events.begin()),
          static_cast<std::size_t>(hi - seq.events.begin())};
}

inline timestamp_t long_window_start(const query_context& q) {
  return q.request_time - static_cast<timestamp_t>(q.long_term_window_days) * seconds_per_day;
}

template <typename Pred>
std::vector<behavior_event> newest_matching(const lifelong_sequence& seq, timestamp_t from,
                                            timestamp_t to, std::size_t cap, Pred pred) {
  std::vector<behavior_event> out;
  const auto [first, last] = window(seq, from, to);
  for (std::size_t i = last; i > first && out.size() < cap; --i) {
    const auto& e = seq.events[i - 1];
    if (pred(e)) out.push_back(e);
  }
  return out;
}

inline void require_cap(std::size_t cap) {
  if (cap < 1) throw input_domain_error("retrieval cap must be >= 1");
}

}  // namespace detail

/// Events of the long-term window sharing the query geohash, newest first.
inline std::vector<behavior_event> extract_geohash_block(const lifelong_sequence& seq,
                                                         const query_context& q, std::size_t cap) {
  detail::require_cap(cap);
  const std::string& key = q.query_item.geohash;
  return detail::newest_matching(seq, detail::long_window_start(q), q.request_time, cap,
                                 [&](const behavior_event& e) { return e.geohash == key; });
}

inline std::vector<behavior_event> extract_mealtime(const lifelong_sequence& seq,
                                                    const query_context& q, std::size_t cap) {
  detail::require_cap(cap);
  const int period = q.query_item.period_id;
  return detail::newest_matching(seq, detail::long_window_start(q), q.request_time, cap,
                                 [&](const behavior_event& e) { return e.period_id == period; });
}

inline std::vector<behavior_event> extract_short_term(const lifelong_sequence& seq,
                                                      const query_context& q, std::size_t cap) {
  detail::require_cap(cap);
  const timestamp_t from =
      q.request_time - static_cast<timestamp_t>(q.short_term_window_days) * seconds_per_day;
  return detail::newest_matching(seq, from, q.request_time, cap,
                                 [](const behavior_event&) { return true; });
}

/// Groups the long-term window by item. Each output event is the item's latest
/// occurrence with click_count summed over the group and the bucketed time since
/// that occurrence stored under the "time_interval" extra key. Ordered by latest
/// timestamp descending (ties by item id ascending), then truncated to cap.
inline std::vector<behavior_event> dedup_long_term(const lifelong_sequence& seq,
                                                   const query_context& q, std::size_t cap) {
  detail::require_cap(cap);
  const auto [first, last] = detail::window(seq, detail::long_window_start(q), q.request_time);
  std::unordered_map<std::string_view, std::size_t> slot;
  std::vector<behavior_event> groups;
  for (std::size_t i = last; i > first; --i) {
    const auto& e = seq.events[i - 1];
    auto [it, inserted] = slot.try_emplace(e.item_id, groups.size());
    if (inserted) {
      groups.push_back(e);
    } else {
      auto& g = groups[it->second];
      g.click_count += e.click_count;
      // Equal timestamps: keep the event stored last in the sequence.
    }
  }
  std::stable_sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) {
    if (a.timestamp != b.timestamp) return a.timestamp > b.timestamp;
    return a.item_id < b.item_id;
  });
  if (groups.size() > cap) groups.resize(cap);
  for (auto& g : groups) {
    g.set_extra(std::string(time_interval_key),
                std::to_string(time_interval_bucket(q.request_time - g.timestamp)));
  }
  return groups;
}

inline subsequence_bundle build_bundle(const lifelong_sequence& seq, const query_context& q,
                                       const retrieval_caps& caps = {}) {
  subsequence_bundle b;
  b.geohash_block = extract_geohash_block(seq, q, caps.geohash_block);
  b.meal_time = extract_mealtime(seq, q, caps.meal_time);
  b.short_term = extract_short_term(seq, q, caps.short_term);
  b.long_term_dedup = dedup_long_term(seq, q, caps.long_term);
  return b;
}

/// Raw click record as it appears in a behavior log, before keys are derived.
struct raw_event {
  std::string user_id;
  std::string item_id;
  std::string category_id;
  double lat = 0.0;
  double lon = 0.0;
  timestamp_t timestamp = 0;
  std::vector<std::pair<std::string, std::string>> extra;
};

/// Parses `user \t item \t category \t lat \t lon \t timestamp \t extra_json`.
/// The extra column is a flat JSON object (or empty); values become strings.
raw_event parse_behavior_line(std::string_view line, std::size_t line_no);

/// Read-only per-user index of lifelong sequences.
class behavior_store {
 public:
  behavior_store() = default;

  /// Derives geohash (at `precision`) and meal-time period for every record.
  static behavior_store build(const std::vector<raw_event>& events, const mealtime_binner& binner,
                              int precision) {
    behavior_store s;
    for (const auto& r : events) {
      behavior_event e;
      e.item_id = r.item_id;
      e.category_id = r.category_id;
      e.geohash = geohash_encode({r.lat, r.lon}, precision);
      e.period_id = binner.assign(minute_of_day(r.timestamp));
      e.timestamp = r.timestamp;
      e.extra = r.extra;
      s.add(r.user_id, std::move(e));
    }
    s.finalize();
    return s;
  }

  void add(const std::string& user_id, behavior_event e) {
    if (e.timestamp <= 0) throw data_error("behavior timestamp must be positive");
    if (e.click_count < 1) throw data_error("click_count must be >= 1");
    auto [it, inserted] = index_.try_emplace(user_id, sequences_.size());
    if (inserted) sequences_.push_back(lifelong_sequence{user_id, {}});
    sequences_[it->second].events.push_back(std::move(e));
  }

  // Sorts every sequence by timestamp; ties keep insertion order.
  void finalize() {
    for (auto& s : sequences_) {
      std::stable_sort(s.events.begin(), s.events.end(),
                       [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
    }
  }

  const lifelong_sequence& sequence(const std::string& user_id) const {
    static const lifelong_sequence empty{};
    const auto it = index_.find(user_id);
    return it == index_.end() ? empty : sequences_[it->second];
  }

  std::size_t user_count() const { return sequences_.size(); }
  const std::vector<lifelong_sequence>& sequences() const { return sequences_; }

  std::size_t event_count() const {
    std::size_t n = 0;
    for (const auto& s : sequences_) n += s.events.size();
    return n;
  }

 private:
  std::vector<lifelong_sequence> sequences_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace fin

#include "fin/detail/behavior_log.hpp"
