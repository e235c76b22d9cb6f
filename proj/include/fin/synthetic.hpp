#pragma once

// Seeded food-delivery style behavior generator. Each user has a few fixed
// locations (home, work, ...), a general category taste, a favoured category
// per (location, coarse meal period), a craving that changes every 30 days,
// and a tendency to reorder from restaurants they already used.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "fin/raw.hpp"
#include "fin/rng.hpp"
#include "fin/stkeys.hpp"

namespace fin {

struct synthetic_spec {
  std::size_t users = 5000;
  std::size_t items = 500;
  std::size_t categories = 10;
  std::size_t cells_per_user = 2;  // home, work, then extra places
  std::size_t behaviors_per_user = 150;
  std::size_t queries_per_user = 2;
  // Reorder probability is c / (1 + c); infinity means always reorder.
  double concentration = 1.0;
  bool meal_preference = true;  // favourite depends on the meal period, not just the place
  double favored_weight = 0.5;
  double craving_weight = 0.2;
  double taste_spread = 1.5;
  std::size_t history_days = 400;
  std::uint64_t seed = 7;

  void validate() const {
    if (users < 1 || items < 1 || categories < 1 || cells_per_user < 1 || behaviors_per_user < 1 ||
        queries_per_user < 1 || history_days < 1) {
      throw config_error("synthetic spec counts must all be >= 1");
    }
    if (items < categories) throw config_error("synthetic spec needs at least one item per category");
    if (!(concentration > 0.0)) throw config_error("concentration must be > 0");
    if (favored_weight < 0.0 || craving_weight < 0.0 || favored_weight + craving_weight > 1.0) {
      throw config_error("favored_weight and craving_weight must be >= 0 and sum to <= 1");
    }
  }

  double reorder_probability() const {
    return std::isinf(concentration) ? 1.0 : concentration / (1.0 + concentration);
  }
};

struct coarse_period {
  const char* name;
  int begin_minute;  // inclusive
  int end_minute;    // exclusive
  double weight;
};

inline constexpr std::array<coarse_period, 5> coarse_periods = {{
    {"breakfast", 7 * 60, 9 * 60 + 30, 0.15},
    {"lunch", 11 * 60, 13 * 60 + 30, 0.35},
    {"afternoon", 14 * 60 + 30, 16 * 60 + 30, 0.10},
    {"dinner", 17 * 60, 20 * 60, 0.30},
    {"late_night", 21 * 60, 24 * 60, 0.10},
}};

inline constexpr geo_bbox synthetic_area{31.13, 31.33, 121.37, 121.57};
inline constexpr timestamp_t synthetic_epoch = 1609459200;  // 2021-01-01T00:00:00Z

struct synthetic_dataset {
  raw_dataset raw;
  // Click probability of each sample's item under the generating process.
  std::vector<double> oracle;
};

namespace detail {

inline std::string synthetic_user(std::size_t u) { return "u" + std::to_string(u); }
inline std::string synthetic_item(std::size_t i) { return "i" + std::to_string(i); }
inline std::string synthetic_category(std::size_t c) { return "c" + std::to_string(c); }

class synthetic_user_model {
 public:
  synthetic_user_model(const synthetic_spec& spec, std::size_t index)
      : spec_(spec), seed_(derive_seed(spec.seed, index)), r_(seed_) {
    for (std::size_t k = 0; k < spec.cells_per_user; ++k) {
      cells_.push_back({r_.uniform(synthetic_area.lat_min, synthetic_area.lat_max),
                        r_.uniform(synthetic_area.lon_min, synthetic_area.lon_max)});
    }
    taste_.resize(spec.categories);
    double total = 0.0;
    for (auto& t : taste_) {
      t = std::exp(spec.taste_spread * gaussian());
      total += t;
    }
    for (auto& t : taste_) t /= total;
    favored_.assign(spec.cells_per_user, std::vector<std::size_t>(coarse_periods.size()));
    for (auto& row : favored_) {
      for (auto& f : row) f = r_.below(spec.categories);
      if (!spec.meal_preference) std::fill(row.begin(), row.end(), row[0]);
    }
  }

  rng& random() { return r_; }
  const geo_point& cell(std::size_t k) const { return cells_[k]; }

  std::size_t choose_period() {
    std::vector<double> w;
    for (const auto& p : coarse_periods) w.push_back(p.weight);
    return r_.weighted(w);
  }

  // Weekday lunch and afternoon orders come mostly from work, the rest mostly
  // from home; extra places take an occasional share.
  std::size_t choose_cell(std::size_t day, std::size_t period) {
    if (cells_.size() == 1) return 0;
    const bool weekday = day % 7 < 5;
    const bool office_hours = period == 1 || period == 2;
    const std::size_t primary = weekday && office_hours ? 1 : 0;
    std::size_t cell = r_.uniform() < 0.85 ? primary : 1 - primary;
    if (cells_.size() > 2 && r_.uniform() < 0.1) cell = 2 + r_.below(cells_.size() - 2);
    return cell;
  }

  std::size_t craving(std::size_t day) const {
    rng cr(derive_seed(seed_, 0xc0ffee00ULL + day / 30));
    return cr.below(spec_.categories);
  }

  std::size_t choose_category(std::size_t cell, std::size_t period, std::size_t day) {
    const double u = r_.uniform();
    if (u < spec_.favored_weight) return favored_[cell][period];
    if (u < spec_.favored_weight + spec_.craving_weight) return craving(day);
    return r_.weighted(taste_);
  }

  std::size_t choose_item(std::size_t category) {
    const double rho = spec_.reorder_probability();
    if (rho >= 1.0 && total_clicks_ > 0) return weighted_past(nullptr);
    const auto it = by_category_.find(category);
    if (it != by_category_.end() && r_.uniform() < rho) return weighted_past(&it->second);
    return category + spec_.categories * r_.below(items_in(category));
  }

  /// Probability the next order in this context is `item`.
  double probability(std::size_t item, std::size_t cell, std::size_t period, std::size_t day) const {
    const double rho = spec_.reorder_probability();
    if (rho >= 1.0 && total_clicks_ > 0) {
      const auto it = counts_.find(item);
      return it == counts_.end() ? 0.0 : static_cast<double>(it->second) / static_cast<double>(total_clicks_);
    }
    const std::size_t c = item % spec_.categories;
    double pc = (1.0 - spec_.favored_weight - spec_.craving_weight) * taste_[c];
    if (favored_[cell][period] == c) pc += spec_.favored_weight;
    if (craving(day) == c) pc += spec_.craving_weight;
    const double uniform = 1.0 / static_cast<double>(items_in(c));
    double pi = uniform;
    const auto cat = by_category_.find(c);
    if (cat != by_category_.end()) {
      const auto it = counts_.find(item);
      const double own = it == counts_.end() ? 0.0 : static_cast<double>(it->second);
      pi = rho * own / static_cast<double>(category_clicks_.at(c)) + (1.0 - rho) * uniform;
    }
    return pc * pi;
  }

  void record(std::size_t item) {
    const std::size_t c = item % spec_.categories;
    if (counts_[item]++ == 0) by_category_[c].push_back(item);
    ++category_clicks_[c];
    ++total_clicks_;
  }

  bool clicked(std::size_t item) const { return counts_.count(item) != 0; }
  std::size_t distinct_items() const { return counts_.size(); }

 private:
  std::size_t items_in(std::size_t c) const {
    return (spec_.items - c + spec_.categories - 1) / spec_.categories;
  }

  std::size_t weighted_past(const std::vector<std::size_t>* pool) {
    std::vector<std::size_t> ids;
    if (pool) {
      ids = *pool;
    } else {
      for (const auto& [item, n] : counts_) ids.push_back(item);
    }
    std::vector<double> w;
    for (std::size_t i : ids) w.push_back(static_cast<double>(counts_.at(i)));
    return ids[r_.weighted(w)];
  }

  double gaussian() {
    const double u1 = 1.0 - r_.uniform();
    const double u2 = r_.uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  const synthetic_spec& spec_;
  std::uint64_t seed_;
  rng r_;
  std::vector<geo_point> cells_;
  std::vector<double> taste_;
  std::vector<std::vector<std::size_t>> favored_;
  std::map<std::size_t, std::size_t> counts_;
  std::map<std::size_t, std::vector<std::size_t>> by_category_;
  std::map<std::size_t, std::size_t> category_clicks_;
  std::size_t total_clicks_ = 0;
};

}  // namespace detail

/// Every user's timeline is generated in order; their last `queries_per_user`
/// orders become positive samples, each paired with a uniformly drawn item
/// the user never ordered, shown at the same time and place.
inline synthetic_dataset generate_synthetic(const synthetic_spec& spec) {
  spec.validate();
  synthetic_dataset out;
  out.raw.spatial = spatial_source::geohash;
  for (std::size_t u = 0; u < spec.users; ++u) {
    detail::synthetic_user_model user(spec, u);
    rng& r = user.random();
    const double scale = 0.5 + r.uniform();
    const std::size_t n = std::max<std::size_t>(
        spec.queries_per_user + 1, static_cast<std::size_t>(std::llround(scale * static_cast<double>(spec.behaviors_per_user))));
    struct slot {
      std::size_t day, period, cell;
      timestamp_t ts;
    };
    std::vector<slot> slots(n);
    for (auto& s : slots) {
      s.day = r.below(spec.history_days);
      s.period = user.choose_period();
      const auto& cp = coarse_periods[s.period];
      const auto minute = static_cast<timestamp_t>(cp.begin_minute + static_cast<int>(r.below(
                                                                         static_cast<std::size_t>(cp.end_minute - cp.begin_minute))));
      s.ts = synthetic_epoch + static_cast<timestamp_t>(s.day) * seconds_per_day + minute * 60 +
             static_cast<timestamp_t>(r.below(60));
    }
    std::sort(slots.begin(), slots.end(), [](const slot& a, const slot& b) { return a.ts < b.ts; });
    // Equal timestamps would make a query's own history ambiguous.
    for (std::size_t i = 1; i < slots.size(); ++i) slots[i].ts = std::max(slots[i].ts, slots[i - 1].ts + 1);

    std::vector<std::pair<std::size_t, std::size_t>> queries;  // (slot index, item)
    for (std::size_t i = 0; i < n; ++i) {
      auto& s = slots[i];
      s.cell = user.choose_cell(s.day, s.period);
      const std::size_t category = user.choose_category(s.cell, s.period, s.day);
      const std::size_t item = user.choose_item(category);
      if (i + spec.queries_per_user >= n) {
        const double p_pos = user.probability(item, s.cell, s.period, s.day);
        queries.emplace_back(i, item);
        raw_sample pos;
        pos.label = 1;
        pos.query = {detail::synthetic_user(u), detail::synthetic_item(item),
                     detail::synthetic_category(item % spec.categories), user.cell(s.cell).lat,
                     user.cell(s.cell).lon, s.ts, {}};
        out.raw.samples.push_back(pos);
        out.oracle.push_back(p_pos);
        if (user.distinct_items() + (user.clicked(item) ? 0 : 1) < spec.items) {
          std::size_t neg = 0;
          do {
            neg = r.below(spec.items);
          } while (user.clicked(neg) || neg == item);
          raw_sample ns = pos;
          ns.label = 0;
          ns.query.item_id = detail::synthetic_item(neg);
          ns.query.category_id = detail::synthetic_category(neg % spec.categories);
          out.raw.samples.push_back(ns);
          out.oracle.push_back(user.probability(neg, s.cell, s.period, s.day));
        }
      }
      user.record(item);
      out.raw.behaviors.push_back({detail::synthetic_user(u), detail::synthetic_item(item),
                                   detail::synthetic_category(item % spec.categories), user.cell(s.cell).lat,
                                   user.cell(s.cell).lon, s.ts, {}});
    }
  }
  return out;
}

}  // namespace fin
