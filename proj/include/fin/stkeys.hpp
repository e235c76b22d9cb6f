#pragma once

// Spatial and temporal retrieval keys: geohash cells and equal-frequency
// meal-time periods.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "fin/errors.hpp"

namespace fin {

struct geo_point {
  double lat = 0.0;
  double lon = 0.0;
};

struct geo_bbox {
  double lat_min = -90.0;
  double lat_max = 90.0;
  double lon_min = -180.0;
  double lon_max = 180.0;

  bool contains(const geo_point& p) const {
    return p.lat >= lat_min && p.lat <= lat_max && p.lon >= lon_min && p.lon <= lon_max;
  }
  bool contains(const geo_bbox& other) const {
    return other.lat_min >= lat_min && other.lat_max <= lat_max && other.lon_min >= lon_min &&
           other.lon_max <= lon_max;
  }
  geo_point center() const { return {(lat_min + lat_max) / 2.0, (lon_min + lon_max) / 2.0}; }
};

inline constexpr std::string_view geohash_alphabet = "0123456789bcdefghjkmnpqrstuvwxyz";
inline constexpr int geohash_max_precision = 12;

inline void validate(const geo_point& p) {
  if (!std::isfinite(p.lat) || !std::isfinite(p.lon) || p.lat < -90.0 || p.lat > 90.0 ||
      p.lon < -180.0 || p.lon > 180.0) {
    std::ostringstream msg;
    msg << "coordinate out of range: lat=" << p.lat << " lon=" << p.lon;
    throw input_domain_error(msg.str());
  }
}

// Standard geohash: bits alternate longitude/latitude starting with longitude,
// five bits per base-32 character.
inline std::string geohash_encode(const geo_point& p, int precision) {
  validate(p);
  if (precision < 1 || precision > geohash_max_precision) {
    throw input_domain_error("geohash precision must be in [1, 12], got " +
                             std::to_string(precision));
  }
  double lat_lo = -90.0, lat_hi = 90.0;
  double lon_lo = -180.0, lon_hi = 180.0;
  std::string code;
  code.reserve(static_cast<std::size_t>(precision));
  bool even = true;
  int bit = 0;
  int ch = 0;
  while (static_cast<int>(code.size()) < precision) {
    if (even) {
      const double mid = (lon_lo + lon_hi) / 2.0;
      if (p.lon >= mid) {
        ch = (ch << 1) | 1;
        lon_lo = mid;
      } else {
        ch <<= 1;
        lon_hi = mid;
      }
    } else {
      const double mid = (lat_lo + lat_hi) / 2.0;
      if (p.lat >= mid) {
        ch = (ch << 1) | 1;
        lat_lo = mid;
      } else {
        ch <<= 1;
        lat_hi = mid;
      }
    }
    even = !even;
    if (++bit == 5) {
      code.push_back(geohash_alphabet[static_cast<std::size_t>(ch)]);
      bit = 0;
      ch = 0;
    }
  }
  return code;
}

inline bool is_valid_geohash(std::string_view code) {
  if (code.empty() || code.size() > static_cast<std::size_t>(geohash_max_precision)) return false;
  return std::all_of(code.begin(), code.end(),
                     [](char c) { return geohash_alphabet.find(c) != std::string_view::npos; });
}

inline geo_bbox geohash_decode_bbox(std::string_view code) {
  if (code.empty() || code.size() > static_cast<std::size_t>(geohash_max_precision)) {
    throw format_error("geohash length must be in [1, 12]: '" + std::string(code) + "'");
  }
  geo_bbox box;
  bool even = true;
  for (char c : code) {
    const auto idx = geohash_alphabet.find(c);
    if (idx == std::string_view::npos) {
      throw format_error("invalid geohash character '" + std::string(1, c) + "' in '" +
                         std::string(code) + "'");
    }
    for (int shift = 4; shift >= 0; --shift) {
      const bool set = (idx >> shift) & 1U;
      if (even) {
        const double mid = (box.lon_min + box.lon_max) / 2.0;
        (set ? box.lon_min : box.lon_max) = mid;
      } else {
        const double mid = (box.lat_min + box.lat_max) / 2.0;
        (set ? box.lat_min : box.lat_max) = mid;
      }
      even = !even;
    }
  }
  return box;
}

// Clock time to minute of day. Seconds are dropped.
inline int minute_of_day(int hh, int mm) {
  if (hh < 0 || hh > 23 || mm < 0 || mm > 59) {
    throw input_domain_error("clock time out of range: " + std::to_string(hh) + ":" +
                             std::to_string(mm));
  }
  return hh * 60 + mm;
}

// Timestamps are taken to be local time already.
inline int minute_of_day(std::int64_t timestamp) {
  std::int64_t s = timestamp % 86400;
  if (s < 0) s += 86400;
  return static_cast<int>(s / 60);
}

/// Equal-frequency binner. Boundaries sit at the sorted-rank quantiles
/// floor(i*n/M), i = 1..M-1; repeated boundaries (and any equal to the
/// minimum, which would leave bin 0 empty) are merged, so the number of
/// effective bins can be smaller than M. A value maps to the number of
/// boundaries that are <= it.
template <typename T>
class quantile_binner {
  static_assert(std::is_arithmetic_v<T>);

 public:
  quantile_binner() = default;
  quantile_binner(int period_count, std::vector<T> boundaries)
      : period_count_(period_count), boundaries_(std::move(boundaries)) {
    if (period_count_ < 1) throw fit_error("bin count must be >= 1");
    for (std::size_t i = 1; i < boundaries_.size(); ++i) {
      if (!(boundaries_[i - 1] < boundaries_[i])) {
        throw fit_error("binner boundaries must be strictly increasing");
      }
    }
    if (static_cast<int>(boundaries_.size()) + 1 > period_count_) {
      throw fit_error("more boundaries than bins allow");
    }
  }

  static quantile_binner fit(std::vector<T> values, int bins) {
    if (values.empty()) throw fit_error("cannot fit a binner on an empty sample");
    if (bins < 1) throw fit_error("bin count must be >= 1, got " + std::to_string(bins));
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    std::vector<T> cuts;
    for (int i = 1; i < bins; ++i) {
      const T cut = values[static_cast<std::size_t>(i) * n / static_cast<std::size_t>(bins)];
      if (cut <= values.front()) continue;
      if (!cuts.empty() && cut <= cuts.back()) continue;
      cuts.push_back(cut);
    }
    return quantile_binner(bins, std::move(cuts));
  }

  int assign(T value) const {
    return static_cast<int>(std::upper_bound(boundaries_.begin(), boundaries_.end(), value) -
                            boundaries_.begin());
  }

  int period_count() const { return period_count_; }
  int effective_bins() const { return static_cast<int>(boundaries_.size()) + 1; }
  const std::vector<T>& boundaries() const { return boundaries_; }

  bool operator==(const quantile_binner&) const = default;

  void save(std::ostream& out) const {
    out << "M=" << period_count_ << '\n';
    for (const T& b : boundaries_) {
      out << format_value(b) << '\n';
    }
  }

  static quantile_binner load(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line.rfind("M=", 0) != 0) {
      throw format_error("binner file must start with 'M=<int>'");
    }
    const int m = parse_int(std::string_view(line).substr(2), 1);
    std::vector<T> bounds;
    int line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      bounds.push_back(parse_value(line, line_no));
    }
    try {
      return quantile_binner(m, std::move(bounds));
    } catch (const fit_error& e) {
      throw format_error(std::string("invalid binner file: ") + e.what());
    }
  }

 private:
  static std::string format_value(T v) {
    if constexpr (std::is_integral_v<T>) {
      return std::to_string(v);
    } else {
      std::array<char, 64> buf{};
      auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
      return std::string(buf.data(), res.ptr);
    }
  }

  static int parse_int(std::string_view s, int line_no) {
    int v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      throw format_error("binner file line " + std::to_string(line_no) + ": expected integer");
    }
    return v;
  }

  static T parse_value(std::string_view s, int line_no) {
    T v{};
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      throw format_error("binner file line " + std::to_string(line_no) + ": bad boundary '" +
                         std::string(s) + "'");
    }
    return v;
  }

  int period_count_ = 1;
  std::vector<T> boundaries_;
};

inline constexpr int default_meal_periods = 95;

using mealtime_binner = quantile_binner<int>;

inline mealtime_binner fit_mealtime_binner(const std::vector<int>& minutes,
                                           int periods = default_meal_periods) {
  for (int m : minutes) {
    if (m < 0 || m > 1439) throw input_domain_error("minute of day out of range: " + std::to_string(m));
  }
  return mealtime_binner::fit(minutes, periods);
}

inline int assign_period(const mealtime_binner& binner, int minute) { return binner.assign(minute); }

}  // namespace fin
