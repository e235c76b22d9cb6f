#pragma once

// Turns a raw dataset into model-ready form: seeded train/test split,
// meal-time binner and price bins fitted on the training split, a behavior
// store with derived keys, vocabularies frozen on the training split, and
// id-encoded samples. Everything round-trips through a directory.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fin/model.hpp"
#include "fin/raw.hpp"
#include "fin/rng.hpp"
#include "fin/stkeys.hpp"
#include "fin/store.hpp"
#include "fin/vocab.hpp"

namespace fin {

using price_binner = quantile_binner<double>;

inline constexpr int default_price_bins = 48;
inline constexpr std::string_view missing_price_key = "p_na";

struct prepare_config {
  int meal_periods = default_meal_periods;
  int geohash_precision = 6;
  int price_bins = default_price_bins;
  double train_fraction = 0.8;
  std::uint64_t split_seed = 11;
  retrieval_caps caps;
  int short_term_days = 30;
  int long_term_days = 365;

  void validate() const {
    if (meal_periods < 1) throw config_error("meal_periods must be >= 1");
    if (geohash_precision < 1 || geohash_precision > geohash_max_precision) {
      throw config_error("geohash precision must be in 1..12");
    }
    if (price_bins < 1) throw config_error("price_bins must be >= 1");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw config_error("train_fraction must be in (0,1)");
    if (caps.geohash_block < 1 || caps.meal_time < 1 || caps.short_term < 1 || caps.long_term < 1) {
      throw config_error("retrieval caps must be >= 1");
    }
    if (short_term_days < 1 || long_term_days < 1) throw config_error("retrieval windows must be >= 1 day");
  }
};

struct prepared_sample {
  std::string user;
  behavior_event query;  // spatial key and period describe the request
  int label = 0;
  bool train = true;
};

struct oov_stats {
  std::array<std::size_t, max_field_count + 1> lookups{};  // fields, then user
  std::array<std::size_t, max_field_count + 1> misses{};

  std::size_t total_lookups() const {
    std::size_t n = 0;
    for (auto v : lookups) n += v;
    return n;
  }
  std::size_t total_misses() const {
    std::size_t n = 0;
    for (auto v : misses) n += v;
    return n;
  }
  double rate() const {
    const auto n = total_lookups();
    return n == 0 ? 0.0 : static_cast<double>(total_misses()) / static_cast<double>(n);
  }
  bool operator==(const oov_stats&) const = default;
};

struct prepared_dataset {
  spatial_source spatial = spatial_source::geohash;
  prepare_config config;
  behavior_store store;
  std::vector<prepared_sample> samples;
  std::array<vocab_map, max_field_count> fields;
  vocab_map users;
  mealtime_binner binner;
  std::optional<price_binner> prices;
  oov_stats test_oov;

  std::size_t train_count() const {
    std::size_t n = 0;
    for (const auto& s : samples) n += s.train ? 1 : 0;
    return n;
  }
  std::size_t test_count() const { return samples.size() - train_count(); }
};

/// Seeded split over request groups: samples sharing a group id (a request
/// and its sampled negative) always land on the same side. Groups are taken
/// in shuffled order while the training side stays within round(f * n)
/// samples. Returns the train flag per sample.
inline std::vector<bool> split_flags(const std::vector<std::size_t>& group_of, double train_fraction,
                                     std::uint64_t seed) {
  const std::size_t n = group_of.size();
  std::size_t groups = 0;
  for (std::size_t g : group_of) groups = std::max(groups, g + 1);
  std::vector<std::size_t> size(groups, 0);
  for (std::size_t g : group_of) ++size[g];
  std::vector<std::size_t> order(groups);
  for (std::size_t i = 0; i < groups; ++i) order[i] = i;
  rng r(seed);
  r.shuffle(order);
  const auto target = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  std::vector<bool> train_group(groups, false);
  std::size_t taken = 0;
  for (std::size_t g : order) {
    if (taken + size[g] <= target) {
      train_group[g] = true;
      taken += size[g];
    }
  }
  std::vector<bool> flags(n);
  for (std::size_t i = 0; i < n; ++i) flags[i] = train_group[group_of[i]];
  return flags;
}

/// Group id per sample: samples of the same user at the same request time
/// share a group, numbered in order of first appearance.
inline std::vector<std::size_t> request_groups(const std::vector<raw_sample>& samples) {
  std::map<std::pair<std::string, timestamp_t>, std::size_t> ids;
  std::vector<std::size_t> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    const auto [it, inserted] = ids.try_emplace({s.query.user_id, s.query.timestamp}, ids.size());
    out.push_back(it->second);
  }
  return out;
}

namespace detail {

inline std::optional<double> price_of(const raw_event& e) {
  const std::string p = extra_value(e, price_key);
  if (p.empty()) return std::nullopt;
  return parse_number<double>(p, "price", 0);
}

inline std::string spatial_key(const raw_event& e, spatial_source src, int precision,
                               const std::optional<price_binner>& prices) {
  if (src == spatial_source::geohash) return geohash_encode({e.lat, e.lon}, precision);
  const auto p = price_of(e);
  if (!p || !prices) return std::string(missing_price_key);
  return "p" + std::to_string(prices->assign(*p));
}

inline behavior_event derive_event(const raw_event& e, spatial_source src, int precision,
                                   const std::optional<price_binner>& prices, const mealtime_binner& binner) {
  behavior_event b;
  b.item_id = e.item_id;
  b.category_id = e.category_id;
  b.geohash = spatial_key(e, src, precision, prices);
  b.period_id = binner.assign(minute_of_day(e.timestamp));
  b.timestamp = e.timestamp;
  b.extra = e.extra;
  return b;
}

inline query_context make_query(const prepared_sample& s, const prepare_config& cfg) {
  query_context q;
  q.query_item = s.query;
  q.request_time = s.query.timestamp;
  q.short_term_window_days = cfg.short_term_days;
  q.long_term_window_days = cfg.long_term_days;
  return q;
}

inline std::string period_key(int period) { return std::to_string(period); }

inline std::array<std::string, base_field_count> base_keys(const behavior_event& e) {
  return {e.item_id, e.category_id, e.geohash, period_key(e.period_id)};
}

inline std::string click_key(const behavior_event& e) { return std::to_string(click_count_bucket(e.click_count)); }
inline std::string interval_key(const behavior_event& e) {
  return std::string(e.extra_value(time_interval_key).value_or("0"));
}

// Calls visit(field_index, key) for every key a sample's encoding reads; the
// user id is reported as field index max_field_count.
inline void visit_sample_keys(const prepared_dataset& d, const prepared_sample& s,
                              const std::function<void(std::size_t, const std::string&)>& visit) {
  visit(max_field_count, s.user);
  const auto qk = base_keys(s.query);
  for (std::size_t f = 0; f < base_field_count; ++f) visit(f, qk[f]);
  const lifelong_sequence& seq = d.store.sequence(s.user);
  const query_context q = make_query(s, d.config);
  const auto bundle = build_bundle(seq, q, d.config.caps);
  const auto base = [&](const behavior_event& e) {
    const auto k = base_keys(e);
    for (std::size_t f = 0; f < base_field_count; ++f) visit(f, k[f]);
  };
  for (const auto& e : bundle.geohash_block) base(e);
  for (const auto& e : bundle.meal_time) base(e);
  for (const auto& e : bundle.short_term) base(e);
  for (const auto& e : bundle.long_term_dedup) {
    base(e);
    visit(static_cast<std::size_t>(field::click_bucket), click_key(e));
    visit(static_cast<std::size_t>(field::interval_bucket), interval_key(e));
  }
  const auto [first, last] = window(seq, long_window_start(q), q.request_time);
  for (std::size_t i = first; i < last; ++i) base(seq.events[i]);
}

}  // namespace detail

/// Split, fit, index and freeze. Nothing is fitted on test samples: the
/// binner and price bins use training requests only, and vocabularies hold
/// exactly the keys training samples read. Test keys outside them become OOV
/// and are counted in `test_oov`.
inline prepared_dataset prepare(const raw_dataset& raw, const prepare_config& cfg) {
  cfg.validate();
  if (raw.samples.empty()) throw data_error("dataset has no samples");
  prepared_dataset d;
  d.spatial = raw.spatial;
  d.config = cfg;
  const auto flags = split_flags(request_groups(raw.samples), cfg.train_fraction, cfg.split_seed);

  std::vector<int> minutes;
  std::vector<double> prices;
  for (std::size_t i = 0; i < raw.samples.size(); ++i) {
    if (!flags[i]) continue;
    minutes.push_back(minute_of_day(raw.samples[i].query.timestamp));
    if (raw.spatial == spatial_source::price) {
      if (const auto p = detail::price_of(raw.samples[i].query)) prices.push_back(*p);
    }
  }
  if (minutes.empty()) throw data_error("training split is empty");
  d.binner = fit_mealtime_binner(minutes, cfg.meal_periods);
  if (raw.spatial == spatial_source::price && !prices.empty()) d.prices = price_binner::fit(prices, cfg.price_bins);

  for (const auto& e : raw.behaviors) {
    d.store.add(e.user_id, detail::derive_event(e, raw.spatial, cfg.geohash_precision, d.prices, d.binner));
  }
  d.store.finalize();

  d.samples.reserve(raw.samples.size());
  for (std::size_t i = 0; i < raw.samples.size(); ++i) {
    const auto& r = raw.samples[i];
    d.samples.push_back({r.query.user_id,
                         detail::derive_event(r.query, raw.spatial, cfg.geohash_precision, d.prices, d.binner),
                         r.label, static_cast<bool>(flags[i])});
  }

  for (const auto& s : d.samples) {
    if (!s.train) continue;
    detail::visit_sample_keys(d, s, [&](std::size_t f, const std::string& key) {
      if (f == max_field_count) {
        d.users.add(key);
      } else {
        d.fields[f].add(key);
      }
    });
  }
  for (auto& v : d.fields) v.freeze();
  d.users.freeze();

  for (const auto& s : d.samples) {
    if (s.train) continue;
    detail::visit_sample_keys(d, s, [&](std::size_t f, const std::string& key) {
      ++d.test_oov.lookups[f];
      const bool known = f == max_field_count ? d.users.contains(key) : d.fields[f].contains(key);
      if (!known) ++d.test_oov.misses[f];
    });
  }
  return d;
}

/// Derives a new request's keys with the dataset's fitted binners, for
/// scoring samples that were not part of preparation.
inline prepared_sample prepare_request(const prepared_dataset& d, const raw_sample& r) {
  return {r.query.user_id,
          detail::derive_event(r.query, d.spatial, d.config.geohash_precision, d.prices, d.binner), r.label,
          false};
}

/// Table sizes for a model reading this dataset.
inline model_config with_vocab(model_config cfg, const prepared_dataset& d) {
  for (std::size_t f = 0; f < max_field_count; ++f) cfg.field_vocab[f] = d.fields[f].size();
  cfg.user_vocab = d.users.size();
  return cfg;
}

/// How many of the newest behaviors each channel keeps after encoding.
struct encode_options {
  std::array<std::size_t, channel_count> keep{20, 20, 20, 100};
};

/// Keeps what a model with this configuration reads: its attention caps and
/// the aligned length of the integrate network.
inline encode_options encode_options_for(const model_config& cfg) {
  encode_options o;
  for (std::size_t c = 0; c < channel_count; ++c) {
    o.keep[c] = cfg.fragment.attention_cap[c];
    if (cfg.use_integrate) o.keep[c] = std::max(o.keep[c], cfg.integrate.length);
  }
  return o;
}

inline encoded_sample encode_sample(const prepared_dataset& d, const prepared_sample& s,
                                    const encode_options& opt = {}) {
  encoded_sample out;
  out.label = s.label;
  out.user = d.users.lookup(s.user);
  const auto qk = detail::base_keys(s.query);
  for (std::size_t f = 0; f < base_field_count; ++f) out.input.query[f] = d.fields[f].lookup(qk[f]);

  const lifelong_sequence& seq = d.store.sequence(s.user);
  const query_context q = detail::make_query(s, d.config);
  const auto bundle = build_bundle(seq, q, d.config.caps);

  const auto encode = [&](const std::vector<behavior_event>& events, bool dedup) {
    encoded_sequence es;
    es.fields = dedup ? dedup_field_count : base_field_count;
    std::array<std::int32_t, max_field_count> row{};
    for (const auto& e : events) {
      const auto k = detail::base_keys(e);
      for (std::size_t f = 0; f < base_field_count; ++f) row[f] = d.fields[f].lookup(k[f]);
      if (dedup) {
        row[4] = d.fields[4].lookup(detail::click_key(e));
        row[5] = d.fields[5].lookup(detail::interval_key(e));
      }
      es.push(std::span<const std::int32_t>(row.data(), es.fields), static_cast<double>(e.click_count));
    }
    return es;
  };
  const std::array<const std::vector<behavior_event>*, channel_count> lists = {
      &bundle.geohash_block, &bundle.meal_time, &bundle.short_term, &bundle.long_term_dedup};
  const std::span<const std::int32_t> query(out.input.query.data(), base_field_count);
  for (std::size_t c = 0; c < channel_count; ++c) {
    const encoded_sequence full = encode(*lists[c], c == static_cast<std::size_t>(channel::long_term));
    if (c < 2) out.input.long_summary[c] = summarize(full, query);
    out.input.channels[c] = full.head(opt.keep[c]);
  }
  const auto [first, last] = detail::window(seq, detail::long_window_start(q), q.request_time);
  std::vector<behavior_event> window(seq.events.begin() + static_cast<std::ptrdiff_t>(first),
                                     seq.events.begin() + static_cast<std::ptrdiff_t>(last));
  out.long_window = summarize(encode(window, false), query);
  return out;
}

/// Encodes one split (train or test) in sample order.
inline std::vector<encoded_sample> encode_split(const prepared_dataset& d, bool train, const encode_options& opt = {}) {
  std::vector<encoded_sample> out;
  for (const auto& s : d.samples)
    if (s.train == train) out.push_back(encode_sample(d, s, opt));
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

namespace detail {

inline nlohmann::json extra_json(const std::vector<std::pair<std::string, std::string>>& extra) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : extra) j[k] = v;
  return j;
}

inline std::vector<std::pair<std::string, std::string>> parse_extra_json(std::string_view s, std::size_t line_no) {
  std::vector<std::pair<std::string, std::string>> out;
  if (trim(s).empty()) return out;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(s);
  } catch (const nlohmann::json::parse_error& e) {
    throw format_error("line " + std::to_string(line_no) + ": bad extra_json: " + e.what());
  }
  if (!j.is_object()) throw format_error("line " + std::to_string(line_no) + ": extra_json must be an object");
  for (const auto& [k, v] : j.items()) out.emplace_back(k, v.is_string() ? v.get<std::string>() : v.dump());
  return out;
}

inline const char* vocab_file_name(std::size_t f) { return f == max_field_count ? "user" : field_names[f]; }

}  // namespace detail

/// Directory layout: manifest.json, events.tsv, samples.tsv, binner.txt,
/// price_bins.txt (price datasets) and vocab/<field>.tsv.
inline void save_prepared(const prepared_dataset& d, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "vocab");
  {
    auto out = detail::open_out(dir / "events.tsv");
    for (const auto& seq : d.store.sequences()) {
      for (const auto& e : seq.events) {
        out << seq.user_id << '\t' << e.item_id << '\t' << e.category_id << '\t' << e.geohash << '\t' << e.period_id
            << '\t' << e.timestamp << '\t' << e.click_count << '\t' << detail::extra_json(e.extra).dump() << '\n';
      }
    }
  }
  {
    auto out = detail::open_out(dir / "samples.tsv");
    for (const auto& s : d.samples) {
      out << (s.train ? "train" : "test") << '\t' << s.label << '\t' << s.user << '\t' << s.query.item_id << '\t'
          << s.query.category_id << '\t' << s.query.geohash << '\t' << s.query.period_id << '\t' << s.query.timestamp
          << '\t' << detail::extra_json(s.query.extra).dump() << '\n';
    }
  }
  {
    auto out = detail::open_out(dir / "binner.txt");
    d.binner.save(out);
  }
  if (d.prices) {
    auto out = detail::open_out(dir / "price_bins.txt");
    d.prices->save(out);
  }
  for (std::size_t f = 0; f <= max_field_count; ++f) {
    auto out = detail::open_out(dir / "vocab" / (std::string(detail::vocab_file_name(f)) + ".tsv"));
    (f == max_field_count ? d.users : d.fields[f]).save(out);
  }
  nlohmann::json m;
  m["spatial"] = to_string(d.spatial);
  const auto& c = d.config;
  m["meal_periods"] = c.meal_periods;
  m["geohash_precision"] = c.geohash_precision;
  m["price_bins"] = c.price_bins;
  m["train_fraction"] = c.train_fraction;
  m["split_seed"] = c.split_seed;
  m["caps"] = {c.caps.geohash_block, c.caps.meal_time, c.caps.short_term, c.caps.long_term};
  m["short_term_days"] = c.short_term_days;
  m["long_term_days"] = c.long_term_days;
  m["samples"] = d.samples.size();
  m["train_samples"] = d.train_count();
  m["test_samples"] = d.test_count();
  m["users"] = d.store.user_count();
  m["events"] = d.store.event_count();
  m["effective_meal_periods"] = d.binner.effective_bins();
  if (d.prices) m["effective_price_bins"] = d.prices->effective_bins();
  nlohmann::json oov;
  for (std::size_t f = 0; f <= max_field_count; ++f) {
    oov[detail::vocab_file_name(f)] = {{"lookups", d.test_oov.lookups[f]}, {"misses", d.test_oov.misses[f]}};
  }
  m["test_oov"] = oov;
  m["test_oov_rate"] = d.test_oov.rate();
  auto out = detail::open_out(dir / "manifest.json");
  out << m.dump(2) << '\n';
}

inline prepared_dataset load_prepared(const std::filesystem::path& dir) {
  constexpr std::string_view producer = "prepare";
  prepared_dataset d;
  {
    auto in = detail::open_in(dir / "manifest.json", producer);
    try {
      const auto m = nlohmann::json::parse(in);
      d.spatial = parse_spatial_source(m.at("spatial").get<std::string>());
      auto& c = d.config;
      c.meal_periods = m.at("meal_periods").get<int>();
      c.geohash_precision = m.at("geohash_precision").get<int>();
      c.price_bins = m.at("price_bins").get<int>();
      c.train_fraction = m.at("train_fraction").get<double>();
      c.split_seed = m.at("split_seed").get<std::uint64_t>();
      const auto caps = m.at("caps").get<std::vector<std::size_t>>();
      if (caps.size() != 4) throw format_error("manifest caps must have 4 entries");
      c.caps = {caps[0], caps[1], caps[2], caps[3]};
      c.short_term_days = m.at("short_term_days").get<int>();
      c.long_term_days = m.at("long_term_days").get<int>();
      for (std::size_t f = 0; f <= max_field_count; ++f) {
        const auto& o = m.at("test_oov").at(detail::vocab_file_name(f));
        d.test_oov.lookups[f] = o.at("lookups").get<std::size_t>();
        d.test_oov.misses[f] = o.at("misses").get<std::size_t>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw format_error("manifest.json: " + std::string(e.what()));
    }
  }
  std::string line;
  {
    auto in = detail::open_in(dir / "events.tsv", producer);
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto s = detail::strip_cr(line);
      if (s.empty()) continue;
      const auto cols = detail::split(s, '\t');
      if (cols.size() != 8) throw format_error("events.tsv line " + std::to_string(line_no) + ": expected 8 columns");
      behavior_event e;
      e.item_id = std::string(cols[1]);
      e.category_id = std::string(cols[2]);
      e.geohash = std::string(cols[3]);
      e.period_id = detail::parse_number<int>(cols[4], "period", line_no);
      e.timestamp = detail::parse_number<timestamp_t>(cols[5], "timestamp", line_no);
      e.click_count = detail::parse_number<int>(cols[6], "click_count", line_no);
      e.extra = detail::parse_extra_json(cols[7], line_no);
      d.store.add(std::string(cols[0]), std::move(e));
    }
    d.store.finalize();
  }
  {
    auto in = detail::open_in(dir / "samples.tsv", producer);
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto s = detail::strip_cr(line);
      if (s.empty()) continue;
      const auto cols = detail::split(s, '\t');
      if (cols.size() != 9) throw format_error("samples.tsv line " + std::to_string(line_no) + ": expected 9 columns");
      if (cols[0] != "train" && cols[0] != "test") {
        throw format_error("samples.tsv line " + std::to_string(line_no) + ": split must be train or test");
      }
      prepared_sample p;
      p.train = cols[0] == "train";
      p.label = detail::parse_number<int>(cols[1], "label", line_no);
      p.user = std::string(cols[2]);
      p.query.item_id = std::string(cols[3]);
      p.query.category_id = std::string(cols[4]);
      p.query.geohash = std::string(cols[5]);
      p.query.period_id = detail::parse_number<int>(cols[6], "period", line_no);
      p.query.timestamp = detail::parse_number<timestamp_t>(cols[7], "timestamp", line_no);
      p.query.extra = detail::parse_extra_json(cols[8], line_no);
      d.samples.push_back(std::move(p));
    }
  }
  {
    auto in = detail::open_in(dir / "binner.txt", producer);
    d.binner = mealtime_binner::load(in);
  }
  if (std::filesystem::exists(dir / "price_bins.txt")) {
    auto in = detail::open_in(dir / "price_bins.txt", producer);
    d.prices = price_binner::load(in);
  }
  for (std::size_t f = 0; f <= max_field_count; ++f) {
    auto in = detail::open_in(dir / "vocab" / (std::string(detail::vocab_file_name(f)) + ".tsv"), producer);
    (f == max_field_count ? d.users : d.fields[f]) = vocab_map::load(in);
  }
  return d;
}

}  // namespace fin
