#pragma once

// Flat key=value run configuration. Every key has a default; unknown keys are
// rejected. The effective text is echoed into each run directory and is
// enough to reproduce the run.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fin/detail/text.hpp"
#include "fin/errors.hpp"
#include "fin/model.hpp"
#include "fin/prepare.hpp"
#include "fin/reviews.hpp"
#include "fin/synthetic.hpp"
#include "fin/train.hpp"

namespace fin {

namespace detail {

struct config_key {
  const char* key;
  const char* value;
  const char* help;
};

// Defaults describe the synthetic ablation benchmark.
inline constexpr config_key config_keys[] = {
    {"run.root", "runs", "directory holding run directories"},
    {"run.threads", "0", "worker threads, 0 = all cores; results do not depend on it"},

    {"data.source", "synthetic", "synthetic | amazon | google_local"},
    {"data.reviews", "", "review TSV for amazon / google_local sources"},
    {"data.metadata", "", "optional item metadata TSV (item, category[, price])"},
    {"data.skip_malformed", "false", "skip malformed review rows instead of failing"},
    {"data.negative_seed", "1", "seed for sampled review negatives"},
    {"data.users", "5000", "synthetic users"},
    {"data.items", "500", "synthetic restaurants"},
    {"data.categories", "10", "synthetic food categories"},
    {"data.cells_per_user", "2", "places per user (home, work, ...)"},
    {"data.behaviors_per_user", "150", "mean orders per user"},
    {"data.queries_per_user", "2", "final orders per user turned into requests"},
    {"data.concentration", "1.0", "reorder concentration c, reorder probability c/(1+c); inf allowed"},
    {"data.meal_preference", "true", "favourite category depends on the meal period"},
    {"data.favored_weight", "0.5", "share of orders from the (place, period) favourite"},
    {"data.craving_weight", "0.2", "share of orders from the 30-day craving"},
    {"data.taste_spread", "1.5", "log-normal spread of general category taste"},
    {"data.history_days", "400", "days of history per user"},
    {"data.seed", "7", "synthetic generator seed"},

    {"prepare.meal_periods", "95", "equal-frequency meal-time bins"},
    {"prepare.geohash_precision", "6", "geohash characters for the spatial key"},
    {"prepare.price_bins", "48", "equal-frequency price bins (price spatial source)"},
    {"prepare.train_fraction", "0.8", "share of samples in the training split"},
    {"prepare.split_seed", "11", "split seed"},
    {"prepare.cap_geohash_block", "200", "geohash-block retrieval cap"},
    {"prepare.cap_meal_time", "200", "meal-time retrieval cap"},
    {"prepare.cap_short_term", "20", "short-term retrieval cap"},
    {"prepare.cap_long_term", "100", "long-term de-duplicated retrieval cap"},
    {"prepare.short_term_days", "30", "short-term window"},
    {"prepare.long_term_days", "365", "long-term window"},

    {"model.variant", "full_fin", "avg_pool_long | simplified_only | sim_style | sten_style | fn_only | full_fin"},
    {"model.embedding_dim", "4", "embedding width per side-info field"},
    {"model.d_model", "16", "attention width"},
    {"model.heads", "4", "attention heads"},
    {"model.hidden", "200,80", "MLP hidden widths; a 2-way output layer follows"},
    {"model.activation", "silu", "silu | softplus"},
    {"model.embedding_init", "1.0", "embeddings start uniform in +-value"},
    {"model.attention_cap", "20,20,20,100", "newest behaviors attended per channel (G, M, S, L)"},
    {"model.align_length", "16", "rows per aligned sub-sequence in the integrate network"},
    {"model.integrate_average", "false", "collapse aligned sub-sequences to one mean row"},
    {"model.per_behavior_weighting", "false", "weight simplified pooling per behavior"},
    {"model.init_seed", "1", "parameter initialisation seed"},

    {"train.epochs", "8", "passes over the training split"},
    {"train.batch_size", "32", "samples per Adam step"},
    {"train.lr", "0.001", "Adam learning rate"},
    {"train.beta1", "0.9", "Adam beta1"},
    {"train.beta2", "0.999", "Adam beta2"},
    {"train.epsilon", "1e-8", "Adam epsilon"},
    {"train.seed", "1", "shuffle seed"},
    {"train.slices", "4", "fixed gradient reduction slices per batch"},
    {"train.checkpoint_every", "0", "save a checkpoint every n steps (0 = only at the end)"},
    {"train.resume", "", "checkpoint to resume from"},

    {"eval.checkpoint", "", "checkpoint to evaluate (default: latest train run)"},
    {"infer.checkpoint", "", "checkpoint to score with (default: latest train run)"},
    {"infer.input", "", "samples TSV to score (label<TAB>behavior line)"},

    {"ablate.variants", "avg_pool_long,sim_style,sten_style,fn_only,full_fin", "variants to train"},
    {"ablate.seeds", "1,2,3", "training seeds; each seed sets model.init_seed and train.seed"},

    {"paths.raw", "", "raw dataset directory (default: latest gen-data run)"},
    {"paths.prepared", "", "prepared dataset directory (default: latest prepare run)"},
};

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw config_error(std::string(key) + ": expected true or false, got '" + std::string(v) + "'");
}

}  // namespace detail

class run_config {
 public:
  run_config() {
    for (const auto& k : detail::config_keys) values_[k.key] = k.value;
  }

  static bool known(std::string_view key) {
    for (const auto& k : detail::config_keys)
      if (key == k.key) return true;
    return false;
  }

  void set(std::string_view key, std::string_view value) {
    if (!known(key)) throw config_error("unknown config key '" + std::string(key) + "'");
    values_[std::string(key)] = std::string(detail::trim(value));
  }

  /// `key=value` assignment as given to --set.
  void set_assignment(std::string_view text) {
    const auto eq = text.find('=');
    if (eq == std::string_view::npos) throw config_error("expected key=value, got '" + std::string(text) + "'");
    set(detail::trim(text.substr(0, eq)), text.substr(eq + 1));
  }

  /// Reads `key = value` lines; blank lines and `#` comments are ignored.
  void load(std::istream& in, std::string_view origin = "config") {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      auto s = detail::trim(detail::strip_cr(line));
      if (s.empty() || s.front() == '#') continue;
      const auto eq = s.find('=');
      if (eq == std::string_view::npos) {
        throw config_error(std::string(origin) + ":" + std::to_string(line_no) + ": expected key = value");
      }
      try {
        set(detail::trim(s.substr(0, eq)), s.substr(eq + 1));
      } catch (const config_error& e) {
        throw config_error(std::string(origin) + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
  }

  void load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot read config '" + path.string() + "'");
    load(in, path.string());
  }

  const std::string& get(std::string_view key) const {
    const auto it = values_.find(std::string(key));
    if (it == values_.end()) throw config_error("unknown config key '" + std::string(key) + "'");
    return it->second;
  }

  bool get_bool(std::string_view key) const { return detail::parse_bool(key, get(key)); }

  double get_double(std::string_view key) const {
    const auto& v = get(key);
    if (v == "inf") return std::numeric_limits<double>::infinity();
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw config_error(std::string(key) + ": expected a number, got '" + v + "'");
  }

  std::uint64_t get_uint(std::string_view key) const {
    const auto& v = get(key);
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) {
      throw config_error(std::string(key) + ": expected a non-negative integer, got '" + v + "'");
    }
    return out;
  }

  std::size_t get_size(std::string_view key) const { return static_cast<std::size_t>(get_uint(key)); }

  int get_int(std::string_view key) const {
    const auto v = get_uint(key);
    if (v > static_cast<std::uint64_t>(std::numeric_limits<int>::max())) {
      throw config_error(std::string(key) + ": value too large");
    }
    return static_cast<int>(v);
  }

  std::vector<std::string> get_list(std::string_view key) const {
    std::vector<std::string> out;
    for (auto part : detail::split(get(key), ','))
      if (!detail::trim(part).empty()) out.emplace_back(detail::trim(part));
    return out;
  }

  std::vector<std::uint64_t> get_uint_list(std::string_view key) const {
    std::vector<std::uint64_t> out;
    for (const auto& s : get_list(key)) {
      std::uint64_t v = 0;
      const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc{} || p != s.data() + s.size()) {
        throw config_error(std::string(key) + ": expected integers, got '" + s + "'");
      }
      out.push_back(v);
    }
    return out;
  }

  /// Effective configuration, one `key = value` per line in a fixed order.
  std::string text() const {
    std::string out;
    for (const auto& k : detail::config_keys) out += std::string(k.key) + " = " + values_.at(k.key) + '\n';
    return out;
  }

  /// FNV-1a over text(), as 16 hex digits.
  std::string hash() const {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : text()) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  static std::string help() {
    std::string out;
    for (const auto& k : detail::config_keys) {
      out += "  " + std::string(k.key) + " (default '" + k.value + "')\n      " + k.help + '\n';
    }
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

inline synthetic_spec synthetic_spec_from(const run_config& c) {
  synthetic_spec s;
  s.users = c.get_size("data.users");
  s.items = c.get_size("data.items");
  s.categories = c.get_size("data.categories");
  s.cells_per_user = c.get_size("data.cells_per_user");
  s.behaviors_per_user = c.get_size("data.behaviors_per_user");
  s.queries_per_user = c.get_size("data.queries_per_user");
  s.concentration = c.get_double("data.concentration");
  s.meal_preference = c.get_bool("data.meal_preference");
  s.favored_weight = c.get_double("data.favored_weight");
  s.craving_weight = c.get_double("data.craving_weight");
  s.taste_spread = c.get_double("data.taste_spread");
  s.history_days = c.get_size("data.history_days");
  s.seed = c.get_uint("data.seed");
  s.validate();
  return s;
}

inline prepare_config prepare_config_from(const run_config& c) {
  prepare_config p;
  p.meal_periods = c.get_int("prepare.meal_periods");
  p.geohash_precision = c.get_int("prepare.geohash_precision");
  p.price_bins = c.get_int("prepare.price_bins");
  p.train_fraction = c.get_double("prepare.train_fraction");
  p.split_seed = c.get_uint("prepare.split_seed");
  p.caps.geohash_block = c.get_size("prepare.cap_geohash_block");
  p.caps.meal_time = c.get_size("prepare.cap_meal_time");
  p.caps.short_term = c.get_size("prepare.cap_short_term");
  p.caps.long_term = c.get_size("prepare.cap_long_term");
  p.short_term_days = c.get_int("prepare.short_term_days");
  p.long_term_days = c.get_int("prepare.long_term_days");
  p.validate();
  return p;
}

/// Model shape from the config; vocabulary sizes still come from the data.
inline model_config model_config_from(const run_config& c) {
  model_config m;
  m.embedding_dim = c.get_size("model.embedding_dim");
  m.d_model = c.get_size("model.d_model");
  m.heads = c.get_size("model.heads");
  m.hidden.clear();
  for (auto v : c.get_uint_list("model.hidden")) m.hidden.push_back(static_cast<std::size_t>(v));
  m.activation = c.get("model.activation");
  m.embedding_init = c.get_double("model.embedding_init");
  const auto caps = c.get_uint_list("model.attention_cap");
  if (caps.size() != channel_count) throw config_error("model.attention_cap needs 4 values (G, M, S, L)");
  for (std::size_t i = 0; i < channel_count; ++i) {
    if (caps[i] == 0) throw config_error("model.attention_cap values must be >= 1");
    m.fragment.attention_cap[i] = static_cast<std::size_t>(caps[i]);
  }
  m.integrate.length = c.get_size("model.align_length");
  if (m.integrate.length == 0) throw config_error("model.align_length must be >= 1");
  m.integrate.average_to_one = c.get_bool("model.integrate_average");
  m.fragment.per_behavior_weighting = c.get_bool("model.per_behavior_weighting");
  if (m.heads == 0 || m.d_model % m.heads != 0) throw config_error("model.d_model must be a multiple of model.heads");
  return apply_variant(m, c.get("model.variant"));
}

inline train_options train_options_from(const run_config& c) {
  train_options t;
  t.epochs = c.get_size("train.epochs");
  t.batch_size = c.get_size("train.batch_size");
  if (t.batch_size == 0) throw config_error("train.batch_size must be >= 1");
  t.adam.learning_rate = c.get_double("train.lr");
  t.adam.beta1 = c.get_double("train.beta1");
  t.adam.beta2 = c.get_double("train.beta2");
  t.adam.epsilon = c.get_double("train.epsilon");
  t.adam.validate();
  t.seed = c.get_uint("train.seed");
  t.slices = c.get_size("train.slices");
  if (t.slices == 0) throw config_error("train.slices must be >= 1");
  t.threads = c.get_size("run.threads");
  return t;
}

inline review_schema review_schema_from(const run_config& c) { return parse_review_schema(c.get("data.source")); }

}  // namespace fin
