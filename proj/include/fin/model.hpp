#pragma once

// Full model: fragment + integrate outputs, query and user embeddings, and a
// 200 x 80 x 2 MLP head producing the click probability.

#include <array>
#include <cmath>
#include <cstdint>
#include <algorithm>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fin/autodiff.hpp"
#include "fin/fragment.hpp"
#include "fin/integrate.hpp"
#include "fin/params.hpp"

namespace fin {

/// One training/evaluation record after retrieval and id encoding.
struct encoded_sample {
  std::int32_t user = 0;
  fragment_input input;
  sequence_summary long_window;  // every behavior of the long-term window, for average pooling
  int label = 0;
};

inline constexpr std::array<std::string_view, 6> variant_names = {
    "avg_pool_long", "simplified_only", "sim_style", "sten_style", "fn_only", "full_fin"};

struct model_config {
  std::size_t embedding_dim = 4;
  std::size_t d_model = 16;
  std::size_t heads = 4;
  std::vector<std::size_t> hidden = {200, 80};  // followed by the 2-way output layer
  std::string activation = "silu";
  double embedding_init = 0.05;  // embeddings start uniform in +-embedding_init
  fragment_config fragment;
  integrate_config integrate;
  bool use_integrate = true;
  bool use_avg_pool_long = false;
  std::string variant = "full_fin";
  std::array<std::size_t, max_field_count> field_vocab{1, 1, 1, 1, 16, 16};
  std::size_t user_vocab = 1;
};

/// Configures which blocks exist for each ablation variant:
///   avg_pool_long   mean pooling over the whole long-term window
///   simplified_only simplified attention on geohash-block and meal-time
///   sim_style       attention on the geohash-block channel only
///   sten_style      geohash-block and meal-time, simplified + attention
///   fn_only         all four fragment channels, no integrate network
///   full_fin        fragment network plus integrate network
inline model_config apply_variant(model_config cfg, std::string_view variant) {
  auto& f = cfg.fragment;
  f.simplified = {false, false, false, false};
  f.attention = {false, false, false, false};
  cfg.use_integrate = false;
  cfg.use_avg_pool_long = false;
  if (variant == "avg_pool_long") {
    cfg.use_avg_pool_long = true;
  } else if (variant == "simplified_only") {
    f.simplified = {true, true, false, false};
  } else if (variant == "sim_style") {
    f.attention = {true, false, false, false};
  } else if (variant == "sten_style") {
    f.simplified = {true, true, false, false};
    f.attention = {true, true, false, false};
  } else if (variant == "fn_only") {
    f.simplified = {true, true, false, false};
    f.attention = {true, true, true, true};
  } else if (variant == "full_fin") {
    f.simplified = {true, true, false, false};
    f.attention = {true, true, true, true};
    cfg.use_integrate = true;
  } else {
    throw config_error("unknown variant '" + std::string(variant) + "'");
  }
  cfg.variant = std::string(variant);
  return cfg;
}

/// Number of retrieval channels a configuration reads.
inline std::size_t retrieval_channels_used(const model_config& cfg) {
  if (cfg.use_integrate) return channel_count;
  std::size_t n = 0;
  for (std::size_t c = 0; c < channel_count; ++c)
    if (cfg.fragment.attention[c] || (c < 2 && cfg.fragment.simplified[c])) ++n;
  return n;
}

// key=value serialisation so checkpoints can rebuild their model.
inline std::string serialize(const model_config& c) {
  std::ostringstream o;
  const auto flags = [](const auto& arr) {
    std::string s;
    for (bool b : arr) s += b ? '1' : '0';
    return s;
  };
  o << "model.embedding_dim=" << c.embedding_dim << '\n'
    << "model.d_model=" << c.d_model << '\n'
    << "model.heads=" << c.heads << '\n';
  o << "model.hidden=";
  for (std::size_t i = 0; i < c.hidden.size(); ++i) o << (i ? "," : "") << c.hidden[i];
  o << '\n'
    << "model.activation=" << c.activation << '\n'
    << "model.embedding_init=" << detail::format_double(c.embedding_init) << '\n'
    << "model.simplified=" << flags(c.fragment.simplified) << '\n'
    << "model.attention=" << flags(c.fragment.attention) << '\n';
  o << "model.attention_cap=";
  for (std::size_t i = 0; i < channel_count; ++i) o << (i ? "," : "") << c.fragment.attention_cap[i];
  o << '\n'
    << "model.per_behavior_weighting=" << c.fragment.per_behavior_weighting << '\n'
    << "model.align_length=" << c.integrate.length << '\n'
    << "model.integrate_average=" << c.integrate.average_to_one << '\n'
    << "model.use_integrate=" << c.use_integrate << '\n'
    << "model.use_avg_pool_long=" << c.use_avg_pool_long << '\n'
    << "model.variant=" << c.variant << '\n';
  o << "model.field_vocab=";
  for (std::size_t i = 0; i < max_field_count; ++i) o << (i ? "," : "") << c.field_vocab[i];
  o << '\n' << "model.user_vocab=" << c.user_vocab << '\n';
  return o.str();
}

inline std::map<std::string, std::string> parse_key_values(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline model_config deserialize_model_config(std::string_view text) {
  const auto kv = parse_key_values(text);
  const auto get = [&](const std::string& k) -> const std::string& {
    const auto it = kv.find(k);
    if (it == kv.end()) throw format_error("model config missing key '" + k + "'");
    return it->second;
  };
  const auto num = [&](const std::string& k) { return static_cast<std::size_t>(std::stoull(get(k))); };
  const auto list = [&](const std::string& k) {
    std::vector<std::size_t> out;
    std::istringstream s(get(k));
    std::string part;
    while (std::getline(s, part, ',')) out.push_back(static_cast<std::size_t>(std::stoull(part)));
    return out;
  };
  const auto flags = [&](const std::string& k) {
    const std::string& s = get(k);
    if (s.size() != channel_count) throw format_error("bad flag string for " + k);
    std::array<bool, channel_count> out{};
    for (std::size_t i = 0; i < channel_count; ++i) out[i] = s[i] == '1';
    return out;
  };
  model_config c;
  c.embedding_dim = num("model.embedding_dim");
  c.d_model = num("model.d_model");
  c.heads = num("model.heads");
  c.hidden = list("model.hidden");
  c.activation = get("model.activation");
  c.embedding_init = std::stod(get("model.embedding_init"));
  c.fragment.simplified = flags("model.simplified");
  c.fragment.attention = flags("model.attention");
  const auto caps = list("model.attention_cap");
  if (caps.size() != channel_count) throw format_error("bad attention_cap");
  for (std::size_t i = 0; i < channel_count; ++i) c.fragment.attention_cap[i] = caps[i];
  c.fragment.per_behavior_weighting = get("model.per_behavior_weighting") == "1";
  c.integrate.length = num("model.align_length");
  c.integrate.average_to_one = get("model.integrate_average") == "1";
  c.use_integrate = get("model.use_integrate") == "1";
  c.use_avg_pool_long = get("model.use_avg_pool_long") == "1";
  c.variant = get("model.variant");
  const auto fv = list("model.field_vocab");
  if (fv.size() != max_field_count) throw format_error("bad field_vocab");
  for (std::size_t i = 0; i < max_field_count; ++i) c.field_vocab[i] = fv[i];
  c.user_vocab = num("model.user_vocab");
  return c;
}

class fin_model {
 public:
  explicit fin_model(model_config cfg) : cfg_(std::move(cfg)) {
    if (cfg_.activation != "silu" && cfg_.activation != "softplus") {
      throw config_error("unknown activation '" + cfg_.activation + "' (silu, softplus)");
    }
    if (cfg_.embedding_dim == 0 || cfg_.d_model == 0) throw config_error("dimensions must be positive");
    if (!(cfg_.embedding_init > 0.0) || !std::isfinite(cfg_.embedding_init)) {
      throw config_error("embedding_init must be a positive finite number");
    }
    tables_ = embedding_tables::create(params_, cfg_.field_vocab, cfg_.user_vocab, cfg_.embedding_dim);
    fragment_ = fragment_params::create(params_, cfg_.fragment, cfg_.embedding_dim, cfg_.d_model, cfg_.heads);
    if (cfg_.use_integrate) {
      integrate_ = integrate_params::create(params_, cfg_.embedding_dim, cfg_.d_model, cfg_.heads);
    }
    std::size_t width = input_dim();
    const std::vector<std::size_t> widths = [&] {
      std::vector<std::size_t> w = cfg_.hidden;
      w.push_back(2);
      return w;
    }();
    for (std::size_t l = 0; l < widths.size(); ++l) {
      const std::string base = "mlp.l" + std::to_string(l + 1);
      dense_.push_back({params_.add(base + ".w", width, widths[l]),
                        params_.add(base + ".b", 1, widths[l], param_kind::bias)});
      width = widths[l];
    }
  }

  const model_config& config() const { return cfg_; }
  param_store& params() { return params_; }
  const param_store& params() const { return params_; }
  const embedding_tables& tables() const { return tables_; }
  const fragment_params& fragment() const { return fragment_; }
  const std::optional<integrate_params>& integrate() const { return integrate_; }

  void initialize(std::uint64_t seed) { params_.initialize(seed, cfg_.embedding_init); }

  std::size_t fragment_dim() const { return fragment_output_dim(cfg_.fragment, cfg_.embedding_dim, cfg_.d_model); }

  std::size_t input_dim() const {
    std::size_t d = fragment_dim();
    if (cfg_.use_integrate) d += cfg_.d_model;
    if (cfg_.use_avg_pool_long) d += base_field_count * cfg_.embedding_dim;
    d += base_field_count * cfg_.embedding_dim;  // query item
    d += cfg_.embedding_dim;                     // user
    return d;
  }

  /// Distinct parameter groups ("emb", "frag.geohash", "integ", "mlp", ...).
  std::vector<std::string> param_groups() const {
    std::vector<std::string> groups;
    for (const auto& p : params_.params()) {
      std::string g = p.name.substr(0, p.name.find('.'));
      if (g == "frag") g = p.name.substr(0, p.name.find('.', 5));
      if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
    }
    return groups;
  }

  struct forward_result {
    var features;
    var logits;
    var probabilities;  // 1 x 2, click probability at column 1
  };

  forward_result forward(tape& t, const param_view& view, const encoded_sample& s,
                         fragment_trace* trace = nullptr) const {
    const var query = embed_query(t, view, tables_, s.input.query);
    std::vector<var> parts;
    if (fragment_dim() > 0) {
      parts.push_back(fragment_forward(t, view, tables_, fragment_, cfg_.fragment, s.input, query, trace));
    }
    if (cfg_.use_integrate) {
      parts.push_back(integrate_forward(t, view, tables_, *integrate_, cfg_.integrate, s.input, query).output);
    }
    if (cfg_.use_avg_pool_long) {
      parts.push_back(pooled_embedding(t, view, tables_, mean_weights(s.long_window), base_field_count));
    }
    parts.push_back(query);
    parts.push_back(gather_rows(t, view.value(tables_.user), view.grad(tables_.user), {s.user}));
    forward_result r;
    r.features = concat_cols(parts);
    var h = r.features;
    for (std::size_t l = 0; l < dense_.size(); ++l) {
      h = add_row_bias(matmul(h, view.bind(t, dense_[l].w)), view.bind(t, dense_[l].b));
      if (l + 1 < dense_.size()) h = cfg_.activation == "silu" ? silu(h) : softplus(h);
      if (!h.value().all_finite()) throw model_error("non-finite activation in layer mlp.l" + std::to_string(l + 1));
    }
    r.logits = h;
    r.probabilities = masked_softmax(h, {1, 1});
    return r;
  }

  /// Click probability without recording gradients.
  double predict(const encoded_sample& s) const {
    tape t;
    return forward(t, param_view(params_, nullptr), s).probabilities.value()[1];
  }

  /// Negative log-likelihood of the label, probabilities clamped at 1e-12.
  var loss(tape& t, const param_view& view, const encoded_sample& s) const {
    if (s.label != 0 && s.label != 1) throw data_error("label must be 0 or 1");
    const var p = forward(t, view, s).probabilities;
    return scale(log(pick(p, 0, static_cast<std::size_t>(s.label)), 1e-12), -1.0);
  }

 private:
  struct dense_layer {
    param_id w;
    param_id b;
  };

  model_config cfg_;
  param_store params_;
  embedding_tables tables_;
  fragment_params fragment_;
  std::optional<integrate_params> integrate_;
  std::vector<dense_layer> dense_;
};

/// Loss of a single prediction, -log(max(p_label, 1e-12)).
inline double nll(double click_probability, int label) {
  const double p = label == 1 ? click_probability : 1.0 - click_probability;
  return -std::log(std::max(p, 1e-12));
}

}  // namespace fin
