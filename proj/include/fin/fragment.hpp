#pragma once

// Fragment network: click-weighted match scoring ("simplified attention") over
// long retrieved sub-sequences and multi-head target attention over their
// newest few behaviors.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fin/autodiff.hpp"
#include "fin/errors.hpp"
#include "fin/params.hpp"

namespace fin {

/// Side-information fields attached to every behavior. The first four exist
/// for every channel; the last two only for the long-term dedup channel.
enum class field : std::size_t { item = 0, category, spatial, period, click_bucket, interval_bucket };

inline constexpr std::size_t base_field_count = 4;
inline constexpr std::size_t dedup_field_count = 6;
inline constexpr std::size_t max_field_count = 6;

inline constexpr std::array<const char*, max_field_count> field_names = {
    "item", "category", "spatial", "period", "click_bucket", "interval_bucket"};

/// The four retrieval channels, in canonical order.
enum class channel : std::size_t { geohash_block = 0, meal_time, short_term, long_term };

inline constexpr std::size_t channel_count = 4;
inline constexpr std::array<const char*, channel_count> channel_names = {"geohash", "mealtime", "short", "long"};

inline constexpr std::size_t fields_of(channel c) {
  return c == channel::long_term ? dedup_field_count : base_field_count;
}

/// Embedding tables, one per side-info field plus the user id. Row 0 of each
/// table is the out-of-vocabulary row.
struct embedding_tables {
  std::array<param_id, max_field_count> fields{};
  param_id user = 0;
  std::size_t dim = 4;

  static embedding_tables create(param_store& store, const std::array<std::size_t, max_field_count>& vocab,
                                 std::size_t user_vocab, std::size_t dim) {
    embedding_tables t;
    t.dim = dim;
    for (std::size_t f = 0; f < max_field_count; ++f) {
      t.fields[f] = store.add(std::string("emb.") + field_names[f], std::max<std::size_t>(vocab[f], 1), dim,
                              param_kind::embedding);
    }
    t.user = store.add("emb.user", std::max<std::size_t>(user_vocab, 1), dim, param_kind::embedding);
    return t;
  }
};

/// Id sequence of one retrieved channel: `fields` ids per behavior, the
/// behavior's click count, and a validity flag.
struct encoded_sequence {
  std::size_t fields = base_field_count;
  std::vector<std::int32_t> ids;
  std::vector<double> counts;
  std::vector<std::uint8_t> valid;

  std::size_t length() const { return valid.size(); }
  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
  }
  std::int32_t id(std::size_t j, std::size_t f) const { return ids[j * fields + f]; }

  void push(std::span<const std::int32_t> row, double count = 1.0, bool is_valid = true) {
    if (row.size() != fields) throw dimension_error("encoded_sequence: row width mismatch");
    ids.insert(ids.end(), row.begin(), row.end());
    counts.push_back(count);
    valid.push_back(is_valid ? 1 : 0);
  }

  /// First n behaviors (sequences are stored newest first).
  encoded_sequence head(std::size_t n) const {
    encoded_sequence out;
    out.fields = fields;
    n = std::min(n, length());
    out.ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n * fields));
    out.counts.assign(counts.begin(), counts.begin() + static_cast<std::ptrdiff_t>(n));
    out.valid.assign(valid.begin(), valid.begin() + static_cast<std::ptrdiff_t>(n));
    return out;
  }

  std::vector<std::int32_t> column(std::size_t f) const {
    std::vector<std::int32_t> out(length());
    for (std::size_t j = 0; j < length(); ++j) out[j] = id(j, f);
    return out;
  }
};

/// r_j = 1 where the behavior's field matches the query's, else 0 (and 0 at
/// invalid positions).
inline std::vector<double> relevance_scores(const encoded_sequence& seq, std::size_t f, std::int32_t query_id) {
  if (f >= seq.fields) throw dimension_error("relevance_scores: no such field");
  std::vector<double> r(seq.length(), 0.0);
  for (std::size_t j = 0; j < seq.length(); ++j) r[j] = (seq.valid[j] && seq.id(j, f) == query_id) ? 1.0 : 0.0;
  return r;
}

/// Click-weighted match fraction sum(r_j c_j) / sum(c_j) over valid positions;
/// 0 when nothing is valid.
inline double z_score(std::span<const double> r, std::span<const double> counts,
                      std::span<const std::uint8_t> valid = {}) {
  if (r.size() != counts.size() || (!valid.empty() && valid.size() != r.size())) {
    throw dimension_error("z_score: length mismatch");
  }
  double num = 0.0, den = 0.0;
  for (std::size_t j = 0; j < r.size(); ++j) {
    if (!valid.empty() && !valid[j]) continue;
    num += r[j] * counts[j];
    den += counts[j];
  }
  return den > 0.0 ? num / den : 0.0;
}

struct id_stat {
  std::int32_t id = 0;
  double occurrences = 0.0;
  double clicks = 0.0;
};

/// Everything the simplified attention needs from a long sub-sequence, so the
/// sequence itself does not have to be kept around.
struct sequence_summary {
  std::size_t length = 0;
  double total_clicks = 0.0;
  std::vector<double> z;                       // per base field
  std::vector<std::vector<id_stat>> histogram;  // per base field, ascending id
};

inline sequence_summary summarize(const encoded_sequence& seq, std::span<const std::int32_t> query) {
  const std::size_t k = std::min(query.size(), seq.fields);
  sequence_summary s;
  s.length = seq.valid_count();
  s.z.resize(k);
  s.histogram.resize(k);
  for (std::size_t j = 0; j < seq.length(); ++j)
    if (seq.valid[j]) s.total_clicks += seq.counts[j];
  for (std::size_t f = 0; f < k; ++f) {
    const auto r = relevance_scores(seq, f, query[f]);
    s.z[f] = z_score(r, seq.counts, seq.valid);
    std::map<std::int32_t, id_stat> h;
    for (std::size_t j = 0; j < seq.length(); ++j) {
      if (!seq.valid[j]) continue;
      auto& st = h[seq.id(j, f)];
      st.id = seq.id(j, f);
      st.occurrences += 1.0;
      st.clicks += seq.counts[j];
    }
    for (const auto& [id, st] : h) s.histogram[f].push_back(st);
  }
  return s;
}

/// Per-field (id, weight) lists; the pooled vector is sum(weight * e_id).
struct pooled_ids {
  std::vector<std::vector<std::pair<std::int32_t, double>>> per_field;
};

/// Weights of the simplified attention. Default: U_i = z_i * mean_j e_ij, i.e.
/// every behavior weighted z_i / T. With per-behavior weighting:
/// U_i = sum_j (r_ij c_j / sum c) e_ij.
inline pooled_ids simplified_weights(const sequence_summary& s, std::span<const std::int32_t> query,
                                     bool per_behavior_weighting) {
  pooled_ids p;
  p.per_field.resize(s.histogram.size());
  if (s.length == 0) return p;
  for (std::size_t f = 0; f < s.histogram.size(); ++f) {
    for (const auto& st : s.histogram[f]) {
      double w = 0.0;
      if (per_behavior_weighting) {
        w = st.id == query[f] && s.total_clicks > 0.0 ? st.clicks / s.total_clicks : 0.0;
      } else {
        w = s.z[f] * st.occurrences / static_cast<double>(s.length);
      }
      if (w != 0.0) p.per_field[f].emplace_back(st.id, w);
    }
  }
  return p;
}

/// Plain mean pooling of every field over the valid behaviors.
inline pooled_ids mean_weights(const sequence_summary& s) {
  pooled_ids p;
  p.per_field.resize(s.histogram.size());
  if (s.length == 0) return p;
  for (std::size_t f = 0; f < s.histogram.size(); ++f)
    for (const auto& st : s.histogram[f])
      p.per_field[f].emplace_back(st.id, st.occurrences / static_cast<double>(s.length));
  return p;
}

/// Concatenation over fields of the pooled embeddings (1 x fields*dim).
inline var pooled_embedding(tape& t, const param_view& view, const embedding_tables& tables,
                            const pooled_ids& pooled, std::size_t fields) {
  std::vector<var> parts;
  parts.reserve(fields);
  for (std::size_t f = 0; f < fields; ++f) {
    std::vector<std::int32_t> ids;
    std::vector<double> weights;
    if (f < pooled.per_field.size()) {
      for (const auto& [id, w] : pooled.per_field[f]) {
        ids.push_back(id);
        weights.push_back(w);
      }
    }
    const param_id table = tables.fields[f];
    parts.push_back(pooled_rows(t, view.value(table), view.grad(table), std::move(ids), std::move(weights)));
  }
  return concat_cols(parts);
}

/// Simplified attention U* = concat_i(pooling(z_i * e_ij)) straight from a
/// sequence. Empty input gives the zero vector of width K*dim.
inline var simplified_attention(tape& t, const param_view& view, const embedding_tables& tables,
                                const encoded_sequence& seq, std::span<const std::int32_t> query,
                                bool per_behavior_weighting = false) {
  const std::size_t k = std::min(query.size(), seq.fields);
  if (k == 0) throw dimension_error("simplified_attention needs at least one side-info field");
  const sequence_summary s = summarize(seq, query.first(k));
  return pooled_embedding(t, view, tables, simplified_weights(s, query.first(k), per_behavior_weighting), k);
}

/// Key matrix of a sequence: per behavior, the concatenated field embeddings
/// (length x fields*dim). Invalid rows are zero.
inline var embed_sequence(tape& t, const param_view& view, const embedding_tables& tables,
                          const encoded_sequence& seq) {
  std::vector<var> parts;
  parts.reserve(seq.fields);
  for (std::size_t f = 0; f < seq.fields; ++f) {
    const param_id table = tables.fields[f];
    parts.push_back(gather_rows(t, view.value(table), view.grad(table), seq.column(f)));
  }
  var keys = concat_cols(parts);
  if (seq.valid_count() != seq.length()) keys = mask_rows(keys, seq.valid);
  return keys;
}

/// Query item embedding: concatenation of its base side-info embeddings.
inline var embed_query(tape& t, const param_view& view, const embedding_tables& tables,
                       std::span<const std::int32_t> query) {
  std::vector<var> parts;
  for (std::size_t f = 0; f < query.size(); ++f) {
    const param_id table = tables.fields[f];
    parts.push_back(gather_rows(t, view.value(table), view.grad(table), {query[f]}));
  }
  return concat_cols(parts);
}

struct attention_params {
  param_id wk = 0;
  param_id wq = 0;
  param_id wv = 0;
  std::size_t heads = 4;
  std::size_t d_model = 16;

  static attention_params create(param_store& store, const std::string& prefix, std::size_t key_dim,
                                 std::size_t query_dim, std::size_t d_model, std::size_t heads) {
    if (heads == 0 || d_model % heads != 0) {
      throw config_error("d_model (" + std::to_string(d_model) + ") must be a multiple of heads (" +
                         std::to_string(heads) + ")");
    }
    attention_params p;
    p.heads = heads;
    p.d_model = d_model;
    p.wk = store.add(prefix + ".wk", key_dim, d_model);
    p.wq = store.add(prefix + ".wq", query_dim, d_model);
    p.wv = store.add(prefix + ".wv", key_dim, d_model);
    return p;
  }
};

struct attention_result {
  var output;                                // 1 x d_model
  std::vector<std::vector<double>> weights;  // per head, one weight per key
};

/// Multi-head target attention. Per head m:
///   logit_j = (k_j W_km) . (q W_qm) / sqrt(head_dim)
///   att_m   = softmax over valid j
///   head_m  = sum_j att_m[j] (k_j W_vm)
/// and the output concatenates the heads. No valid key gives a zero output.
inline attention_result multihead_target_attention(tape& t, const param_view& view, const attention_params& p,
                                                   const var& keys, const std::vector<std::uint8_t>& valid,
                                                   const var& query) {
  if (valid.size() != keys.rows()) throw dimension_error("attention: mask length mismatch");
  attention_result res;
  if (std::none_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; })) {
    res.output = t.constant(matrix(1, p.d_model));
    return res;
  }
  const var wk = view.bind(t, p.wk);
  const var wq = view.bind(t, p.wq);
  const var wv = view.bind(t, p.wv);
  const var k = matmul(keys, wk);
  const var v = matmul(keys, wv);
  const var q = matmul(query, wq);
  const std::size_t hd = p.d_model / p.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<var> heads;
  heads.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    const var kh = slice_cols(k, h * hd, hd);
    const var qh = slice_cols(q, h * hd, hd);
    const var vh = slice_cols(v, h * hd, hd);
    const var logits = scale(matmul_nt(kh, qh), inv_sqrt);
    const var att = masked_softmax(logits, valid);
    res.weights.push_back(att.value().values());
    heads.push_back(matmul_tn(att, vh));
  }
  res.output = concat_cols(heads);
  return res;
}

// ---------------------------------------------------------------------------

struct fragment_config {
  // Channels modelled with simplified attention (only the two long raw
  // channels support it).
  std::array<bool, channel_count> simplified{true, true, false, false};
  // Channels modelled with multi-head target attention.
  std::array<bool, channel_count> attention{true, true, true, true};
  // Newest behaviors kept for attention per channel.
  std::array<std::size_t, channel_count> attention_cap{20, 20, 20, 100};
  bool per_behavior_weighting = false;
};

struct fragment_params {
  std::array<std::optional<attention_params>, channel_count> attention;

  static fragment_params create(param_store& store, const fragment_config& cfg, std::size_t emb_dim,
                                std::size_t d_model, std::size_t heads) {
    fragment_params p;
    for (std::size_t c = 0; c < channel_count; ++c) {
      if (!cfg.attention[c]) continue;
      const std::size_t key_dim = fields_of(static_cast<channel>(c)) * emb_dim;
      p.attention[c] = attention_params::create(store, std::string("frag.") + channel_names[c], key_dim,
                                                base_field_count * emb_dim, d_model, heads);
    }
    return p;
  }
};

/// Encoded retrieval result for one sample.
struct fragment_input {
  std::array<std::int32_t, base_field_count> query{};
  std::array<encoded_sequence, channel_count> channels;  // newest first
  std::array<sequence_summary, 2> long_summary;          // full geohash-block / meal-time sub-sequences
};

inline std::size_t fragment_output_dim(const fragment_config& cfg, std::size_t emb_dim, std::size_t d_model) {
  std::size_t d = 0;
  for (std::size_t c = 0; c < channel_count; ++c) {
    if (c < 2 && cfg.simplified[c]) d += base_field_count * emb_dim;
    if (cfg.attention[c]) d += d_model;
  }
  return d;
}

struct fragment_trace {
  std::vector<attention_result> attention;  // in channel order, enabled channels only
};

/// Per-channel blocks in canonical channel order: [U*][U_c*] for the geohash
/// and meal-time channels, [U_c*] for short and long term. Channels are
/// independent of each other.
inline var fragment_forward(tape& t, const param_view& view, const embedding_tables& tables,
                            const fragment_params& params, const fragment_config& cfg, const fragment_input& in,
                            const var& query_embedding, fragment_trace* trace = nullptr) {
  std::vector<var> blocks;
  for (std::size_t c = 0; c < channel_count; ++c) {
    if (c < 2 && cfg.simplified[c]) {
      const auto w = simplified_weights(in.long_summary[c], in.query, cfg.per_behavior_weighting);
      blocks.push_back(pooled_embedding(t, view, tables, w, base_field_count));
    }
    if (cfg.attention[c]) {
      if (!params.attention[c]) throw model_error(std::string("missing attention parameters for channel ") + channel_names[c]);
      const encoded_sequence keys_seq = in.channels[c].head(cfg.attention_cap[c]);
      const auto& ap = *params.attention[c];
      attention_result r;
      if (keys_seq.valid_count() == 0) {
        r.output = t.constant(matrix(1, ap.d_model));
      } else {
        const var keys = embed_sequence(t, view, tables, keys_seq);
        r = multihead_target_attention(t, view, ap, keys, keys_seq.valid, query_embedding);
      }
      blocks.push_back(r.output);
      if (trace) trace->attention.push_back(std::move(r));
    }
  }
  if (blocks.empty()) return t.constant(matrix(1, 0));
  return concat_cols(blocks);
}

}  // namespace fin
