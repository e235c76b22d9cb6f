#pragma once

// Integrate network: align the four sub-sequences to a common L x d_model
// shape, stack their pairwise element-wise interactions into one integrated
// sequence, build the matching integrated query, and attend.

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fin/autodiff.hpp"
#include "fin/fragment.hpp"
#include "fin/params.hpp"

namespace fin {

/// Unordered channel pairs in canonical order (G,M) (G,S) (G,L) (M,S) (M,L) (S,L).
inline constexpr std::array<std::pair<std::size_t, std::size_t>, 6> cross_pairs = {
    {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}}};

/// Originals plus mul/add/sub for each pair.
inline constexpr std::size_t integrated_block_count = channel_count + 3 * cross_pairs.size();

struct integrate_config {
  std::size_t length = 16;  // rows kept per aligned sub-sequence
  // Collapse every aligned sub-sequence to its mean row before crossing.
  bool average_to_one = false;
};

struct integrate_params {
  std::array<param_id, channel_count> key_projection{};
  std::array<param_id, channel_count> query_projection{};
  param_id query_mix = 0;
  attention_params attention;

  static integrate_params create(param_store& store, std::size_t emb_dim, std::size_t d_model, std::size_t heads) {
    integrate_params p;
    for (std::size_t c = 0; c < channel_count; ++c) {
      const std::string base = std::string("integ.") + channel_names[c];
      p.key_projection[c] = store.add(base + ".proj", fields_of(static_cast<channel>(c)) * emb_dim, d_model);
      p.query_projection[c] = store.add(base + ".qproj", base_field_count * emb_dim, d_model);
    }
    p.query_mix = store.add("integ.qmix", integrated_block_count * d_model, d_model);
    p.attention = attention_params::create(store, "integ.attn", d_model, d_model, d_model, heads);
    return p;
  }
};

struct aligned_subsequence {
  var rows;                         // length x d_model, zero beyond the valid rows
  std::vector<std::uint8_t> valid;  // length
  channel source = channel::geohash_block;
};

struct integrated_sequence {
  var rows;  // blocks * block_rows x d_model
  std::vector<std::uint8_t> valid;
  std::size_t block_rows = 0;
  std::size_t blocks = 0;
};

/// Keeps the newest `length` behaviors, embeds them and projects to d_model.
/// Missing rows are zero and masked.
inline aligned_subsequence align(tape& t, const param_view& view, const embedding_tables& tables,
                                 const encoded_sequence& seq, param_id projection, std::size_t length,
                                 channel source) {
  const matrix& proj = view.value(projection);
  const std::size_t d = proj.cols();
  if (seq.fields * tables.dim != proj.rows()) throw dimension_error("align: projection does not match key width");
  aligned_subsequence out;
  out.source = source;
  const encoded_sequence head = seq.head(length);
  out.valid.assign(length, 0);
  if (head.valid_count() == 0) {
    out.rows = t.constant(matrix(length, d));
    return out;
  }
  std::copy(head.valid.begin(), head.valid.end(), out.valid.begin());
  var projected = matmul(embed_sequence(t, view, tables, head), view.bind(t, projection));
  if (head.length() < length) {
    projected = concat_rows({projected, t.constant(matrix(length - head.length(), d))});
  }
  out.rows = projected;
  return out;
}

/// Mean row of an aligned sub-sequence, valid iff any source row is.
inline aligned_subsequence average_to_one(const aligned_subsequence& a) {
  aligned_subsequence out;
  out.source = a.source;
  out.rows = mean_rows(a.rows, a.valid);
  const bool any = std::any_of(a.valid.begin(), a.valid.end(), [](std::uint8_t v) { return v != 0; });
  out.valid = {static_cast<std::uint8_t>(any ? 1 : 0)};
  return out;
}

/// Stacks the four originals followed by, for each canonical pair (a, b),
/// a*b, a+b and a-b row by row. A derived row is valid only when both source
/// rows are; invalid derived rows are zeroed.
inline integrated_sequence cross(const std::array<aligned_subsequence, channel_count>& seqs) {
  const std::size_t rows = seqs[0].rows.rows();
  const std::size_t cols = seqs[0].rows.cols();
  for (const auto& s : seqs) {
    if (s.rows.rows() != rows || s.rows.cols() != cols || s.valid.size() != rows) {
      throw dimension_error("cross: aligned sub-sequences differ in shape");
    }
  }
  std::vector<var> blocks;
  std::vector<std::uint8_t> valid;
  blocks.reserve(integrated_block_count);
  for (const auto& s : seqs) {
    blocks.push_back(s.rows);
    valid.insert(valid.end(), s.valid.begin(), s.valid.end());
  }
  for (const auto& [i, j] : cross_pairs) {
    const auto& a = seqs[i];
    const auto& b = seqs[j];
    std::vector<std::uint8_t> both(rows);
    bool all = true;
    for (std::size_t r = 0; r < rows; ++r) {
      both[r] = a.valid[r] && b.valid[r];
      all = all && both[r];
    }
    for (int op = 0; op < 3; ++op) {
      var v = op == 0 ? mul(a.rows, b.rows) : op == 1 ? add(a.rows, b.rows) : sub(a.rows, b.rows);
      if (!all) v = mask_rows(v, both);
      blocks.push_back(v);
      valid.insert(valid.end(), both.begin(), both.end());
    }
  }
  integrated_sequence out;
  out.rows = concat_rows(blocks);
  out.valid = std::move(valid);
  out.block_rows = rows;
  out.blocks = blocks.size();
  return out;
}

/// Same sequence with its blocks rearranged: block i of the result is block
/// order[i] of the input.
inline integrated_sequence reorder_blocks(const integrated_sequence& s, const std::vector<std::size_t>& order) {
  if (order.size() != s.blocks) throw dimension_error("reorder_blocks: order length mismatch");
  std::vector<var> parts;
  std::vector<std::uint8_t> valid;
  for (std::size_t b : order) {
    parts.push_back(slice_rows(s.rows, b * s.block_rows, s.block_rows));
    valid.insert(valid.end(), s.valid.begin() + static_cast<std::ptrdiff_t>(b * s.block_rows),
                 s.valid.begin() + static_cast<std::ptrdiff_t>((b + 1) * s.block_rows));
  }
  integrated_sequence out = s;
  out.rows = concat_rows(parts);
  out.valid = std::move(valid);
  return out;
}

/// The four per-channel queries and their 18 pairwise interactions, laid out
/// along the feature axis in the same block order as cross() (1 x 22*d).
inline var cross_queries(const std::array<var, channel_count>& queries) {
  std::vector<var> parts(queries.begin(), queries.end());
  for (const auto& [i, j] : cross_pairs) {
    parts.push_back(mul(queries[i], queries[j]));
    parts.push_back(add(queries[i], queries[j]));
    parts.push_back(sub(queries[i], queries[j]));
  }
  return concat_cols(parts);
}

/// Projects the query embedding per channel, crosses the projections and
/// mixes the result back to d_model.
inline var integrate_query(tape& t, const param_view& view, const integrate_params& p, const var& query_embedding) {
  std::array<var, channel_count> qs;
  for (std::size_t c = 0; c < channel_count; ++c) qs[c] = matmul(query_embedding, view.bind(t, p.query_projection[c]));
  return matmul(cross_queries(qs), view.bind(t, p.query_mix));
}

inline integrated_sequence build_integrated_sequence(tape& t, const param_view& view, const embedding_tables& tables,
                                                     const integrate_params& p, const integrate_config& cfg,
                                                     const fragment_input& in) {
  std::array<aligned_subsequence, channel_count> aligned;
  for (std::size_t c = 0; c < channel_count; ++c) {
    aligned[c] = align(t, view, tables, in.channels[c], p.key_projection[c], cfg.length, static_cast<channel>(c));
    if (cfg.average_to_one) aligned[c] = average_to_one(aligned[c]);
  }
  return cross(aligned);
}

/// Target attention of the integrated query over the integrated sequence
/// (1 x d_model); zero when every row is masked.
inline attention_result integrate_forward(tape& t, const param_view& view, const embedding_tables& tables,
                                          const integrate_params& p, const integrate_config& cfg,
                                          const fragment_input& in, const var& query_embedding) {
  const integrated_sequence seq = build_integrated_sequence(t, view, tables, p, cfg, in);
  const var q = integrate_query(t, view, p, query_embedding);
  // Masked rows receive zero attention weight, so only the valid ones are fed in.
  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < seq.valid.size(); ++r)
    if (seq.valid[r]) keep.push_back(r);
  if (keep.empty()) return multihead_target_attention(t, view, p.attention, seq.rows, seq.valid, q);
  const std::size_t n = keep.size();
  const var rows = n == seq.valid.size() ? seq.rows : select_rows(seq.rows, std::move(keep));
  return multihead_target_attention(t, view, p.attention, rows, std::vector<std::uint8_t>(n, 1), q);
}

}  // namespace fin
