#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "support.hpp"

using namespace fin;
using namespace fin::testing;

namespace {

struct rig {
  param_store store;
  embedding_tables tables;
  fragment_params fragment;
  integrate_params integrate;
  fragment_config cfg;
  integrate_config icfg;

  explicit rig(std::uint64_t seed = 1, const sample_shape& sh = {}) {
    tables = embedding_tables::create(store, sh.vocab, sh.users, 4);
    fragment = fragment_params::create(store, cfg, 4, 16, 4);
    integrate = integrate_params::create(store, 4, 16, 4);
    store.initialize(seed, 0.5);
  }
  param_view view() const { return param_view(store, nullptr); }
};

encoded_sequence seq_of(std::size_t fields, const std::vector<std::vector<std::int32_t>>& rows,
                        const std::vector<double>& counts = {}) {
  encoded_sequence s;
  s.fields = fields;
  for (std::size_t j = 0; j < rows.size(); ++j) s.push(rows[j], counts.empty() ? 1.0 : counts[j]);
  return s;
}

std::vector<double> values(const var& v) { return v.value().values(); }

}  // namespace

TEST(Relevance, EqualityScores) {
  const auto s = seq_of(4, {{1, 5, 0, 0}, {2, 7, 0, 0}, {3, 5, 0, 0}});
  EXPECT_EQ(relevance_scores(s, 1, 5), (std::vector<double>{1, 0, 1}));
  EXPECT_EQ(relevance_scores(s, 1, 9), (std::vector<double>{0, 0, 0}));
  const auto same = seq_of(4, {{1, 5, 0, 0}, {1, 5, 0, 0}});
  EXPECT_EQ(relevance_scores(same, 0, 1), (std::vector<double>{1, 1}));
}

TEST(ZScore, Examples) {
  const std::vector<double> r{1, 0, 1}, c{2, 1, 1};
  EXPECT_DOUBLE_EQ(z_score(r, c), 0.75);
  const std::vector<double> ones{1, 1, 1}, zeros{0, 0, 0};
  EXPECT_EQ(z_score(ones, c), 1.0);
  EXPECT_EQ(z_score(zeros, c), 0.0);
  EXPECT_EQ(z_score(std::vector<double>{}, std::vector<double>{}), 0.0);
}

TEST(ZScore, MatchesClickWeightedFractionOnFuzzedInput) {
  std::mt19937_64 g(2);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = g() % 51;
    std::vector<double> r(n), c(n);
    std::vector<std::uint8_t> valid(n);
    double num = 0, den = 0;
    for (std::size_t j = 0; j < n; ++j) {
      r[j] = static_cast<double>(g() % 2);
      c[j] = static_cast<double>(1 + g() % 9);
      valid[j] = g() % 5 != 0;
      if (valid[j]) {
        num += r[j] * c[j];
        den += c[j];
      }
    }
    const double z = z_score(r, c, valid);
    ASSERT_GE(z, 0.0);
    ASSERT_LE(z, 1.0);
    ASSERT_DOUBLE_EQ(z, den > 0 ? num / den : 0.0);
  }
}

TEST(SimplifiedAttention, DegenerateAndIdentityCases) {
  rig R;
  tape t;
  const std::array<std::int32_t, 4> q{1, 2, 3, 4};
  const auto empty = simplified_attention(t, R.view(), R.tables, seq_of(4, {}), q);
  EXPECT_EQ(values(empty), std::vector<double>(16, 0.0));
  const auto nomatch = simplified_attention(t, R.view(), R.tables, seq_of(4, {{5, 5, 5, 5}, {6, 6, 5, 7}}), q);
  EXPECT_EQ(values(nomatch), std::vector<double>(16, 0.0));
  // One behavior equal to the query: z = 1 on every field, U_i = e_i.
  const auto single = simplified_attention(t, R.view(), R.tables, seq_of(4, {{1, 2, 3, 4}}), q);
  const auto expect = values(embed_query(t, R.view(), R.tables, q));
  const auto got = values(single);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_DOUBLE_EQ(got[i], expect[i]);
}

TEST(SimplifiedAttention, LinearInZ) {
  rig R;
  std::mt19937_64 g(3);
  const auto s = random_channel(g, {}, 4, 15);
  const std::array<std::int32_t, 4> q{s.id(0, 0), s.id(1, 1), 2, 3};
  const auto base = summarize(s, q);
  auto doubled = base;
  for (auto& z : doubled.z) z *= 2.0;
  tape t;
  const auto a = values(pooled_embedding(t, R.view(), R.tables, simplified_weights(base, q, false), 4));
  const auto b = values(pooled_embedding(t, R.view(), R.tables, simplified_weights(doubled, q, false), 4));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], 2.0 * a[i], 1e-15);
}

TEST(SimplifiedAttention, LiteralPoolingEqualsZTimesMean) {
  rig R;
  std::mt19937_64 g(4);
  const auto s = random_channel(g, {}, 4, 11);
  const std::array<std::int32_t, 4> q{s.id(2, 0), s.id(2, 1), s.id(5, 2), 1};
  tape t;
  const auto u = values(simplified_attention(t, R.view(), R.tables, s, q));
  const auto keys = embed_sequence(t, R.view(), R.tables, s).value();
  for (std::size_t f = 0; f < 4; ++f) {
    const double z = z_score(relevance_scores(s, f, q[f]), s.counts);
    for (std::size_t d = 0; d < 4; ++d) {
      double mean = 0.0;
      for (std::size_t j = 0; j < s.length(); ++j) mean += keys(j, f * 4 + d);
      mean /= static_cast<double>(s.length());
      EXPECT_NEAR(u[f * 4 + d], z * mean, 1e-14);
    }
  }
}

TEST(TargetAttention, SingleKeyDuplicateKeysAndEmpty) {
  rig R;
  const auto& ap = *R.fragment.attention[0];
  std::mt19937_64 g(5);
  const auto s = random_channel(g, {}, 4, 3);
  tape t;
  const std::array<std::int32_t, 4> qi{1, 1, 1, 1};
  const var q = embed_query(t, R.view(), R.tables, qi);
  const var k1 = embed_sequence(t, R.view(), R.tables, s.head(1));
  const auto one = multihead_target_attention(t, R.view(), ap, k1, {1}, q);
  const auto expect = matmul(R.store[ap.wv].value.row(0).size() ? k1.value() : k1.value(), R.store[ap.wv].value);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(one.output.value()[i], expect[i], 1e-14);
  for (const auto& w : one.weights) EXPECT_EQ(w, std::vector<double>{1.0});

  const var kk = concat_rows({k1, k1});
  const auto two = multihead_target_attention(t, R.view(), ap, kk, {1, 1}, q);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(two.output.value()[i], one.output.value()[i], 1e-14);

  const auto none = multihead_target_attention(t, R.view(), ap, kk, {0, 0}, q);
  EXPECT_EQ(none.output.value().values(), std::vector<double>(16, 0.0));
}

TEST(TargetAttention, WeightsNormalisedAndPermutationInvariant) {
  rig R;
  const auto& ap = *R.fragment.attention[3];
  std::mt19937_64 g(6);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + g() % 12;
    const auto s = random_channel(g, {}, 6, n);
    std::vector<std::uint8_t> valid(n);
    for (auto& v : valid) v = g() % 4 != 0;
    valid[g() % n] = 1;
    tape t;
    const std::array<std::int32_t, 4> qi{2, 3, 1, 4};
    const var q = embed_query(t, R.view(), R.tables, qi);
    const var keys = embed_sequence(t, R.view(), R.tables, s);
    const auto base = multihead_target_attention(t, R.view(), ap, keys, valid, q);
    for (const auto& w : base.weights) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (!valid[j]) {
          ASSERT_EQ(w[j], 0.0);
        }
        total += w[j];
      }
      ASSERT_NEAR(total, 1.0, 1e-12);
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), g);
    std::vector<std::uint8_t> pvalid(n);
    for (std::size_t j = 0; j < n; ++j) pvalid[j] = valid[perm[j]];
    const auto moved = multihead_target_attention(t, R.view(), ap, select_rows(keys, perm), pvalid, q);
    for (std::size_t i = 0; i < 16; ++i) ASSERT_NEAR(moved.output.value()[i], base.output.value()[i], 1e-10);
  }
}

TEST(Fragment, OutputDimensionAndEmptyChannels) {
  rig R;
  EXPECT_EQ(fragment_output_dim(R.cfg, 4, 16), 2 * (4 * 4 + 16) + 2 * 16);
  fragment_input in;
  in.query = {1, 2, 3, 4};
  for (std::size_t c = 0; c < channel_count; ++c) in.channels[c].fields = fields_of(static_cast<channel>(c));
  tape t;
  const var q = embed_query(t, R.view(), R.tables, in.query);
  const var out = fragment_forward(t, R.view(), R.tables, R.fragment, R.cfg, in, q);
  EXPECT_EQ(out.cols(), 96u);
  EXPECT_EQ(out.value().values(), std::vector<double>(96, 0.0));
}

TEST(Fragment, MaskingOneChannelChangesOnlyItsBlock) {
  rig R;
  std::mt19937_64 g(7);
  const auto s = random_sample(g);
  auto masked = s.input;
  masked.channels[1] = encoded_sequence{};
  masked.channels[1].fields = 4;
  masked.long_summary[1] = summarize(masked.channels[1], std::span<const std::int32_t>(masked.query.data(), 4));
  tape t;
  const var q = embed_query(t, R.view(), R.tables, s.input.query);
  const auto a = values(fragment_forward(t, R.view(), R.tables, R.fragment, R.cfg, s.input, q));
  const auto b = values(fragment_forward(t, R.view(), R.tables, R.fragment, R.cfg, masked, q));
  // Layout: G [U* 16][U_c* 16], M [16][16], S [16], L [16].
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (i >= 32 && i < 64) {
      ASSERT_EQ(b[i], 0.0);
    } else {
      ASSERT_EQ(a[i], b[i]) << i;
    }
  }
}

// ---------------------------------------------------------------------------

TEST(Integrate, CrossArithmeticAndMasks) {
  tape t;
  std::array<aligned_subsequence, channel_count> seqs;
  for (std::size_t c = 0; c < channel_count; ++c) {
    seqs[c].rows = t.constant(matrix{{1.0 + c, 2.0 + c}, {0.5 * c, -1.0}});
    seqs[c].valid = {1, 1};
  }
  seqs[0].rows = t.constant(matrix{{1, 2}, {7, 7}});
  seqs[1].rows = t.constant(matrix{{3, 4}, {9, 9}});
  seqs[1].valid = {1, 0};
  const auto x = cross(seqs);
  EXPECT_EQ(x.blocks, integrated_block_count);
  EXPECT_EQ(x.blocks, 22u);
  const matrix& v = x.rows.value();
  ASSERT_EQ(v.rows(), 44u);
  // Block 4..6 = (G, M) mul, add, sub.
  EXPECT_EQ(v(8, 0), 3.0);
  EXPECT_EQ(v(8, 1), 8.0);
  EXPECT_EQ(v(10, 0), 4.0);
  EXPECT_EQ(v(10, 1), 6.0);
  EXPECT_EQ(v(12, 0), -2.0);
  EXPECT_EQ(v(12, 1), -2.0);
  // Row 1 of M is masked: derived (G, M) rows are zero and invalid; the
  // original M row keeps its own mask.
  for (std::size_t b = 4; b < 7; ++b) {
    EXPECT_EQ(x.valid[b * 2 + 1], 0);
    EXPECT_EQ(v(b * 2 + 1, 0), 0.0);
    EXPECT_EQ(v(b * 2 + 1, 1), 0.0);
  }
  EXPECT_EQ(x.valid[3], 0);
  EXPECT_EQ(x.valid[1], 1);

  seqs[1] = seqs[0];
  const auto same = cross(seqs);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 2; ++c) {
      EXPECT_EQ(same.rows.value()(12 + r, c), 0.0);
      EXPECT_EQ(same.rows.value()(8 + r, c), seqs[0].rows.value()(r, c) * seqs[0].rows.value()(r, c));
    }
  seqs[2].rows = t.constant(matrix(3, 2));
  seqs[2].valid = {1, 1, 1};
  EXPECT_THROW(cross(seqs), dimension_error);
}

TEST(Integrate, AlignTruncatesAndPads) {
  rig R;
  std::mt19937_64 g(8);
  tape t;
  const auto empty = align(t, R.view(), R.tables, seq_of(4, {}), R.integrate.key_projection[0], 16, channel::geohash_block);
  EXPECT_EQ(empty.rows.value(), matrix(16, 16));
  EXPECT_EQ(empty.valid, std::vector<std::uint8_t>(16, 0));
  const auto longer = random_channel(g, {}, 4, 21);
  const auto a = align(t, R.view(), R.tables, longer, R.integrate.key_projection[0], 16, channel::geohash_block);
  EXPECT_EQ(a.valid, std::vector<std::uint8_t>(16, 1));
  const auto expect = matmul(embed_sequence(t, R.view(), R.tables, longer.head(16)).value(),
                             R.store[R.integrate.key_projection[0]].value);
  EXPECT_EQ(a.rows.value(), expect);
  const auto shorter = random_channel(g, {}, 6, 5);
  const auto b = align(t, R.view(), R.tables, shorter, R.integrate.key_projection[3], 16, channel::long_term);
  EXPECT_EQ(std::count(b.valid.begin(), b.valid.end(), 1), 5);
  for (std::size_t r = 5; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(b.rows.value()(r, c), 0.0);
}

TEST(Integrate, QueryCrossScaling) {
  tape t;
  std::mt19937_64 g(9);
  std::normal_distribution<double> n;
  std::array<var, channel_count> q, q2;
  for (std::size_t c = 0; c < channel_count; ++c) {
    matrix m(1, 16);
    for (double& x : m.values()) x = n(g);
    q[c] = t.constant(m);
    for (double& x : m.values()) x *= 2.0;
    q2[c] = t.constant(m);
  }
  const auto a = values(cross_queries(q));
  const auto b = values(cross_queries(q2));
  ASSERT_EQ(a.size(), 22u * 16u);
  for (std::size_t blk = 0; blk < 22; ++blk) {
    const bool is_mul = blk >= 4 && (blk - 4) % 3 == 0;
    const double factor = is_mul ? 4.0 : 2.0;
    for (std::size_t i = 0; i < 16; ++i) ASSERT_NEAR(b[blk * 16 + i], factor * a[blk * 16 + i], 1e-12);
  }
  std::array<var, channel_count> zero;
  for (auto& z : zero) z = t.constant(matrix(1, 16));
  EXPECT_EQ(values(cross_queries(zero)), std::vector<double>(22 * 16, 0.0));
  std::array<var, channel_count> same{q[0], q[0], q[0], q[0]};
  const auto s = values(cross_queries(same));
  for (std::size_t blk = 6; blk < 22; blk += 3)
    for (std::size_t i = 0; i < 16; ++i) ASSERT_EQ(s[blk * 16 + i], 0.0);
}

TEST(Integrate, EmptyChannelsGiveZeroOutput) {
  rig R;
  fragment_input in;
  in.query = {1, 2, 3, 4};
  for (std::size_t c = 0; c < channel_count; ++c) in.channels[c].fields = fields_of(static_cast<channel>(c));
  tape t;
  const var q = embed_query(t, R.view(), R.tables, in.query);
  const auto r = integrate_forward(t, R.view(), R.tables, R.integrate, R.icfg, in, q);
  EXPECT_EQ(r.output.value().values(), std::vector<double>(16, 0.0));
}

TEST(Integrate, BlockPermutationInvariance) {
  rig R;
  std::mt19937_64 g(10);
  for (int trial = 0; trial < 100; ++trial) {
    sample_shape sh;
    for (auto& l : sh.lengths) l = g() % 20;
    const auto s = random_sample(g, sh);
    tape t;
    const var q = embed_query(t, R.view(), R.tables, s.input.query);
    const auto seq = build_integrated_sequence(t, R.view(), R.tables, R.integrate, R.icfg, s.input);
    const var iq = integrate_query(t, R.view(), R.integrate, q);
    if (std::none_of(seq.valid.begin(), seq.valid.end(), [](auto v) { return v != 0; })) continue;
    const auto base = multihead_target_attention(t, R.view(), R.integrate.attention, seq.rows, seq.valid, iq);
    const auto direct = integrate_forward(t, R.view(), R.tables, R.integrate, R.icfg, s.input, q);
    std::vector<std::size_t> order(seq.blocks);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), g);
    const auto moved = reorder_blocks(seq, order);
    const auto out = multihead_target_attention(t, R.view(), R.integrate.attention, moved.rows, moved.valid, iq);
    for (std::size_t i = 0; i < 16; ++i) {
      ASSERT_NEAR(out.output.value()[i], base.output.value()[i], 1e-10);
      ASSERT_NEAR(direct.output.value()[i], base.output.value()[i], 1e-10);
    }
  }
}

TEST(Integrate, AverageToOneFlag) {
  rig R;
  R.icfg.average_to_one = true;
  std::mt19937_64 g(11);
  const auto s = random_sample(g);
  tape t;
  const auto seq = build_integrated_sequence(t, R.view(), R.tables, R.integrate, R.icfg, s.input);
  EXPECT_EQ(seq.block_rows, 1u);
  EXPECT_EQ(seq.rows.rows(), 22u);
}
