#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "support.hpp"

using namespace fin;

TEST(Matrix, ElementwiseAndIdentity) {
  const matrix a{{1, 2}};
  const matrix b{{3, 4}};
  EXPECT_EQ(elementwise_mul(a, b), (matrix{{3, 8}}));
  EXPECT_EQ(add(a, b), (matrix{{4, 6}}));
  EXPECT_EQ(elementwise_sub(a, b), (matrix{{-2, -2}}));
  const matrix m{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(matmul(m, matrix::identity(3)), m);
  EXPECT_EQ(elementwise_sub(add(m, m), m), m);
  EXPECT_EQ(concat_rows(a, b), (matrix{{1, 2}, {3, 4}}));
  EXPECT_EQ(concat_cols(a, b), (matrix{{1, 2, 3, 4}}));
  EXPECT_THROW(matmul(m, m), dimension_error);
  EXPECT_THROW(add(a, m), dimension_error);
  EXPECT_THROW(concat_rows(a, m), dimension_error);
}

TEST(Softmax, BasicCases) {
  const std::vector<double> zero{0.0, 0.0};
  EXPECT_EQ(softmax(zero), (std::vector<double>{0.5, 0.5}));
  const std::vector<double> two{3.7, -1e300};
  const std::vector<std::uint8_t> first{1, 0};
  EXPECT_EQ(softmax(two, first), (std::vector<double>{1.0, 0.0}));
  const std::vector<std::uint8_t> none{0, 0};
  EXPECT_THROW(softmax(zero, none), degenerate_input_error);

  std::mt19937_64 g(1);
  std::normal_distribution<double> n(0, 3);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> v(1 + g() % 10);
    for (auto& x : v) x = n(g);
    std::vector<std::uint8_t> keep(v.size());
    for (auto& k : keep) k = g() % 3 != 0;
    keep[g() % v.size()] = 1;
    const auto y = softmax(v, keep);
    std::vector<double> shifted = v;
    for (auto& x : shifted) x += 12.5;
    const auto ys = softmax(shifted, keep);
    double total = 0.0;
    for (std::size_t j = 0; j < y.size(); ++j) {
      if (!keep[j]) {
        ASSERT_EQ(y[j], 0.0);
      }
      ASSERT_GE(y[j], 0.0);
      ASSERT_NEAR(y[j], ys[j], 1e-12);
      total += y[j];
    }
    ASSERT_NEAR(total, 1.0, 1e-12);
  }
}

namespace {

// Checks one op's backward rule on random inputs; the op result is reduced
// against a fixed random matrix so every output entry carries a gradient.
void check_op(const char* name, std::size_t ar, std::size_t ac, std::size_t br, std::size_t bc,
              const std::function<var(const var&, const var&)>& op, std::uint64_t seed = 3) {
  param_store s;
  const auto a = s.add("a", ar, ac);
  const auto b = s.add("b", br, bc);
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  for (auto id : {a, b})
    for (double& x : s[id].value.values()) x = u(g);
  matrix weight;
  const auto f = [&](tape& t, const param_view& v) {
    var out = op(v.bind(t, a), v.bind(t, b));
    if (weight.empty()) {
      weight = matrix(out.rows(), out.cols());
      std::mt19937_64 wg(seed + 1);
      for (double& x : weight.values()) x = u(wg);
    }
    return sum(mul(out, t.constant(weight)));
  };
  grad_check_options opt;
  opt.samples = 40;
  const auto r = grad_check(s, f, opt);
  EXPECT_LT(r.max_relative_error, 1e-6) << name << " worst " << r.worst_parameter << "[" << r.worst_index
                                         << "] analytic " << r.worst_analytic << " numeric " << r.worst_numeric;
}

}  // namespace

TEST(Autodiff, EveryBackwardRulePassesGradCheck) {
  check_op("matmul", 3, 4, 4, 2, [](const var& a, const var& b) { return matmul(a, b); });
  check_op("matmul_nt", 3, 4, 5, 4, [](const var& a, const var& b) { return matmul_nt(a, b); });
  check_op("matmul_tn", 4, 3, 4, 2, [](const var& a, const var& b) { return matmul_tn(a, b); });
  check_op("add", 3, 2, 3, 2, [](const var& a, const var& b) { return add(a, b); });
  check_op("sub", 3, 2, 3, 2, [](const var& a, const var& b) { return sub(a, b); });
  check_op("mul", 3, 2, 3, 2, [](const var& a, const var& b) { return mul(a, b); });
  check_op("scale", 2, 2, 1, 1, [](const var& a, const var&) { return scale(a, -2.5); });
  check_op("add_row_bias", 4, 3, 1, 3, [](const var& a, const var& b) { return add_row_bias(a, b); });
  check_op("concat_rows", 2, 3, 1, 3, [](const var& a, const var& b) { return concat_rows({a, b, a}); });
  check_op("concat_cols", 2, 3, 2, 1, [](const var& a, const var& b) { return concat_cols({b, a}); });
  check_op("slice_cols", 2, 5, 1, 1, [](const var& a, const var&) { return slice_cols(a, 1, 3); });
  check_op("slice_rows", 5, 2, 1, 1, [](const var& a, const var&) { return slice_rows(a, 2, 2); });
  check_op("select_rows", 5, 2, 1, 1, [](const var& a, const var&) { return select_rows(a, {4, 0, 0, 2}); });
  check_op("mask_rows", 4, 3, 1, 1, [](const var& a, const var&) { return mask_rows(a, {1, 0, 1, 1}); });
  check_op("mean_rows", 4, 3, 1, 1, [](const var& a, const var&) { return mean_rows(a, {1, 0, 1, 1}); });
  check_op("silu", 3, 3, 1, 1, [](const var& a, const var&) { return silu(a); });
  check_op("softplus", 3, 3, 1, 1, [](const var& a, const var&) { return softplus(a); });
  check_op("masked_softmax", 1, 6, 1, 1,
           [](const var& a, const var&) { return masked_softmax(a, {1, 1, 0, 1, 0, 1}); });
  check_op("log", 2, 2, 1, 1, [](const var& a, const var&) { return log(add(mul(a, a), a.owner().constant(matrix(2, 2, 0.5)))); });
  check_op("pick", 2, 3, 1, 1, [](const var& a, const var&) { return pick(a, 1, 2); });
}

TEST(Autodiff, GatherAndPoolScatterIntoTables) {
  param_store s;
  const auto table = s.add("table", 6, 3, param_kind::embedding);
  s.initialize(4, 0.5);
  const auto f = [&](tape& t, const param_view& v) {
    var a = gather_rows(t, v.value(table), v.grad(table), {1, 3, 1});
    var b = pooled_rows(t, v.value(table), v.grad(table), {2, 3, 5}, {0.5, -1.0, 0.25});
    return sum(mul(concat_rows({a, b}), concat_rows({a, b})));
  };
  EXPECT_LT(grad_check(s, f).max_relative_error, 1e-6);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  param_store s;
  const auto w = s.add("w", 1, 1);
  s[w].value[0] = 0.0;
  s[w].grad[0] = 1.0;
  adam_config cfg;
  adam_step(s, cfg);
  // m = 0.1, v = 0.001; bias-corrected both equal g, so the step is lr * 1 / (1 + eps).
  EXPECT_NEAR(s[w].value[0], -cfg.learning_rate, 1e-10);
  EXPECT_DOUBLE_EQ(s[w].value[0], -cfg.learning_rate * 1.0 / (1.0 + cfg.epsilon));
  EXPECT_EQ(s[w].grad[0], 0.0);
  EXPECT_EQ(s.step(), 1u);
}

TEST(Adam, ZeroGradientLeavesValueAndIdenticalStoresStayIdentical) {
  param_store a;
  const auto w = a.add("w", 2, 3);
  a.initialize(9);
  const matrix before = a[w].value;
  adam_step(a, {});
  EXPECT_EQ(a[w].value, before);

  param_store b = a;
  for (std::size_t i = 0; i < 6; ++i) a[w].grad[i] = b[w].grad[i] = 0.1 * static_cast<double>(i) - 0.2;
  adam_step(a, {});
  adam_step(b, {});
  EXPECT_EQ(a[w].value, b[w].value);
  EXPECT_EQ(a[w].m, b[w].m);
  EXPECT_EQ(a[w].v, b[w].v);
}

TEST(Adam, RejectsNonFiniteGradientsAndBadConfig) {
  param_store s;
  const auto w = s.add("layer.w", 1, 2);
  s[w].grad[1] = std::nan("");
  try {
    adam_step(s, {});
    FAIL() << "expected training_error";
  } catch (const training_error& e) {
    EXPECT_NE(std::string(e.what()).find("layer.w"), std::string::npos);
  }
  adam_config bad;
  bad.beta1 = 1.0;
  EXPECT_THROW(bad.validate(), config_error);
}

TEST(GradCheck, QuadraticAndSymmetry) {
  param_store s;
  const auto w = s.add("w", 1, 1);
  s[w].value[0] = 3.0;
  grad_buffer g(s);
  {
    tape t;
    const param_view v(s, &g);
    var x = v.bind(t, w);
    t.backward(mul(x, x));
  }
  EXPECT_EQ(g[w][0], 6.0);
  const auto r = grad_check(s, [&](tape& t, const param_view& v) {
    var x = v.bind(t, w);
    return mul(x, x);
  });
  EXPECT_LT(r.max_relative_error, 1e-7);
  EXPECT_EQ(relative_error(1.0, 1.1), relative_error(1.1, 1.0));
  EXPECT_EQ(relative_error(-2.0, 3.0), relative_error(3.0, -2.0));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  param_store s;
  s.add("a", 3, 4);
  s.add("emb", 5, 2, param_kind::embedding);
  s.add("b", 1, 4, param_kind::bias);
  s.initialize(11, 0.3);
  for (auto& p : s.params())
    for (double& x : p.grad.values()) x = 0.01;
  adam_config cfg;
  cfg.learning_rate = 0.0123;
  adam_step(s, cfg);
  std::stringstream buf;
  save_checkpoint(buf, s, cfg, "k=v\n");
  const auto ck = load_checkpoint(buf);
  EXPECT_EQ(ck.meta, "k=v\n");
  EXPECT_EQ(ck.adam.learning_rate, 0.0123);
  EXPECT_EQ(ck.params.step(), 1u);
  ASSERT_EQ(ck.params.size(), s.size());
  for (param_id i = 0; i < s.size(); ++i) {
    EXPECT_EQ(ck.params[i].name, s[i].name);
    EXPECT_EQ(ck.params[i].kind, s[i].kind);
    EXPECT_EQ(ck.params[i].value, s[i].value);
    EXPECT_EQ(ck.params[i].m, s[i].m);
    EXPECT_EQ(ck.params[i].v, s[i].v);
  }
  std::stringstream junk("not a checkpoint at all");
  EXPECT_THROW(load_checkpoint(junk), format_error);
  std::string bytes = buf.str();
  std::stringstream cut(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_checkpoint(cut), format_error);
}

TEST(Initialization, FollowsDeclaredRanges) {
  param_store s;
  const auto w = s.add("w", 10, 30);
  const auto e = s.add("e", 50, 4, param_kind::embedding);
  const auto b = s.add("b", 1, 30, param_kind::bias);
  s.initialize(5);
  const double limit = std::sqrt(6.0 / 40.0);
  for (double x : s[w].value.values()) ASSERT_LE(std::abs(x), limit);
  for (double x : s[e].value.values()) ASSERT_LE(std::abs(x), 0.05);
  for (double x : s[b].value.values()) ASSERT_EQ(x, 0.0);
  param_store t = s;
  t.initialize(5);
  EXPECT_EQ(t[w].value, s[w].value);
}
