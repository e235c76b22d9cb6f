#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "support.hpp"

using namespace fin;
using namespace fin::testing;

namespace {

std::vector<encoded_sample> random_samples(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::vector<encoded_sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    sample_shape sh;
    for (auto& l : sh.lengths) l = g() % 14;
    out.push_back(random_sample(g, sh));
  }
  return out;
}

encoded_sample empty_sample() {
  encoded_sample s;
  s.input.query = {1, 2, 3, 4};
  for (std::size_t c = 0; c < channel_count; ++c) s.input.channels[c].fields = fields_of(static_cast<channel>(c));
  s.label = 1;
  return s;
}

}  // namespace

TEST(Model, OutputIsProbabilityAndDeterministic) {
  fin_model m(small_config());
  m.initialize(3);
  fin_model twin(small_config());
  twin.initialize(3);
  for (const auto& s : random_samples(50, 1)) {
    const double p = m.predict(s);
    ASSERT_GT(p, 0.0);
    ASSERT_LT(p, 1.0);
    ASSERT_EQ(p, twin.predict(s));
  }
}

TEST(Model, ZeroBehaviorUserStillScores) {
  for (auto v : variant_names) {
    fin_model m(small_config(v));
    m.initialize(1);
    const double p = m.predict(empty_sample());
    EXPECT_TRUE(p > 0.0 && p < 1.0) << v;
  }
}

TEST(Model, LossAtHalfIsLn2) {
  EXPECT_NEAR(nll(0.5, 1), std::log(2.0), 1e-15);
  EXPECT_NEAR(nll(0.5, 0), std::log(2.0), 1e-15);
  EXPECT_NEAR(nll(1.0, 0), -std::log(1e-12), 1e-9);
  // A zero last layer gives equal logits, so p = 0.5.
  fin_model m(small_config());
  m.initialize(2);
  auto& store = m.params();
  for (auto& p : store.params())
    if (p.name.rfind("mlp.l3", 0) == 0) p.value.set_zero();
  tape t;
  const auto l = m.loss(t, param_view(store, nullptr), random_samples(1, 4)[0]);
  EXPECT_NEAR(l.value()[0], std::log(2.0), 1e-15);
}

TEST(Model, InvalidConfigurationsAreRejected) {
  auto c = small_config();
  c.heads = 3;
  EXPECT_THROW(fin_model{c}, config_error);
  EXPECT_THROW(apply_variant(small_config(), "nope"), config_error);
  c = small_config();
  c.embedding_init = 0.0;
  EXPECT_THROW(fin_model{c}, config_error);
}

TEST(Model, ConfigSerializationRoundTrips) {
  for (auto v : variant_names) {
    const auto c = small_config(v);
    EXPECT_EQ(serialize(deserialize_model_config(serialize(c))), serialize(c)) << v;
  }
}

TEST(Metrics, AucExamples) {
  EXPECT_EQ(auc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}), 1.0);
  EXPECT_EQ(auc(std::vector<double>{0.1, 0.9}, std::vector<int>{1, 0}), 0.0);
  EXPECT_EQ(auc(std::vector<double>{0.5, 0.5, 0.5}, std::vector<int>{1, 0, 1}), 0.5);
  EXPECT_EQ(auc(std::vector<double>{0.8, 0.4, 0.6, 0.2}, std::vector<int>{1, 1, 0, 0}), 0.75);
  EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), metric_error);
  EXPECT_THROW(auc(std::vector<double>{}, std::vector<int>{}), metric_error);
  EXPECT_THROW(auc(std::vector<double>{0.1}, std::vector<int>{1, 0}), dimension_error);
}

TEST(Metrics, AucMatchesPairCountingOnSmallInstances) {
  std::mt19937_64 g(12);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + g() % 11;
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(g() % 5) / 4.0;
      l[i] = static_cast<int>(g() % 2);
    }
    l[0] = 1;
    l[1] = 0;
    ASSERT_NEAR(auc(s, l), pair_count_auc(s, l), 1e-12);
  }
}

TEST(Model, FullGradientCheckEveryVariant) {
  const auto sample = random_samples(1, 21)[0];
  for (auto v : variant_names) {
    fin_model m(small_config(v));
    m.initialize(5);
    const auto r = grad_check(m.params(), [&](tape& t, const param_view& view) { return m.loss(t, view, sample); });
    EXPECT_LT(r.max_relative_error, 1e-4) << v << " worst " << r.worst_parameter << "[" << r.worst_index << "]";
  }
}

TEST(Model, ParameterGroupsFollowVariant) {
  const auto groups = [](std::string_view v) {
    fin_model m(small_config(v));
    return m.param_groups();
  };
  const auto has = [](const std::vector<std::string>& g, const std::string& x) {
    return std::find(g.begin(), g.end(), x) != g.end();
  };
  const auto full = groups("full_fin");
  const auto fn = groups("fn_only");
  EXPECT_GT(full.size(), fn.size());
  EXPECT_TRUE(has(full, "integ"));
  EXPECT_FALSE(has(fn, "integ"));
  EXPECT_EQ(retrieval_channels_used(small_config("sim_style")), 1u);
  EXPECT_EQ(retrieval_channels_used(small_config("full_fin")), 4u);
  EXPECT_EQ(retrieval_channels_used(small_config("avg_pool_long")), 0u);
  fin_model a(small_config("full_fin")), b(small_config("fn_only"));
  EXPECT_GT(a.params().scalar_count(), b.params().scalar_count());
  EXPECT_EQ(a.input_dim(), b.input_dim() + 16);
}

TEST(Training, LossDecreasesOverFiveEpochs) {
  const auto d = small_prepared(320, 3);
  const auto cfg = with_vocab(small_config("fn_only"), d);
  auto samples = encode_split(d, true, encode_options_for(cfg));
  samples.resize(std::min<std::size_t>(samples.size(), 1000));
  fin_model m(cfg);
  m.initialize(1);
  train_options o;
  o.epochs = 5;
  o.batch_size = 32;
  trainer t(m, samples, o);
  t.run();
  ASSERT_EQ(t.epoch_losses().size(), 5u);
  EXPECT_LT(t.epoch_losses().back(), t.epoch_losses().front());
}

TEST(Training, DeterministicAcrossRunsAndThreadCounts) {
  const auto samples = random_samples(120, 31);
  const auto run = [&](std::size_t threads) {
    fin_model m(small_config());
    m.initialize(9);
    train_options o;
    o.epochs = 2;
    o.batch_size = 16;
    o.threads = threads;
    trainer t(m, samples, o);
    t.run();
    std::ostringstream ck;
    t.save(ck);
    return std::make_pair(t.step_losses(), ck.str());
  };
  const auto a = run(1), b = run(1), c = run(3);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_EQ(a.first, c.first);
  EXPECT_EQ(a.second, c.second);
}

TEST(Training, ResumeReproducesNextTenSteps) {
  const auto samples = random_samples(100, 41);
  train_options o;
  o.epochs = 3;
  o.batch_size = 8;
  fin_model ref(small_config());
  ref.initialize(2);
  trainer straight(ref, samples, o);
  for (int i = 0; i < 11; ++i) straight.step();  // crosses the epoch boundary below
  std::stringstream saved;
  straight.save(saved);
  std::vector<double> expect;
  for (int i = 0; i < 10; ++i) expect.push_back(straight.step());

  const auto ck = load_checkpoint(saved);
  fin_model other(deserialize_model_config(ck.meta));
  trainer resumed(other, samples, o);
  resumed.resume(ck);
  std::vector<double> got;
  for (int i = 0; i < 10; ++i) got.push_back(resumed.step());
  EXPECT_EQ(got, expect);
  EXPECT_EQ(resumed.step_losses(), straight.step_losses());
  for (param_id id = 0; id < ref.params().size(); ++id) ASSERT_EQ(other.params()[id].value, ref.params()[id].value);

  train_options mismatched = o;
  mismatched.batch_size = 9;
  fin_model third(small_config());
  trainer wrong(third, samples, mismatched);
  EXPECT_THROW(wrong.resume(ck), format_error);
}

TEST(Training, EmptyTrainingSetAndBadOptions) {
  fin_model m(small_config());
  m.initialize(1);
  const auto before = m.params()[0].value;
  EXPECT_THROW(trainer(m, std::span<const encoded_sample>{}, {}), training_error);
  train_options o;
  o.batch_size = 0;
  const auto samples = random_samples(4, 1);
  EXPECT_THROW(trainer(m, samples, o), config_error);
  EXPECT_EQ(m.params()[0].value, before);
  o.batch_size = 2;
  o.epochs = 0;
  trainer idle(m, samples, o);
  EXPECT_TRUE(idle.done());
  EXPECT_THROW(idle.step(), training_error);
  EXPECT_EQ(m.params()[0].value, before);
}

TEST(Training, LabelPermutationDrivesAucToHalf) {
  const auto d = small_prepared(300, 5);
  const auto cfg = with_vocab(small_config("fn_only"), d);
  const auto tr = encode_split(d, true, encode_options_for(cfg));
  auto te = encode_split(d, false, encode_options_for(cfg));
  fin_model m(cfg);
  m.initialize(1);
  train_options o;
  o.epochs = 2;
  o.batch_size = 32;
  trainer(m, tr, o).run();
  const auto scores = predict_all(m, te, 1);
  std::vector<int> labels;
  for (const auto& s : te) labels.push_back(s.label);
  std::mt19937_64 g(77);
  double total = 0.0;
  const int rounds = 20;
  for (int r = 0; r < rounds; ++r) {
    std::shuffle(labels.begin(), labels.end(), g);
    total += auc(scores, labels);
  }
  EXPECT_NEAR(total / rounds, 0.5, 0.05);
}
