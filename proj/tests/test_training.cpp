#include <gtest/gtest.h>

#include "support.hpp"

using namespace mkst;
using fixtures::random_sample;
using fixtures::tiny_config;

namespace {

double oracle_mse(const Tensor<double>& a, const Tensor<double>& b, std::size_t rows, std::size_t cols) {
  double s = 0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = a[r * cols + c] - b[r * cols + c];
      s += d * d;
    }
  return s / static_cast<double>(rows) / static_cast<double>(cols);
}

Var<double> ones(std::size_t n) {
  Tensor<double> t({n});
  t.fill(1.0);
  return Var<double>(t);
}

Var<double> zeros(std::size_t n) { return Var<double>(Tensor<double>({n})); }

std::vector<data::ForecastSample<double>> samples(const ModelConfig& cfg, std::mt19937_64& rng, std::size_t n) {
  std::vector<data::ForecastSample<double>> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_sample(cfg, rng));
  return out;
}

}  // namespace

TEST(MseLoss, Examples) {
  Tensor<double> a({2, 3, 1});
  a.fill(0.3);
  EXPECT_EQ(mse_loss(a, a), 0.0);
  Tensor<double> b = a;
  for (auto& v : b.storage()) v += 0.5;
  EXPECT_NEAR(mse_loss(a, b), 0.25, 1e-15);
  EXPECT_THROW(mse_loss(a, Tensor<double>({2, 2, 1})), ShapeError);
  b[0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(mse_loss(a, b), ValidationError);
}

TEST(MseLoss, MatchesDoubleSumOracle) {
  std::mt19937_64 rng(90);
  for (int i = 0; i < 20; ++i) {
    auto a = fixtures::random_tensor<double>({2, 3, 1}, rng, -2, 2);
    auto b = fixtures::random_tensor<double>({2, 3, 1}, rng, -2, 2);
    EXPECT_NEAR(mse_loss(a, b), oracle_mse(a, b, 2, 3), 1e-14);
    EXPECT_GE(mse_loss(a, b), 0.0);
  }
}

TEST(Revin, ConstantWindowNormalizesToZero) {
  Tensor<double> h({2, 6, 1});
  for (std::size_t t = 0; t < 6; ++t) {
    h.at(0, t, 0) = 0.7;
    h.at(1, t, 0) = 0.0;
  }
  auto [z, st] = revin_apply(Var<double>(h), ones(2), zeros(2));
  for (double v : z.value().storage()) EXPECT_NEAR(v, 0.0, 1e-9);
  EXPECT_EQ(st.stddev[0], kRevinMinStd);
  EXPECT_DOUBLE_EQ(st.mean[0], 0.7);
}

TEST(Revin, ZeroPredictionMapsBackToWindowMean) {
  Tensor<double> h({1, 2, 1});
  h.at(0, 0, 0) = 0.3;
  h.at(0, 1, 0) = 0.5;
  auto [z, st] = revin_apply(Var<double>(h), ones(1), zeros(1));
  EXPECT_NEAR(st.mean[0], 0.4, 1e-15);
  EXPECT_NEAR(st.stddev[0], 0.1, 1e-15);
  auto out = revin_invert(Var<double>(Tensor<double>({1, 3, 1})), st, ones(1), zeros(1));
  for (double v : out.value().storage()) EXPECT_NEAR(v, 0.4, 1e-15);
}

TEST(Revin, RoundTripWithLearnedAffine) {
  std::mt19937_64 rng(91);
  for (int i = 0; i < 50; ++i) {
    auto h = fixtures::random_tensor<double>({3, 16, 1}, rng, 0, 1);
    auto gain = Var<double>(fixtures::random_tensor<double>({3}, rng, 0.5, 2.0));
    auto shift = Var<double>(fixtures::random_tensor<double>({3}, rng, -1, 1));
    auto [z, st] = revin_apply(Var<double>(h), gain, shift);
    auto back = revin_invert(z, st, gain, shift);
    EXPECT_LT(max_abs_diff(back.value(), h), 1e-6);
  }
}

TEST(Schedules, EarlyStopFiresExactlyPatienceEpochsAfterBest) {
  for (std::size_t patience : {1u, 3u, 15u}) {
    EarlyStopping stop(patience);
    std::size_t fired = 0;
    for (std::size_t epoch = 1; epoch <= 100 && fired == 0; ++epoch)
      if (stop.step(static_cast<double>(epoch))) fired = epoch;
    EXPECT_EQ(fired, 1 + patience);
  }
}

TEST(Schedules, PlateauHalvesAfterPatienceAndRespectsFloor) {
  PlateauScheduler p(0.5, 2, 0.3);
  double lr = 1.0;
  std::vector<double> seen;
  for (double m : {5.0, 4.0, 4.0, 4.0, 3.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0}) {
    lr = p.step(m, lr);
    seen.push_back(lr);
  }
  EXPECT_EQ(seen, (std::vector<double>{1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.3, 0.3, 0.3, 0.3, 0.3}));
}

TEST(TrainConfigTest, DefaultsAndProblems) {
  TrainConfig c;
  EXPECT_EQ(c.learning_rate, 5e-4);
  EXPECT_EQ(c.batch_size, 8u);
  EXPECT_TRUE(c.problems().empty());
  c.learning_rate = 0;
  c.batch_size = 0;
  EXPECT_EQ(c.problems().size(), 2u);
  auto kv = KeyValueConfig::from_string("format = 1\nlearning_rate = -1\nmax_epochs = 3\n");
  TrainConfig::parse(kv);
  EXPECT_THROW(kv.throw_if_errors("train config"), ValidationError);
}

TEST(Fit, OneSmallStepDecreasesSampleLoss) {
  std::mt19937_64 rng(92);
  auto cfg = tiny_config();
  cfg.dropout = 0.0;
  auto model = Forecaster<double>::create(cfg, rng);
  auto params = model.parameters();
  fixtures::randomize(params, rng, -0.3, 0.3);
  auto s = samples(cfg, rng, 1);
  const double before = evaluate_loss(model, s);
  TrainConfig tc;
  tc.max_epochs = 1;
  tc.learning_rate = 1e-5;
  tc.batch_size = 1;
  auto r = fit(model, s, s, tc);
  EXPECT_LT(r.log[0].val_loss, before);
  EXPECT_LT(evaluate_loss(model, s), before);
}

TEST(Fit, LogLearningRateAndBestCheckpoint) {
  std::mt19937_64 rng(93);
  auto cfg = tiny_config();
  auto model = Forecaster<double>::create(cfg, rng);
  auto train = samples(cfg, rng, 6);
  auto val = samples(cfg, rng, 3);
  TrainConfig tc;
  tc.max_epochs = 25;
  tc.learning_rate = 3e-2;
  tc.batch_size = 2;
  tc.plateau_patience = 2;
  tc.early_stop_patience = 6;
  std::size_t callbacks = 0;
  auto r = fit(model, train, val, tc, [&](const EpochRecord&) { ++callbacks; });
  ASSERT_FALSE(r.log.empty());
  EXPECT_EQ(callbacks, r.log.size());
  double min_val = std::numeric_limits<double>::infinity();
  std::size_t argmin = 0;
  for (std::size_t i = 0; i < r.log.size(); ++i) {
    EXPECT_EQ(r.log[i].epoch, i + 1);
    if (i > 0) {
      EXPECT_LE(r.log[i].lr, r.log[i - 1].lr);
    }
    EXPECT_GE(r.log[i].seconds, 0.0);
    if (r.log[i].val_loss < min_val) {
      min_val = r.log[i].val_loss;
      argmin = i + 1;
    }
  }
  EXPECT_EQ(r.best_epoch, argmin);
  EXPECT_EQ(r.best_val_loss, min_val);
  EXPECT_EQ(evaluate_loss(model, val), min_val);
  if (r.early_stopped) {
    EXPECT_EQ(r.log.size(), r.best_epoch + tc.early_stop_patience);
  }
}

TEST(Fit, SeededRunsAreReproducible) {
  auto run = [] {
    std::mt19937_64 rng(94);
    auto cfg = tiny_config();
    auto model = Forecaster<double>::create(cfg, rng);
    auto train = samples(cfg, rng, 5);
    TrainConfig tc;
    tc.max_epochs = 4;
    tc.learning_rate = 1e-2;
    tc.batch_size = 2;
    tc.seed = 7;
    return fit(model, train, train, tc).log;
  };
  auto a = run(), b = run();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(a[i].train_loss, b[i].train_loss, 1e-5);
    EXPECT_NEAR(a[i].val_loss, b[i].val_loss, 1e-5);
    EXPECT_EQ(a[i].lr, b[i].lr);
  }
}

TEST(Fit, DivergenceReportsEpochAndBatch) {
  std::mt19937_64 rng(95);
  auto cfg = tiny_config();
  auto model = Forecaster<double>::create(cfg, rng);
  auto train = samples(cfg, rng, 3);
  train[2].target.fill(1e200);
  TrainConfig tc;
  tc.max_epochs = 2;
  tc.batch_size = 1;
  try {
    fit(model, train, train, tc);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch"), std::string::npos) << msg;
  }
}

TEST(Fit, EmptySetsRejected) {
  std::mt19937_64 rng(96);
  auto cfg = tiny_config();
  auto model = Forecaster<double>::create(cfg, rng);
  auto s = samples(cfg, rng, 1);
  EXPECT_THROW(fit(model, {}, s, TrainConfig{}), ValidationError);
  EXPECT_THROW(fit(model, s, {}, TrainConfig{}), ValidationError);
}

TEST(GradientCheck, RejectsNonPositiveEpsilon) {
  std::mt19937_64 rng(97);
  auto cfg = tiny_config();
  auto model = Forecaster<double>::create(cfg, rng);
  auto s = random_sample(cfg, rng);
  EXPECT_THROW(gradient_check(model, s, 0.0), ValidationError);
  EXPECT_THROW(gradient_check(model, s, -1e-6), ValidationError);
}

TEST(GradientCheck, FlatDirectionHasZeroGradients) {
  auto used = Var<double>(Tensor<double>({3}), true);
  auto unused = Var<double>(Tensor<double>({4}), true);
  used.mutable_value()[0] = 0.5;
  ParamList<double> params{{"used", used}, {"unused", unused}};
  auto report = gradient_check<double>([&] { return mse(used, Tensor<double>({3})); }, params, 1e-6);
  EXPECT_EQ(report.checked, 7u);
  EXPECT_LT(report.max_rel_error, 1e-6);
  EXPECT_EQ(unused.has_grad() ? unused.grad().max_abs() : 0.0, 0.0);
}

TEST(Fit, OverfitsFourSamples) {
  std::mt19937_64 rng(98);
  auto cfg = tiny_config();
  auto model = Forecaster<double>::create(cfg, rng);
  auto train = samples(cfg, rng, 4);
  TrainConfig tc;
  tc.max_epochs = 500;
  tc.learning_rate = 1e-2;
  tc.batch_size = 4;
  tc.dropout = 0.0;
  tc.early_stopping = false;
  tc.seed = 3;
  auto r = fit(model, train, train, tc);
  EXPECT_LT(evaluate_loss(model, train), 1e-2) << "best epoch " << r.best_epoch;
}
