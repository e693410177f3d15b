#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "expnet/errors.hpp"
#include "expnet/ops.hpp"
#include "expnet/training.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace expnet;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("expnet_training_" + name)).string();
}

void remove_state(const std::string& path) {
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".json");
}

}  // namespace

TEST(XeLoss, UniformLogitsGiveLogVocab) {
  auto logits = Tensor::zeros({3, 7});
  const std::vector<int> targets{4, 2, 5};
  EXPECT_NEAR(xe_loss(logits, targets).item(), std::log(7.0), 1e-12);
}

TEST(XeLoss, SaturatedLogitsGiveNearZero) {
  auto logits = Tensor::zeros({2, 5});
  logits.mutable_data()[3] = 50.0;
  logits.mutable_data()[5 + 1] = 50.0;
  EXPECT_LT(xe_loss(logits, std::vector<int>{3, 1}).item(), 1e-20);
}

TEST(XeLoss, MatchesManualComputationAndSkipsPad) {
  std::mt19937_64 rng(1);
  auto logits = oracle::random_tensor(4, 6, rng, 1.0, true);
  const std::vector<int> targets{3, kPad, 5, 2};
  const auto m = oracle::to_mat(logits);
  double expected = 0.0;
  for (std::size_t t : {0u, 2u, 3u}) {
    double z = 0.0;
    for (double v : m[t]) z += std::exp(v);
    expected -= m[t][static_cast<std::size_t>(targets[t])] - std::log(z);
  }
  expected /= 3.0;
  auto loss = xe_loss(logits, targets);
  EXPECT_NEAR(loss.item(), expected, 1e-10);
  backward(loss);
  for (std::size_t v = 0; v < 6; ++v) EXPECT_DOUBLE_EQ(logits.grad()[6 + v], 0.0);
}

TEST(XeLoss, RejectsAllPadTargetsAndBadShapes) {
  EXPECT_THROW(xe_loss(Tensor::zeros({2, 4}), std::vector<int>{kPad, kPad}), ContractError);
  EXPECT_THROW(xe_loss(Tensor::zeros({2, 4}), std::vector<int>{1}), DimensionError);
}

TEST(ScstBaseline, TwoSampleFixture) {
  const std::vector<double> r{4.0, 8.0};
  EXPECT_DOUBLE_EQ(scst_baseline(r, 0), 4.0);
  EXPECT_DOUBLE_EQ(scst_baseline(r, 1), 2.0);
}

TEST(ScstBaseline, EqualRewardsGiveScaledReward) {
  const std::vector<double> r(5, 3.0);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(scst_baseline(r, i), 3.0 * 4.0 / 5.0, 1e-15);
}

TEST(ScstBaseline, MatchesLoopDefinition) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  std::vector<double> r(5);
  for (auto& x : r) x = u(rng);
  for (std::size_t i = 0; i < 5; ++i) {
    double others = 0.0;
    for (std::size_t j = 0; j < 5; ++j)
      if (j != i) others += r[j];
    EXPECT_NEAR(scst_baseline(r, i), others / 5.0, 1e-12);
  }
  EXPECT_THROW(scst_baseline(std::vector<double>{1.0}, 0), ConfigError);
}

TEST(ScstLoss, GradientWithRespectToLogProbsIsScaledNegativeAdvantage) {
  const std::vector<double> r{1.0, 0.0};
  std::vector<Tensor> lp{Tensor::scalar(-1.5, true), Tensor::scalar(-2.0, true)};
  auto loss = scst_loss(lp, r);
  backward(loss);
  EXPECT_DOUBLE_EQ(lp[0].grad()[0], -1.0 / 2.0);
  EXPECT_DOUBLE_EQ(lp[1].grad()[0], 0.5 / 2.0);
  EXPECT_NEAR(loss.item(), -(1.0 * -1.5 + -0.5 * -2.0) / 2.0, 1e-15);
}

TEST(ScstLoss, EqualRewardsKeepPositiveAdvantage) {
  const std::size_t k = 4;
  const double reward = 2.0;
  std::vector<Tensor> lp;
  for (std::size_t i = 0; i < k; ++i) lp.push_back(Tensor::scalar(-1.0 - static_cast<double>(i), true));
  backward(scst_loss(lp, std::vector<double>(k, reward)));
  for (const auto& t : lp) EXPECT_NEAR(t.grad()[0], -(reward / k) / k, 1e-15);
}

TEST(ScstLoss, ZeroRewardsGiveZeroGradient) {
  std::vector<Tensor> lp{Tensor::scalar(-1.0, true), Tensor::scalar(-3.0, true), Tensor::scalar(-2.0, true)};
  backward(scst_loss(lp, std::vector<double>(3, 0.0)));
  for (const auto& t : lp) EXPECT_DOUBLE_EQ(t.grad()[0], 0.0);
}

TEST(ScstLoss, InvariantToSamplePermutation) {
  const std::vector<double> r{0.3, 1.7, 0.9, 2.4};
  const std::vector<double> v{-1.0, -2.5, -0.7, -3.1};
  std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<Tensor> a, b;
  std::vector<double> rb;
  for (std::size_t i = 0; i < 4; ++i) {
    a.push_back(Tensor::scalar(v[i]));
    b.push_back(Tensor::scalar(v[perm[i]]));
    rb.push_back(r[perm[i]]);
  }
  EXPECT_NEAR(scst_loss(a, r).item(), scst_loss(b, rb).item(), 1e-14);
  EXPECT_THROW(scst_loss(a, std::vector<double>{1.0, 2.0}), DimensionError);
}

TEST(ScstLoss, StepRaisesLogProbOfBetterRollout) {
  auto bias = Tensor::zeros({1, 4}, true);
  auto lp_of = [&](std::size_t token) { return pick(log_softmax_rows(bias), std::vector<std::size_t>{token}); };
  auto loss = scst_loss({sum(lp_of(2)), sum(lp_of(3))}, std::vector<double>{1.0, 0.0});
  backward(loss);
  const double before2 = lp_of(2).item(), before3 = lp_of(3).item();
  auto w = bias.mutable_data();
  for (std::size_t j = 0; j < 4; ++j) w[j] -= 0.1 * bias.grad()[j];
  EXPECT_GT(lp_of(2).item(), before2);
  EXPECT_LT(lp_of(3).item(), before3);
}

TEST(Schedule, WarmupThenStepAnneal) {
  TrainConfig c;
  c.peak_lr = 1e-3;
  c.warmup_steps = 100;
  c.anneal_factor = 0.5;
  c.anneal_every_epochs = 2;
  EXPECT_DOUBLE_EQ(lr_at(1, 0, c), 1e-5);
  EXPECT_DOUBLE_EQ(lr_at(50, 0, c), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(99, 0, c), 9.9e-4);
  EXPECT_DOUBLE_EQ(lr_at(100, 0, c), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(500, 1, c), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(500, 2, c), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(900, 5, c), 2.5e-4);
  c.anneal_factor = 0.8;
  EXPECT_NEAR(lr_at(1000, 4, c), 1e-3 * 0.64, 1e-18);
  for (std::size_t s = 1; s < 100; ++s) EXPECT_LE(lr_at(s, 0, c), lr_at(s + 1, 0, c));
}

TEST(TrainConfig, ValidationAndJson) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(train_config_from_json(to_json(c)), c);
  EXPECT_THROW(train_config_from_json({{"batchsize", 4}}), ConfigError);
  auto bad = c;
  bad.scst_k = 1;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  const auto s = TrainConfig::scst_defaults();
  EXPECT_DOUBLE_EQ(s.peak_lr, c.peak_lr / 10.0);
  EXPECT_EQ(s.epochs, 10u);
}

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
  auto p = Tensor::matrix({{1.0, -2.0}}, true);
  Adam opt({p}, 0.9, 0.999, 1e-8);
  p.zero_grad();
  backward(scale(sum(p), 0.0));
  opt.step(0.1);
  EXPECT_DOUBLE_EQ(p.at(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(p.at(0, 1), -2.0);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Adam, MatchesHandComputedSteps) {
  auto p = Tensor::matrix({{0.5, -1.0}}, true);
  Adam opt({p}, 0.9, 0.999, 1e-8);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.01;
  double w[2] = {0.5, -1.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 3; ++t) {
    p.zero_grad();
    backward(sum(hadamard(p, p)));
    for (int j = 0; j < 2; ++j) {
      const double g = 2.0 * w[j];
      m[j] = b1 * m[j] + (1 - b1) * g;
      v[j] = b2 * v[j] + (1 - b2) * g * g;
      w[j] -= lr * (m[j] / (1 - std::pow(b1, t))) / (std::sqrt(v[j] / (1 - std::pow(b2, t))) + eps);
    }
    opt.step(lr);
    EXPECT_NEAR(p.at(0, 0), w[0], 1e-15);
    EXPECT_NEAR(p.at(0, 1), w[1], 1e-15);
  }
}

TEST(Clip, ScalesToMaxNorm) {
  auto p = Tensor::matrix({{3.0, 4.0}}, true);
  backward(sum(scale(p, 1.0)));
  p.mutable_grad()[0] = 3.0;
  p.mutable_grad()[1] = 4.0;
  EXPECT_DOUBLE_EQ(clip_grad_norm({p}, 1.0), 5.0);
  EXPECT_NEAR(p.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(p.grad()[1], 0.8, 1e-15);
  EXPECT_NEAR(clip_grad_norm({p}, 2.0), 1.0, 1e-15);
  EXPECT_NEAR(p.grad()[0], 0.6, 1e-15);
}

TEST(TeacherForcingTargets, ShiftByOne) {
  const auto data = fixture::small_training_data(20, 3);
  const auto& s = data.train.front();
  const auto tf = teacher_forcing(s, data.vocab, 14);
  const auto words = data.vocab.encode(s.refs.front());
  ASSERT_EQ(tf.input.size(), words.size() + 1);
  EXPECT_EQ(tf.input.front(), kSos);
  EXPECT_EQ(tf.target.back(), kEos);
  for (std::size_t i = 0; i < words.size(); ++i) {
    EXPECT_EQ(tf.input[i + 1], words[i]);
    EXPECT_EQ(tf.target[i], words[i]);
  }
}

TEST(TrainXe, FirstEpochLowersLossAndIsDeterministic) {
  const auto data = fixture::small_training_data(100, 4);
  const auto mc = fixture::small_model_config(data);
  CaptionModel a(mc, 9), b(mc, 9);
  const double initial = evaluate(a, data.val, data.vocab).loss;
  const auto cfg = fixture::quick_train_config(1);
  const auto ra = train_xe(a, data, cfg);
  const auto rb = train_xe(b, data, cfg);
  EXPECT_LT(ra.epochs.front().loss, initial);
  EXPECT_EQ(ra.step_losses, rb.step_losses);
  EXPECT_EQ(ra.epochs.front().loss, rb.epochs.front().loss);
  EXPECT_EQ(ra.step_losses.size(), 10u);
}

TEST(TrainXe, ResumeReproducesUninterruptedRun) {
  const auto data = fixture::small_training_data(60, 5);
  const auto mc = fixture::small_model_config(data);
  auto cfg = fixture::quick_train_config(2);

  CaptionModel straight(mc, 3);
  const auto full = train_xe(straight, data, cfg);

  const auto state = temp_path("resume.state");
  CaptionModel first(mc, 3);
  cfg.epochs = 1;
  TrainHooks save;
  save.state_path = state;
  train_xe(first, data, cfg, save);

  cfg.epochs = 2;
  CaptionModel resumed(mc, 77);
  TrainHooks load;
  load.resume_path = state;
  const auto rest = train_xe(resumed, data, cfg, load);
  remove_state(state);

  ASSERT_EQ(rest.step_losses.size(), full.step_losses.size() / 2);
  for (std::size_t i = 0; i < rest.step_losses.size(); ++i) {
    EXPECT_EQ(rest.step_losses[i], full.step_losses[full.step_losses.size() / 2 + i]) << i;
  }
  EXPECT_EQ(rest.best_epoch, full.best_epoch);
  ASSERT_EQ(rest.epochs.size(), 1u);
  EXPECT_EQ(rest.epochs.front().epoch, 2u);
}

TEST(TrainXe, RejectsStateFromAnotherStageOrModel) {
  const auto data = fixture::small_training_data(30, 6);
  const auto mc = fixture::small_model_config(data);
  const auto state = temp_path("mismatch.state");
  CaptionModel m(mc, 1);
  TrainHooks save;
  save.state_path = state;
  train_xe(m, data, fixture::quick_train_config(1), save);

  auto other = mc;
  other.d_ff = 24;
  CaptionModel n(other, 1);
  TrainHooks load;
  load.resume_path = state;
  EXPECT_THROW(train_xe(n, data, fixture::quick_train_config(2), load), ConfigError);
  const auto idf = build_idf(reference_words(data.train));
  EXPECT_THROW(train_scst(m, data, TrainConfig::scst_defaults(), &idf, load), ConfigError);
  remove_state(state);
}

TEST(TrainXe, PatienceStopsEarly) {
  const auto data = fixture::small_training_data(30, 7);
  CaptionModel m(fixture::small_model_config(data), 2);
  auto cfg = fixture::quick_train_config(6);
  cfg.peak_lr = 1e-300;
  cfg.patience = 1;
  const auto r = train_xe(m, data, cfg);
  EXPECT_TRUE(r.stopped_early);
  EXPECT_LT(r.epochs.size(), 6u);
}

TEST(TrainXe, FineTunePhaseUsesFixedRateAndSmallBatches) {
  const auto data = fixture::small_training_data(30, 8);
  CaptionModel m(fixture::small_model_config(data), 2);
  auto cfg = fixture::quick_train_config(1);
  cfg.fine_tune = true;
  cfg.fine_tune_epochs = 1;
  const auto r = train_xe(m, data, cfg);
  ASSERT_EQ(r.epochs.size(), 2u);
  EXPECT_DOUBLE_EQ(r.epochs.back().lr, cfg.fine_tune_lr);
  const std::size_t n = data.train.size();
  EXPECT_EQ(r.step_losses.size(), (n + 7) / 8 + (n + 9) / 10);
}

TEST(TrainScst, RunsAndRequiresIdf) {
  const auto data = fixture::small_training_data(30, 9);
  CaptionModel m(fixture::small_model_config(data), 2);
  train_xe(m, data, fixture::quick_train_config(2));
  auto cfg = TrainConfig::scst_defaults();
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.scst_k = 3;
  EXPECT_THROW(train_scst(m, data, cfg, nullptr), ConfigError);
  const auto idf = build_idf(reference_words(data.train));
  const auto r = train_scst(m, data, cfg, &idf);
  ASSERT_EQ(r.epochs.size(), 1u);
  EXPECT_TRUE(std::isfinite(r.epochs.front().train_loss));
  EXPECT_EQ(r.best_epoch, 1u);
}
