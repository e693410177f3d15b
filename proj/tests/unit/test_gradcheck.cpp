#include <gtest/gtest.h>

#include <random>

#include "expnet/gradcheck.hpp"
#include "expnet/ops.hpp"
#include "oracles.hpp"

using namespace expnet;

namespace {

/// Elementwise square whose backward rule forgets the factor 2.
Tensor broken_square(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= v;
  return detail::make_result(x.shape(), std::move(out), {x},
                             [x](std::span<const double>, std::span<const double> g) {
                               auto gx = detail::grad_sink(x);
                               auto xd = x.data();
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * xd[i];
                             });
}

}  // namespace

TEST(GradCheck, RelativeErrorUsesFloor) {
  EXPECT_NEAR(relative_error(1.0, 1.1, 1e-6), 0.1 / 1.1, 1e-15);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0, 1e-6), 1e-3);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0, 1e-6), 0.0);
}

TEST(GradCheck, TinyModelPasses) {
  const auto report = check_model_gradients(tiny_model_config());
  EXPECT_TRUE(report.passed) << report.max_rel_error;
  EXPECT_LT(report.max_rel_error, 1e-4);
  EXPECT_FALSE(report.parameters.empty());
  for (const auto& p : report.parameters) EXPECT_GT(p.entries, 0u) << p.name;
}

TEST(GradCheck, BaselineAttentionModelPasses) {
  auto config = tiny_model_config();
  config.enc_layer_kind = LayerKind::BaselineAttention;
  config.dec_layer_kind = LayerKind::BaselineAttention;
  EXPECT_TRUE(check_model_gradients(config).passed);
}

TEST(GradCheck, DynamicEncoderPasses) {
  auto config = tiny_model_config();
  config.enc_mode = {ExpansionKind::DynamicBidirectional, 2};
  EXPECT_TRUE(check_model_gradients(config).passed);
}

TEST(GradCheck, DetectsBrokenBackwardRule) {
  std::mt19937_64 rng(1);
  auto w = oracle::random_tensor(3, 2, rng, 1.0, true);
  auto good = check_gradients([&] { return sum(hadamard(w, w)); }, {{"w", w}}, {});
  EXPECT_TRUE(good.passed);
  auto bad = check_gradients([&] { return sum(broken_square(w)); }, {{"w", w}}, {});
  EXPECT_FALSE(bad.passed);
  EXPECT_NEAR(bad.max_rel_error, 0.5, 1e-6);
  ASSERT_EQ(bad.parameters.size(), 1u);
  EXPECT_EQ(bad.parameters[0].entries, 6u);
}
