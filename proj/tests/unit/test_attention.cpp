#include <gtest/gtest.h>

#include <random>

#include "expnet/attention.hpp"
#include "expnet/errors.hpp"
#include "expnet/ops.hpp"
#include "oracles.hpp"

using namespace expnet;

TEST(Attention, MultiHeadMatchesLoopTranscription) {
  std::mt19937_64 rng(1);
  for (std::size_t heads : {1u, 2u, 4u}) {
    auto p = AttentionParams::init(8, heads, rng);
    auto xq = oracle::random_tensor(5, 8, rng);
    auto xkv = oracle::random_tensor(7, 8, rng);
    EXPECT_LT(oracle::max_abs_diff(oracle::to_mat(multi_head_attention(xq, xkv, p, nullptr)),
                                   oracle::multi_head_attention(oracle::to_mat(xq), oracle::to_mat(xkv), p, false)),
              1e-12);
    const Mask causal = Mask::causal(5);
    EXPECT_LT(oracle::max_abs_diff(oracle::to_mat(multi_head_attention(xq, xq, p, &causal)),
                                   oracle::multi_head_attention(oracle::to_mat(xq), oracle::to_mat(xq), p, true)),
              1e-12);
  }
}

TEST(Attention, SingleHeadHandExample) {
  // Two keys with scores 0 and ln(3)*sqrt(2): weights 1/4 and 3/4.
  const double s = std::log(3.0) * std::sqrt(2.0);
  auto q = Tensor::matrix({{1.0, 0.0}});
  auto k = Tensor::matrix({{0.0, 0.0}, {s, 0.0}});
  auto v = Tensor::matrix({{4.0, 0.0}, {0.0, 8.0}});
  auto out = scaled_dot_attention(q, k, v, nullptr);
  EXPECT_NEAR(out.at(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(out.at(0, 1), 6.0, 1e-12);
}

TEST(Attention, MaskedKeysCarryNoWeight) {
  std::mt19937_64 rng(2);
  auto q = oracle::random_tensor(3, 4, rng);
  auto k = oracle::random_tensor(3, 4, rng);
  auto v = oracle::random_tensor(3, 4, rng);
  auto v2 = v.clone();
  for (std::size_t f = 0; f < 4; ++f) v2.mutable_data()[2 * 4 + f] += 100.0;
  const Mask m = Mask::causal(3);
  auto a = scaled_dot_attention(q, k, v, &m);
  auto b = scaled_dot_attention(q, k, v2, &m);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t f = 0; f < 4; ++f) EXPECT_EQ(a.at(r, f), b.at(r, f));
}

TEST(Attention, FullyMaskedRowIsContractError) {
  Mask m(2, 2, true);
  m.set(1, 0, false);
  m.set(1, 1, false);
  auto x = Tensor::matrix({{1, 0}, {0, 1}});
  EXPECT_THROW(scaled_dot_attention(x, x, x, &m), ContractError);
}

TEST(Attention, HeadCountMustDivideWidth) {
  std::mt19937_64 rng(3);
  EXPECT_THROW(AttentionParams::init(6, 4, rng), ConfigError);
}

TEST(Attention, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  auto p = AttentionParams::init(4, 2, rng);
  auto x = oracle::random_tensor(3, 4, rng, 1.0, true);
  auto w = oracle::random_tensor(3, 4, rng);
  const Mask m = Mask::causal(3);
  std::vector<NamedTensor> named{{"x", x}};
  p.collect("", named);
  auto objective = [&] { return sum(hadamard(multi_head_attention(x, x, p, &m), w)); };
  backward(objective());
  NoGradGuard guard;
  for (auto& nt : named) {
    std::vector<double> analytic(nt.tensor.grad().begin(), nt.tensor.grad().end());
    const auto numeric = oracle::numeric_gradient([&] { return objective().item(); }, nt.tensor);
    for (std::size_t i = 0; i < numeric.size(); ++i) EXPECT_NEAR(analytic[i], numeric[i], 1e-7) << nt.name;
  }
}
