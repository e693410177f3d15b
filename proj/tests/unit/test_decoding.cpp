#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "expnet/decoding.hpp"
#include "expnet/errors.hpp"
#include "toy_scorer.hpp"

using namespace expnet;

namespace {

toy::FunctionScorer random_scorer(std::uint64_t seed, std::size_t vocab, std::size_t max_len) {
  toy::FunctionScorer s;
  s.vocab = vocab;
  s.max_len = max_len;
  s.table = [seed, vocab](const TokenSequence& prefix) {
    std::uint64_t h = seed;
    for (int t : prefix) h = h * 1000003u + static_cast<std::uint64_t>(t) + 1;
    std::mt19937_64 rng(h);
    std::gamma_distribution<double> gamma(0.5, 1.0);
    std::vector<double> p(vocab);
    double total = 0.0;
    for (auto& v : p) total += (v = gamma(rng) + 1e-6);
    for (auto& v : p) v /= total;
    return toy::logs(p);
  };
  return s;
}

}  // namespace

TEST(Decoding, GreedyFollowsArgmax) {
  const auto s = toy::rigged_two_step();
  const auto g = greedy_decode(s);
  EXPECT_EQ(g.tokens, (TokenSequence{kSos, 3, 3}));
  EXPECT_NEAR(g.log_prob, std::log(0.6 * 0.35), 1e-12);
}

TEST(Decoding, BeamTwoRecoversEnumeratedOptimum) {
  const auto s = toy::rigged_two_step();
  const auto all = toy::enumerate(s);
  const auto best = *std::max_element(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.normalized() < b.normalized();
  });
  EXPECT_EQ(best.tokens, (TokenSequence{kSos, 4, kEos}));
  const auto beam = beam_search(s, 2);
  EXPECT_EQ(beam.tokens, best.tokens);
  EXPECT_NEAR(beam.log_prob, std::log(0.36), 1e-12);
}

TEST(Decoding, BeamWidthOneEqualsGreedy) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = random_scorer(seed, 6, 7);
    const auto g = greedy_decode(s);
    const auto b = beam_search(s, 1);
    EXPECT_EQ(g.tokens, b.tokens) << "seed " << seed;
    EXPECT_DOUBLE_EQ(g.log_prob, b.log_prob);
  }
}

TEST(Decoding, BeamWidthValidation) {
  const auto s = toy::rigged_two_step();
  EXPECT_THROW(beam_search(s, 0), ConfigError);
  EXPECT_THROW(beam_search(s, 6), ConfigError);
  EXPECT_NO_THROW(beam_search(s, 5));
}

TEST(Decoding, SamplingIsSeededAndRecordsUnitTemperatureLogProbs) {
  const auto s = random_scorer(7, 6, 6);
  const auto a = sample_rollouts(s, 5, 0.7, 99);
  const auto b = sample_rollouts(s, 5, 0.7, 99);
  ASSERT_EQ(a.size(), 5u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].tokens, b[i].tokens);
    ASSERT_EQ(a[i].log_probs.size(), a[i].tokens.size() - 1);
    TokenSequence prefix{kSos};
    for (std::size_t t = 1; t < a[i].tokens.size(); ++t) {
      EXPECT_DOUBLE_EQ(a[i].log_probs[t - 1], s.log_probs(prefix)[static_cast<std::size_t>(a[i].tokens[t])]);
      prefix.push_back(a[i].tokens[t]);
    }
  }
}

TEST(Decoding, ZeroTemperatureSamplingIsGreedy) {
  const auto s = random_scorer(8, 6, 6);
  const auto g = greedy_decode(s);
  for (const auto& r : sample_rollouts(s, 3, 0.0, 1)) EXPECT_EQ(r.tokens, g.tokens);
  EXPECT_THROW(sample_rollouts(s, 1, -1.0, 1), ConfigError);
}

TEST(Decoding, SamplingFrequenciesFollowTheDistribution) {
  toy::FunctionScorer s;
  s.vocab = 5;
  s.max_len = 2;
  s.table = [](const TokenSequence&) { return toy::logs({0.0, 0.0, 0.2, 0.3, 0.5}); };
  const auto rollouts = sample_rollouts(s, 20000, 1.0, 5);
  std::vector<double> freq(5, 0.0);
  for (const auto& r : rollouts) freq[static_cast<std::size_t>(r.tokens[1])] += 1.0 / 20000.0;
  EXPECT_NEAR(freq[2], 0.2, 0.015);
  EXPECT_NEAR(freq[3], 0.3, 0.015);
  EXPECT_NEAR(freq[4], 0.5, 0.015);
}
