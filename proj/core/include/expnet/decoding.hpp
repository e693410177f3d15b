#pragma once

// Generic autoregressive decoders over any step scorer: something that can
// start from <sos>, report next-token log-probabilities for a state, and
// advance a state by one token.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "expnet/errors.hpp"
#include "expnet/tokens.hpp"

namespace expnet {

template <typename S>
concept StepScorer = requires(const S& s, const typename S::State& state, int token) {
  { s.start() } -> std::same_as<typename S::State>;
  { s.log_probs(state) } -> std::convertible_to<std::vector<double>>;
  { s.advance(state, token) } -> std::same_as<typename S::State>;
  { s.max_length() } -> std::convertible_to<std::size_t>;
  { s.vocab_size() } -> std::convertible_to<std::size_t>;
  { s.sos() } -> std::convertible_to<int>;
  { s.eos() } -> std::convertible_to<int>;
};

struct ScoredSequence {
  TokenSequence tokens;  // includes sos
  double log_prob = 0.0;

  std::size_t generated() const { return tokens.empty() ? 0 : tokens.size() - 1; }
  /// Length-normalized score: mean log-probability per generated token.
  double normalized() const {
    return generated() ? log_prob / static_cast<double>(generated()) : log_prob;
  }
};

namespace detail {

inline std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace detail

/// Appends the most likely token until eos or max_length tokens (sos included).
template <StepScorer S>
ScoredSequence greedy_decode(const S& scorer) {
  ScoredSequence out;
  out.tokens.push_back(scorer.sos());
  auto state = scorer.start();
  while (out.tokens.size() < scorer.max_length()) {
    const auto lp = scorer.log_probs(state);
    const int token = static_cast<int>(detail::argmax(lp));
    out.tokens.push_back(token);
    out.log_prob += lp[static_cast<std::size_t>(token)];
    if (token == scorer.eos()) break;
    state = scorer.advance(state, token);
  }
  return out;
}

/// Beam search. Live hypotheses are ranked by summed log-probability (all
/// share one length per step); finished ones (eos or length bound) are
/// compared by mean log-probability. Ties resolve to the earlier beam and
/// the lower token id, which makes width 1 identical to greedy decoding.
template <StepScorer S>
ScoredSequence beam_search(const S& scorer, std::size_t width) {
  if (width == 0) throw ConfigError("beam width must be at least 1");
  if (width > scorer.vocab_size()) {
    throw ConfigError("beam width " + std::to_string(width) + " exceeds vocabulary size " +
                      std::to_string(scorer.vocab_size()));
  }
  struct Hyp {
    typename S::State state;
    ScoredSequence seq;
  };
  struct Candidate {
    std::size_t beam;
    int token;
    double score;
  };

  std::vector<Hyp> live;
  live.push_back({scorer.start(), {{scorer.sos()}, 0.0}});
  std::vector<ScoredSequence> finished;
  if (scorer.max_length() <= 1) return live.front().seq;

  while (!live.empty()) {
    std::vector<Candidate> candidates;
    for (std::size_t b = 0; b < live.size(); ++b) {
      const auto lp = scorer.log_probs(live[b].state);
      for (std::size_t tok = 0; tok < lp.size(); ++tok)
        candidates.push_back({b, static_cast<int>(tok), live[b].seq.log_prob + lp[tok]});
    }
    const std::size_t keep = std::min(width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(), [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.beam != b.beam) return a.beam < b.beam;
                        return a.token < b.token;
                      });
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const auto& c = candidates[i];
      ScoredSequence seq = live[c.beam].seq;
      seq.tokens.push_back(c.token);
      seq.log_prob = c.score;
      if (c.token == scorer.eos() || seq.tokens.size() >= scorer.max_length()) {
        finished.push_back(std::move(seq));
      } else {
        next.push_back({scorer.advance(live[c.beam].state, c.token), std::move(seq)});
      }
    }
    live = std::move(next);
  }
  auto best = std::max_element(finished.begin(), finished.end(),
                               [](const ScoredSequence& a, const ScoredSequence& b) {
                                 return a.normalized() < b.normalized();
                               });
  return *best;
}

struct SampledRollout {
  TokenSequence tokens;
  std::vector<double> log_probs;  // temperature-1 log-probability per generated token
};

/// k independent multinomial rollouts from softmax(log_probs / temperature).
/// temperature == 0 is argmax. Reproducible for a fixed seed.
template <StepScorer S>
std::vector<SampledRollout> sample_rollouts(const S& scorer, std::size_t k, double temperature,
                                            std::uint64_t seed) {
  if (temperature < 0.0) throw ConfigError("sampling temperature must be nonnegative");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<SampledRollout> out(k);
  for (auto& rollout : out) {
    rollout.tokens.push_back(scorer.sos());
    auto state = scorer.start();
    while (rollout.tokens.size() < scorer.max_length()) {
      const auto lp = scorer.log_probs(state);
      std::size_t token = 0;
      if (temperature == 0.0) {
        token = detail::argmax(lp);
      } else {
        const double peak = *std::max_element(lp.begin(), lp.end());
        std::vector<double> weight(lp.size());
        double total = 0.0;
        for (std::size_t i = 0; i < lp.size(); ++i) total += (weight[i] = std::exp((lp[i] - peak) / temperature));
        double u = uniform(rng) * total;
        token = detail::argmax(lp);
        for (std::size_t i = 0; i < lp.size(); ++i) {
          if (u < weight[i]) {
            token = i;
            break;
          }
          u -= weight[i];
        }
      }
      rollout.tokens.push_back(static_cast<int>(token));
      rollout.log_probs.push_back(lp[token]);
      if (static_cast<int>(token) == scorer.eos()) break;
      state = scorer.advance(state, static_cast<int>(token));
    }
  }
  return out;
}

}  // namespace expnet
