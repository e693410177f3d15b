#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "expnet/decoding.hpp"
#include "expnet/tokens.hpp"

namespace toy {

/// Step scorer backed by an arbitrary function of the prefix.
struct FunctionScorer {
  using State = expnet::TokenSequence;

  std::function<std::vector<double>(const State&)> table;
  std::size_t vocab = 5;
  std::size_t max_len = 3;

  State start() const { return {expnet::kSos}; }
  std::vector<double> log_probs(const State& s) const { return table(s); }
  State advance(const State& s, int token) const {
    State next = s;
    next.push_back(token);
    return next;
  }
  std::size_t max_length() const { return max_len; }
  std::size_t vocab_size() const { return vocab; }
  int sos() const { return expnet::kSos; }
  int eos() const { return expnet::kEos; }
};

inline std::vector<double> logs(std::vector<double> p) {
  for (auto& v : p) v = v > 0.0 ? std::log(v) : -1e300;
  return p;
}

/// Two-step model over tokens {pad, sos, eos, A=3, B=4}. The first step
/// prefers A (0.6 vs 0.4), but A is followed by eos with only 0.3 while B
/// is followed by eos with 0.9, so [sos, B, eos] is the best sequence.
inline FunctionScorer rigged_two_step() {
  FunctionScorer s;
  s.vocab = 5;
  s.max_len = 3;
  s.table = [](const expnet::TokenSequence& prefix) {
    if (prefix.size() == 1) return logs({0.0, 0.0, 0.0, 0.6, 0.4});
    if (prefix.back() == 3) return logs({0.0, 0.0, 0.3, 0.35, 0.35});
    return logs({0.0, 0.0, 0.9, 0.05, 0.05});
  };
  return s;
}

/// Every complete sequence (ended by eos or by the length bound) with its
/// summed log-probability, by exhaustive expansion.
inline std::vector<expnet::ScoredSequence> enumerate(const FunctionScorer& s) {
  std::vector<expnet::ScoredSequence> done;
  std::vector<expnet::ScoredSequence> frontier{{{expnet::kSos}, 0.0}};
  while (!frontier.empty()) {
    std::vector<expnet::ScoredSequence> next;
    for (const auto& seq : frontier) {
      const auto lp = s.log_probs(seq.tokens);
      for (std::size_t tok = 0; tok < lp.size(); ++tok) {
        if (lp[tok] < -1e299) continue;
        auto grown = seq;
        grown.tokens.push_back(static_cast<int>(tok));
        grown.log_prob += lp[tok];
        if (static_cast<int>(tok) == s.eos() || grown.tokens.size() >= s.max_len) done.push_back(grown);
        else next.push_back(grown);
      }
    }
    frontier = std::move(next);
  }
  return done;
}

}  // namespace toy
