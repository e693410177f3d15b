#pragma once

#include <cmath>
#include <random>

#include "expnet/tensor.hpp"

namespace expnet::detail {

inline Tensor normal_param(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor(std::move(shape), std::move(data), true);
}

/// fan_in x fan_out matrix ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Tensor fan_in_param(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> data(fan_in * fan_out);
  for (auto& v : data) v = dist(rng);
  return Tensor({fan_in, fan_out}, std::move(data), true);
}

inline Tensor fan_in_bias(std::size_t fan_in, std::size_t width, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> data(width);
  for (auto& v : data) v = dist(rng);
  return Tensor({width}, std::move(data), true);
}

}  // namespace expnet::detail
