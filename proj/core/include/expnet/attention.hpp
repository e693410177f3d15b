#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "expnet/checkpoint.hpp"
#include "expnet/tensor.hpp"

namespace expnet {

/// Additive score penalty for masked keys. Saturates softmax to exactly
/// zero mass in double precision without producing NaN.
inline constexpr double kMaskPenalty = -1e9;

struct AttentionParams {
  Tensor w_q;    // d x d
  Tensor w_k;    // d x d
  Tensor w_v;    // d x d
  Tensor w_out;  // d x d
  std::size_t n_heads = 1;

  static AttentionParams init(std::size_t d_model, std::size_t n_heads, std::mt19937_64& rng);

  std::size_t d_model() const { return w_q.rows(); }
  void validate() const;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

/// softmax(Q K^T / sqrt(dh) + penalty) V. `mask` is m x n, true = visible.
/// A query row with no visible key is a ContractError.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Mask* mask);

/// Projects, splits the feature axis into heads, attends per head,
/// concatenates and applies W_out.
Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv, const AttentionParams& params,
                            const Mask* mask);

}  // namespace expnet
