#pragma once

// Expansion layer: a length-T sequence is spread over L expansion slots
// (forward step), gathered back to length T through the transposed
// similarity matrix (backward step), and the two sign-split paths are merged
// by a sigmoid selector.
//
//   Z   = E_Q K^T / sqrt(d)                       (L x T)
//   F_1 = Phi(relu(Z))  V_1 + E_B,  F_2 = Phi(relu(-Z))  V_2 + E_B
//   B_1 = Phi(relu(Z^T)) F_1,      B_2 = Phi(relu(-Z^T)) F_2
//   out = sigmoid(S) * B_1 + (1 - sigmoid(S)) * B_2
//
// Static mode uses L = N_E learned query/bias rows. Dynamic mode uses
// L = T * N_E rows c_i + q_j / c_i + b_j laid out origin-major
// (row i * N_E + j comes from position i and bank entry j).

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "expnet/checkpoint.hpp"
#include "expnet/tensor.hpp"

namespace expnet {

inline constexpr double kExpansionEpsilon = 1e-9;

enum class ExpansionKind { Static, DynamicCausal, DynamicBidirectional };

struct ExpansionMode {
  ExpansionKind kind = ExpansionKind::Static;
  std::size_t n_e = 1;

  bool dynamic() const { return kind != ExpansionKind::Static; }
  bool operator==(const ExpansionMode&) const = default;
};

/// Where a layer sits. Autoregressive placement only admits DynamicCausal.
enum class Placement { Bidirectional, Autoregressive };

/// Throws ConfigError when `mode` cannot be used at `placement`.
void check_placement(const ExpansionMode& mode, Placement placement);

std::string to_string(ExpansionKind kind);
ExpansionKind expansion_kind_from_string(const std::string& name);

struct ExpansionParams {
  ExpansionMode mode;
  Tensor q_bank;  // N_E x d
  Tensor b_bank;  // N_E x d
  Tensor w_c;     // d x d, dynamic modes only
  Tensor w_k;
  Tensor w_v1;
  Tensor w_v2;
  Tensor w_s;
  double epsilon = kExpansionEpsilon;

  /// Projections ~ U(-1/sqrt(d), 1/sqrt(d)); banks ~ N(0, 0.02^2).
  static ExpansionParams init(std::size_t d_model, ExpansionMode mode, std::mt19937_64& rng);

  std::size_t d_model() const { return w_k.rows(); }
  /// Checks the bank/projection invariants; throws ConfigError.
  void validate() const;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

struct ExpansionVectors {
  Tensor queries;                   // E_Q
  Tensor biases;                    // E_B
  std::vector<std::size_t> origin;  // expanded row -> source position (dynamic only)
};

struct ForwardExpansion {
  Tensor f1;
  Tensor f2;
  Tensor z;  // similarity matrix, shared with the backward step
};

struct BackwardExpansion {
  Tensor b1;
  Tensor b2;
};

/// Row normalization: out[i][j] = x[i][j] / (sum_z x[i][z] + eps). Input must
/// be nonnegative (validated only with debug checks on).
Tensor row_normalize(const Tensor& x, double eps);

ExpansionVectors build_static_expansion(const ExpansionParams& params);
/// `conditioning` is the W_C projection of the layer input (T x d).
ExpansionVectors build_dynamic_expansion(const Tensor& conditioning, const ExpansionParams& params);

/// `mask` (L x T) removes (expanded row, key) pairs from both sign paths
/// before normalization.
ForwardExpansion forward_expansion(const Tensor& queries, const Tensor& keys, const Tensor& values1,
                                   const Tensor& values2, const Tensor& biases, const Mask* mask,
                                   double eps = kExpansionEpsilon);

/// `mask` is T x L over Z^T: entry (t, r) allows output position t to
/// gather expanded row r.
BackwardExpansion backward_expansion(const Tensor& z, const Tensor& f1, const Tensor& f2,
                                     const Mask* mask, double eps = kExpansionEpsilon);

Tensor select(const Tensor& selector, const Tensor& b1, const Tensor& b2);

/// Masks for causal dynamic expansion: row r may read key t iff t <= origin[r];
/// output t may gather row r iff origin[r] <= t.
Mask causal_forward_mask(const std::vector<std::size_t>& origin, std::size_t length);
Mask causal_backward_mask(const std::vector<std::size_t>& origin, std::size_t length);

/// Full layer on x (T x d); output is T x d.
Tensor expansion_layer(const Tensor& x, const ExpansionParams& params);

}  // namespace expnet
