#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "expnet/tensor.hpp"

namespace expnet {

// Matrix products. All operands are rank-2.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise ops over identically shaped operands.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor neg(const Tensor& a);
/// 1 - a, elementwise.
Tensor one_minus(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

/// x[m x n] + bias[n] added to every row.
Tensor add_row(const Tensor& x, const Tensor& bias);

Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

/// Normalizes each row of x[m x d] to zero mean / unit variance, then applies
/// gain[d] and bias[d].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
/// Rows [begin, end).
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
/// Columns [begin, end).
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);

/// out[i] = x[index[i]]. Backward scatter-adds, so repeated indices are fine.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);

/// Keeps allowed positions and writes `value` elsewhere. Gradient is zero at
/// replaced positions.
Tensor masked_fill(const Tensor& x, const Mask& mask, double value);

/// Copies x into a new shape with the same element count.
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// out[i] = x[i, column[i]] for a matrix x; shape [m].
Tensor pick(const Tensor& x, std::span<const std::size_t> column);

namespace kernels {

/// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);
/// c[m x n] += a[m x k] * b[n x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);
/// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);

}  // namespace kernels

}  // namespace expnet
