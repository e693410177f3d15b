#include "expnet/attention.hpp"

#include <cmath>

#include "expnet/errors.hpp"
#include "expnet/ops.hpp"
#include "init.hpp"

namespace expnet {

AttentionParams AttentionParams::init(std::size_t d_model, std::size_t n_heads, std::mt19937_64& rng) {
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("n_heads=" + std::to_string(n_heads) + " must divide d_model=" +
                      std::to_string(d_model));
  }
  AttentionParams p;
  p.w_q = detail::fan_in_param(d_model, d_model, rng);
  p.w_k = detail::fan_in_param(d_model, d_model, rng);
  p.w_v = detail::fan_in_param(d_model, d_model, rng);
  p.w_out = detail::fan_in_param(d_model, d_model, rng);
  p.n_heads = n_heads;
  return p;
}

void AttentionParams::validate() const {
  const std::size_t d = w_q.rows();
  if (n_heads == 0 || d % n_heads != 0) {
    throw ConfigError("n_heads=" + std::to_string(n_heads) + " must divide d_model=" + std::to_string(d));
  }
  for (const Tensor* w : {&w_q, &w_k, &w_v, &w_out}) {
    if (w->shape() != Shape{d, d}) throw ConfigError("attention projection must be d x d");
  }
}

void AttentionParams::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + "w_q", w_q});
  out.push_back({prefix + "w_k", w_k});
  out.push_back({prefix + "w_v", w_v});
  out.push_back({prefix + "w_out", w_out});
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Mask* mask) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.cols() != k.cols() || k.rows() != v.rows()) {
    throw DimensionError("scaled_dot_attention: Q " + shape_to_string(q.shape()) + ", K " +
                         shape_to_string(k.shape()) + ", V " + shape_to_string(v.shape()));
  }
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.cols())));
  if (mask) {
    if (mask->rows != q.rows() || mask->cols != k.rows()) {
      throw DimensionError("attention mask " + shape_to_string({mask->rows, mask->cols}) +
                           " vs scores " + shape_to_string(scores.shape()));
    }
    std::vector<double> penalty(mask->allowed.size());
    for (std::size_t i = 0; i < mask->rows; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < mask->cols; ++j) {
        const bool ok = (*mask)(i, j);
        any = any || ok;
        penalty[i * mask->cols + j] = ok ? 0.0 : kMaskPenalty;
      }
      if (!any) throw ContractError("attention query row " + std::to_string(i) + " has every key masked");
    }
    scores = add(scores, Tensor(scores.shape(), std::move(penalty)));
  }
  return matmul(softmax_rows(scores), v);
}

Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv, const AttentionParams& params,
                            const Mask* mask) {
  const std::size_t d = params.d_model();
  if (x_q.rank() != 2 || x_kv.rank() != 2 || x_q.cols() != d || x_kv.cols() != d) {
    throw DimensionError("multi_head_attention: inputs " + shape_to_string(x_q.shape()) + " / " +
                         shape_to_string(x_kv.shape()) + " vs d_model " + std::to_string(d));
  }
  Tensor q = matmul(x_q, params.w_q);
  Tensor k = matmul(x_kv, params.w_k);
  Tensor v = matmul(x_kv, params.w_v);
  if (params.n_heads == 1) return matmul(scaled_dot_attention(q, k, v, mask), params.w_out);

  const std::size_t dh = d / params.n_heads;
  std::vector<Tensor> heads;
  heads.reserve(params.n_heads);
  for (std::size_t h = 0; h < params.n_heads; ++h) {
    const std::size_t lo = h * dh, hi = lo + dh;
    heads.push_back(scaled_dot_attention(slice_cols(q, lo, hi), slice_cols(k, lo, hi),
                                         slice_cols(v, lo, hi), mask));
  }
  return matmul(concat_cols(heads), params.w_out);
}

}  // namespace expnet
