#include "expnet/expansion.hpp"

#include <cmath>

#include "expnet/errors.hpp"
#include "expnet/ops.hpp"
#include "init.hpp"

namespace expnet {

void check_placement(const ExpansionMode& mode, Placement placement) {
  if (mode.n_e == 0) throw ConfigError("expansion coefficient N_E must be positive");
  if (placement == Placement::Autoregressive && mode.kind != ExpansionKind::DynamicCausal) {
    throw ConfigError(to_string(mode.kind) +
                      " expansion breaks the autoregressive condition; decoders need "
                      "dynamic-causal expansion");
  }
}

std::string to_string(ExpansionKind kind) {
  switch (kind) {
    case ExpansionKind::Static:
      return "static";
    case ExpansionKind::DynamicCausal:
      return "dynamic_causal";
    case ExpansionKind::DynamicBidirectional:
      return "dynamic_bidirectional";
  }
  return "?";
}

ExpansionKind expansion_kind_from_string(const std::string& name) {
  if (name == "static") return ExpansionKind::Static;
  if (name == "dynamic_causal") return ExpansionKind::DynamicCausal;
  if (name == "dynamic_bidirectional" || name == "dynamic") return ExpansionKind::DynamicBidirectional;
  throw ConfigError("unknown expansion kind '" + name + "'");
}

ExpansionParams ExpansionParams::init(std::size_t d_model, ExpansionMode mode, std::mt19937_64& rng) {
  if (d_model == 0) throw ConfigError("d_model must be positive");
  if (mode.n_e == 0) throw ConfigError("expansion coefficient N_E must be positive");
  ExpansionParams p;
  p.mode = mode;
  p.q_bank = detail::normal_param({mode.n_e, d_model}, 0.02, rng);
  p.b_bank = detail::normal_param({mode.n_e, d_model}, 0.02, rng);
  if (mode.dynamic()) p.w_c = detail::fan_in_param(d_model, d_model, rng);
  p.w_k = detail::fan_in_param(d_model, d_model, rng);
  p.w_v1 = detail::fan_in_param(d_model, d_model, rng);
  p.w_v2 = detail::fan_in_param(d_model, d_model, rng);
  p.w_s = detail::fan_in_param(d_model, d_model, rng);
  return p;
}

void ExpansionParams::validate() const {
  if (!(epsilon > 0.0)) throw ConfigError("expansion epsilon must be positive");
  if (q_bank.shape() != b_bank.shape()) {
    throw ConfigError("expansion query bank " + shape_to_string(q_bank.shape()) +
                      " and bias bank " + shape_to_string(b_bank.shape()) + " differ");
  }
  if (q_bank.rank() != 2 || q_bank.rows() != mode.n_e) {
    throw ConfigError("expansion banks must hold N_E=" + std::to_string(mode.n_e) + " rows");
  }
  const std::size_t d = q_bank.cols();
  for (const Tensor* w : {&w_k, &w_v1, &w_v2, &w_s}) {
    if (!w->defined() || w->shape() != Shape{d, d}) throw ConfigError("expansion projection must be d x d");
  }
  if (mode.dynamic() != w_c.defined()) {
    throw ConfigError(mode.dynamic() ? "dynamic expansion needs the conditioning projection"
                                     : "static expansion carries no conditioning projection");
  }
  if (w_c.defined() && w_c.shape() != Shape{d, d}) throw ConfigError("expansion projection must be d x d");
}

void ExpansionParams::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + "q_bank", q_bank});
  out.push_back({prefix + "b_bank", b_bank});
  if (w_c.defined()) out.push_back({prefix + "w_c", w_c});
  out.push_back({prefix + "w_k", w_k});
  out.push_back({prefix + "w_v1", w_v1});
  out.push_back({prefix + "w_v2", w_v2});
  out.push_back({prefix + "w_s", w_s});
}

Tensor row_normalize(const Tensor& x, double eps) {
  if (x.rank() != 2) throw DimensionError("row_normalize expects a matrix, got " + shape_to_string(x.shape()));
  if (!(eps > 0.0)) throw ContractError("row_normalize epsilon must be positive");
  const std::size_t m = x.rows(), n = x.cols();
  auto xd = x.data();
  if (debug_checks()) {
    for (double v : xd)
      if (v < 0.0) throw ContractError("row_normalize input has a negative entry");
  }
  std::vector<double> out(m * n);
  std::vector<double> denom(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += xd[i * n + j];
    denom[i] = s + eps;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xd[i * n + j] / denom[i];
  }
  return detail::make_result(
      {m, n}, std::move(out), {x},
      [x, m, n, denom = std::move(denom)](std::span<const double> y, std::span<const double> g) {
        auto gx = detail::grad_sink(x);
        // d out_ij / d x_ik = [j==k]/D_i - x_ij / D_i^2 = ([j==k] - y_ij) / D_i
        for (std::size_t i = 0; i < m; ++i) {
          double gy = 0.0;
          for (std::size_t j = 0; j < n; ++j) gy += g[i * n + j] * y[i * n + j];
          for (std::size_t k = 0; k < n; ++k) gx[i * n + k] += (g[i * n + k] - gy) / denom[i];
        }
      });
}

ExpansionVectors build_static_expansion(const ExpansionParams& params) {
  if (params.mode.kind != ExpansionKind::Static) {
    throw ContractError("build_static_expansion called on a dynamic expansion layer");
  }
  return {params.q_bank, params.b_bank, {}};
}

ExpansionVectors build_dynamic_expansion(const Tensor& conditioning, const ExpansionParams& params) {
  if (!params.mode.dynamic()) throw ContractError("build_dynamic_expansion called on a static expansion layer");
  if (conditioning.rank() != 2 || conditioning.cols() != params.q_bank.cols()) {
    throw DimensionError("conditioning " + shape_to_string(conditioning.shape()) +
                         " does not match expansion width " + std::to_string(params.q_bank.cols()));
  }
  const std::size_t t_len = conditioning.rows(), n_e = params.mode.n_e;
  std::vector<std::size_t> origin(t_len * n_e), bank(t_len * n_e);
  for (std::size_t i = 0; i < t_len; ++i) {
    for (std::size_t j = 0; j < n_e; ++j) {
      origin[i * n_e + j] = i;
      bank[i * n_e + j] = j;
    }
  }
  Tensor repeated = gather_rows(conditioning, origin);
  Tensor queries = add(repeated, gather_rows(params.q_bank, bank));
  Tensor biases = add(repeated, gather_rows(params.b_bank, bank));
  return {std::move(queries), std::move(biases), std::move(origin)};
}

namespace {

// Phi(relu(+/-z)) with disallowed entries removed before normalization.
std::pair<Tensor, Tensor> sign_split_weights(const Tensor& z, const Mask* mask, double eps) {
  Tensor pos = relu(z);
  Tensor negative = relu(neg(z));
  if (mask) {
    pos = masked_fill(pos, *mask, 0.0);
    negative = masked_fill(negative, *mask, 0.0);
  }
  return {row_normalize(pos, eps), row_normalize(negative, eps)};
}

}  // namespace

ForwardExpansion forward_expansion(const Tensor& queries, const Tensor& keys, const Tensor& values1,
                                   const Tensor& values2, const Tensor& biases, const Mask* mask,
                                   double eps) {
  if (keys.rank() != 2 || values1.shape() != keys.shape() || values2.shape() != keys.shape()) {
    throw DimensionError("forward_expansion: keys/values must share shape T x d");
  }
  if (queries.rank() != 2 || queries.shape() != biases.shape() || queries.cols() != keys.cols()) {
    throw DimensionError("forward_expansion: expansion queries " + shape_to_string(queries.shape()) +
                         " / biases " + shape_to_string(biases.shape()) + " vs keys " +
                         shape_to_string(keys.shape()));
  }
  if (mask && (mask->rows != queries.rows() || mask->cols != keys.rows())) {
    throw DimensionError("forward_expansion: mask " + shape_to_string({mask->rows, mask->cols}) +
                         " vs similarity " + shape_to_string({queries.rows(), keys.rows()}));
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(keys.cols()));
  Tensor z = scale(matmul(queries, transpose(keys)), inv_sqrt_d);
  auto [r1, r2] = sign_split_weights(z, mask, eps);
  Tensor f1 = add(matmul(r1, values1), biases);
  Tensor f2 = add(matmul(r2, values2), biases);
  return {std::move(f1), std::move(f2), std::move(z)};
}

BackwardExpansion backward_expansion(const Tensor& z, const Tensor& f1, const Tensor& f2,
                                     const Mask* mask, double eps) {
  if (z.rank() != 2 || f1.rank() != 2 || f1.shape() != f2.shape() || f1.rows() != z.rows()) {
    throw DimensionError("backward_expansion: similarity " + shape_to_string(z.shape()) +
                         " vs forward vectors " + shape_to_string(f1.shape()) + "/" +
                         shape_to_string(f2.shape()));
  }
  if (mask && (mask->rows != z.cols() || mask->cols != z.rows())) {
    throw DimensionError("backward_expansion: mask " + shape_to_string({mask->rows, mask->cols}) +
                         " vs transposed similarity " + shape_to_string({z.cols(), z.rows()}));
  }
  auto [r1, r2] = sign_split_weights(transpose(z), mask, eps);
  return {matmul(r1, f1), matmul(r2, f2)};
}

Tensor select(const Tensor& selector, const Tensor& b1, const Tensor& b2) {
  if (selector.shape() != b1.shape() || b1.shape() != b2.shape()) {
    throw DimensionError("select: selector " + shape_to_string(selector.shape()) + ", paths " +
                         shape_to_string(b1.shape()) + " / " + shape_to_string(b2.shape()));
  }
  // b2 + gate * (b1 - b2); equal paths pass through bit-exactly.
  return add(b2, hadamard(sigmoid(selector), sub(b1, b2)));
}

Mask causal_forward_mask(const std::vector<std::size_t>& origin, std::size_t length) {
  Mask m(origin.size(), length, false);
  for (std::size_t r = 0; r < origin.size(); ++r)
    for (std::size_t t = 0; t <= origin[r] && t < length; ++t) m.set(r, t, true);
  return m;
}

Mask causal_backward_mask(const std::vector<std::size_t>& origin, std::size_t length) {
  Mask m(length, origin.size(), false);
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t r = 0; r < origin.size(); ++r) m.set(t, r, origin[r] <= t);
  return m;
}

Tensor expansion_layer(const Tensor& x, const ExpansionParams& params) {
  if (x.rank() != 2 || x.cols() != params.d_model()) {
    throw DimensionError("expansion_layer: input " + shape_to_string(x.shape()) +
                         " vs d_model " + std::to_string(params.d_model()));
  }
  Tensor keys = matmul(x, params.w_k);
  Tensor values1 = matmul(x, params.w_v1);
  Tensor values2 = matmul(x, params.w_v2);
  Tensor selector = matmul(x, params.w_s);

  ExpansionVectors vectors = params.mode.dynamic()
                                 ? build_dynamic_expansion(matmul(x, params.w_c), params)
                                 : build_static_expansion(params);

  if (params.mode.kind == ExpansionKind::DynamicCausal) {
    const Mask fw = causal_forward_mask(vectors.origin, x.rows());
    const Mask bw = causal_backward_mask(vectors.origin, x.rows());
    auto forward = forward_expansion(vectors.queries, keys, values1, values2, vectors.biases, &fw,
                                     params.epsilon);
    auto back = backward_expansion(forward.z, forward.f1, forward.f2, &bw, params.epsilon);
    return select(selector, back.b1, back.b2);
  }
  auto forward = forward_expansion(vectors.queries, keys, values1, values2, vectors.biases, nullptr,
                                   params.epsilon);
  auto back = backward_expansion(forward.z, forward.f1, forward.f2, nullptr, params.epsilon);
  return select(selector, back.b1, back.b2);
}

}  // namespace expnet
