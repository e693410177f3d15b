#include "expnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "expnet/errors.hpp"

namespace expnet {

using detail::grad_sink;
using detail::make_result;

namespace kernels {

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

}  // namespace kernels

namespace {

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

template <typename F, typename D>
Tensor unary(const Tensor& a, F forward, D derivative) {
  auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
  return make_result(a.shape(), std::move(out), {a},
                     [a, derivative](std::span<const double> y, std::span<const double> g) {
                       auto ga = grad_sink(a);
                       auto x = a.data();
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * derivative(x[i], y[i]);
                     });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), {a, b},
                     [a, b, m, k, n](std::span<const double>, std::span<const double> g) {
                       if (auto ga = grad_sink(a); !ga.empty())
                         kernels::gemm_nt(g.data(), b.data().data(), ga.data(), m, n, k);
                       if (auto gb = grad_sink(b); !gb.empty())
                         kernels::gemm_tn(a.data().data(), g.data(), gb.data(), m, k, n);
                     });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  auto x = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return make_result({n, m}, std::move(out), {a},
                     [a, m, n](std::span<const double>, std::span<const double> g) {
                       auto ga = grad_sink(a);
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [a, b](std::span<const double>, std::span<const double> g) {
                       if (auto ga = grad_sink(a); !ga.empty())
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                       if (auto gb = grad_sink(b); !gb.empty())
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [a, b](std::span<const double>, std::span<const double> g) {
                       if (auto ga = grad_sink(a); !ga.empty())
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                       if (auto gb = grad_sink(b); !gb.empty())
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                     });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [a, b](std::span<const double>, std::span<const double> g) {
                       if (auto ga = grad_sink(a); !ga.empty()) {
                         auto y = b.data();
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
                       }
                       if (auto gb = grad_sink(b); !gb.empty()) {
                         auto x = a.data();
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
                       }
                     });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor one_minus(const Tensor& a) {
  return unary(
      a, [](double x) { return 1.0 - x; }, [](double, double) { return -1.0; });
}

Tensor relu(const Tensor& a) {
  // Subgradient 0 at exactly 0.
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_row");
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.numel() != n) {
    throw DimensionError("add_row: bias " + shape_to_string(bias.shape()) + " vs rows of " +
                         shape_to_string(x.shape()));
  }
  auto xd = x.data(), bd = bias.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xd[i * n + j] + bd[j];
  return make_result({m, n}, std::move(out), {x, bias},
                     [x, bias, m, n](std::span<const double>, std::span<const double> g) {
                       if (auto gx = grad_sink(x); !gx.empty())
                         for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                       if (auto gb = grad_sink(bias); !gb.empty())
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                     });
}

Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  auto xd = x.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xd.data() + i * n;
    double* o = out.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += (o[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  return make_result({m, n}, std::move(out), {x},
                     [x, m, n](std::span<const double> y, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < m; ++i) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                         for (std::size_t j = 0; j < n; ++j)
                           gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                       }
                     });
}

Tensor log_softmax_rows(const Tensor& x) {
  require_matrix(x, "log_softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  auto xd = x.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xd.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] - lse;
  }
  return make_result({m, n}, std::move(out), {x},
                     [x, m, n](std::span<const double> y, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < m; ++i) {
                         double gsum = 0.0;
                         for (std::size_t j = 0; j < n; ++j) gsum += g[i * n + j];
                         for (std::size_t j = 0; j < n; ++j)
                           gx[i * n + j] += g[i * n + j] - std::exp(y[i * n + j]) * gsum;
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm on a scalar");
  const std::size_t d = x.shape().back();
  if (d == 0) throw DimensionError("layer_norm over an empty feature dimension");
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_to_string(gain.shape()) + "/" +
                         shape_to_string(bias.shape()) + " vs input " + shape_to_string(x.shape()));
  }
  const std::size_t m = x.numel() / d;
  auto xd = x.data(), gd = gain.data(), bd = bias.data();
  std::vector<double> out(m * d);
  std::vector<double> xhat(m * d);
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xd.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mu) * inv_std[i];
      out[i * d + j] = xhat[i * d + j] * gd[j] + bd[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, m, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          std::span<const double>, std::span<const double> g) {
        if (auto gg = grad_sink(gain); !gg.empty())
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
        if (auto gb = grad_sink(bias); !gb.empty())
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
        if (auto gx = grad_sink(x); !gx.empty()) {
          auto gd = gain.data();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t i = 0; i < m; ++i) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dy = g[i * d + j] * gd[j];
              sum_dy += dy;
              sum_dy_xhat += dy * xhat[i * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double dy = g[i * d + j] * gd[j];
              gx[i * d + j] +=
                  inv_std[i] * (dy - inv_d * sum_dy - xhat[i * d + j] * inv_d * sum_dy_xhat);
            }
          }
        }
      });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != n) {
      throw DimensionError("concat_rows: width mismatch " + shape_to_string(parts.front().shape()) +
                           " vs " + shape_to_string(p.shape()));
    }
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result({m, n}, std::move(out), parts,
                     [parts](std::span<const double>, std::span<const double> g) {
                       std::size_t offset = 0;
                       for (const auto& p : parts) {
                         if (auto gp = grad_sink(p); !gp.empty())
                           for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
                         offset += p.numel();
                       }
                     });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != m) {
      throw DimensionError("concat_cols: height mismatch " +
                           shape_to_string(parts.front().shape()) + " vs " +
                           shape_to_string(p.shape()));
    }
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    auto pd = p.data();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(pd.data() + i * w, w, out.data() + i * n + col);
    col += w;
  }
  return make_result({m, n}, std::move(out), parts,
                     [parts, m, n](std::span<const double>, std::span<const double> g) {
                       std::size_t col = 0;
                       for (const auto& p : parts) {
                         const std::size_t w = p.cols();
                         if (auto gp = grad_sink(p); !gp.empty())
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * n + col + j];
                         col += w;
                       }
                     });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_rows");
  if (begin > end || end > x.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of " + shape_to_string(x.shape()));
  }
  const std::size_t n = x.cols();
  auto xd = x.data();
  std::vector<double> out(xd.begin() + begin * n, xd.begin() + end * n);
  return make_result({end - begin, n}, std::move(out), {x},
                     [x, begin, n](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[begin * n + i] += g[i];
                     });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_cols");
  if (begin > end || end > x.cols()) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of " + shape_to_string(x.shape()));
  }
  const std::size_t m = x.rows(), n = x.cols(), w = end - begin;
  auto xd = x.data();
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(xd.data() + i * n + begin, w, out.data() + i * w);
  return make_result({m, w}, std::move(out), {x},
                     [x, begin, m, n, w](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < w; ++j) gx[i * n + begin + j] += g[i * w + j];
                     });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  require_matrix(x, "gather_rows");
  const std::size_t n = x.cols();
  auto xd = x.data();
  std::vector<double> out(index.size() * n);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(index[i]) + " out of " +
                           shape_to_string(x.shape()));
    }
    std::copy_n(xd.data() + index[i] * n, n, out.data() + i * n);
  }
  return make_result({index.size(), n}, std::move(out), {x},
                     [x, n, idx = std::vector<std::size_t>(index.begin(), index.end())](
                         std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t j = 0; j < n; ++j) gx[idx[i] * n + j] += g[i * n + j];
                     });
}

Tensor masked_fill(const Tensor& x, const Mask& mask, double value) {
  require_matrix(x, "masked_fill");
  if (mask.rows != x.rows() || mask.cols != x.cols()) {
    throw DimensionError("mask " + shape_to_string({mask.rows, mask.cols}) + " vs tensor " +
                         shape_to_string(x.shape()));
  }
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = mask.allowed[i] ? xd[i] : value;
  return make_result(x.shape(), std::move(out), {x},
                     [x, allowed = mask.allowed](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < g.size(); ++i)
                         if (allowed[i]) gx[i] += g[i];
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_to_string(x.shape()) + " -> " + shape_to_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x},
                     [x](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                     });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result({}, {total}, {x}, [x](std::span<const double>, std::span<const double> g) {
    auto gx = grad_sink(x);
    for (auto& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor pick(const Tensor& x, std::span<const std::size_t> column) {
  require_matrix(x, "pick");
  const std::size_t m = x.rows(), n = x.cols();
  if (column.size() != m) {
    throw DimensionError("pick: " + std::to_string(column.size()) + " indices for " +
                         shape_to_string(x.shape()));
  }
  auto xd = x.data();
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (column[i] >= n) throw DimensionError("pick: column index out of range");
    out[i] = xd[i * n + column[i]];
  }
  return make_result({m}, std::move(out), {x},
                     [x, n, col = std::vector<std::size_t>(column.begin(), column.end())](
                         std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < col.size(); ++i) gx[i * n + col[i]] += g[i];
                     });
}

}  // namespace expnet
