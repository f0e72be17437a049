// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Small products otherwise take a coefficient-wise path whose rounding depends on
// buffer alignment. Routing every product through the blocked kernels keeps results
// bit-identical across runs.
#ifndef EIGEN_GEMM_TO_COEFFBASED_THRESHOLD
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#endif
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "sadq/numeric/tensor.hpp"

namespace sadq {

/// Additive score used in place of -infinity for disallowed attention entries.
inline constexpr double kMaskedScore = -1e9;

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, "add", [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (double* g = detail::parent_grad(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, "sub", [](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, "mul", [](detail::Node& self) {
    const auto& x = self.parents[0]->data;
    const auto& y = self.parents[1]->data;
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
    if (double* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return detail::make_result(a.shape(), std::move(out), {&a}, "scale", [s](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
  });
}

inline Tensor square(const Tensor& a) { return mul(a, a); }

/// tanh-approximated GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
  }
  return detail::make_result(a.shape(), std::move(out), {&a}, "gelu", [](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    if (!g) return;
    const auto& xs = self.parents[0]->data;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double x = xs[i];
      const double u = c * (x + 0.044715 * x * x * x);
      const double th = std::tanh(u);
      const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
      g[i] += self.grad[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
    }
  });
}

/// a (m, n) + b (n), broadcasting b over rows.
inline Tensor add_row(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "add_row");
  if (b.numel() != a.cols()) {
    throw ShapeError("add_row: row vector " + shape_str(b.shape()) + " does not match " + shape_str(a.shape()));
  }
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = a.data()[r * n + c] + b.data()[c];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, "add_row", [m, n](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < m * n; ++i) g[i] += self.grad[i];
    if (double* g = detail::parent_grad(self, 1))
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
  });
}

/// a (m, n) scaled row-wise by w (m).
inline Tensor mul_col(const Tensor& a, const Tensor& w) {
  detail::require_matrix(a, "mul_col");
  if (w.numel() != a.rows()) {
    throw ShapeError("mul_col: column vector " + shape_str(w.shape()) + " does not match " + shape_str(a.shape()));
  }
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = a.data()[r * n + c] * w.data()[r];
  return detail::make_result(a.shape(), std::move(out), {&a, &w}, "mul_col", [m, n](detail::Node& self) {
    const auto& x = self.parents[0]->data;
    const auto& wv = self.parents[1]->data;
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[r * n + c] * wv[r];
    if (double* g = detail::parent_grad(self, 1))
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) g[r] += self.grad[r * n + c] * x[r * n + c];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.rows());
  const auto k = static_cast<Eigen::Index>(a.cols());
  const auto n = static_cast<Eigen::Index>(b.cols());
  std::vector<double> out(static_cast<std::size_t>(m * n));
  detail::MutMap(out.data(), m, n).noalias() =
      detail::ConstMap(a.data().data(), m, k) * detail::ConstMap(b.data().data(), k, n);
  return detail::make_result({a.rows(), b.cols()}, std::move(out), {&a, &b}, "matmul",
                             [m, k, n](detail::Node& self) {
                               detail::ConstMap gout(self.grad.data(), m, n);
                               if (double* g = detail::parent_grad(self, 0))
                                 detail::MutMap(g, m, k).noalias() +=
                                     gout * detail::ConstMap(self.parents[1]->data.data(), k, n).transpose();
                               if (double* g = detail::parent_grad(self, 1))
                                 detail::MutMap(g, k, n).noalias() +=
                                     detail::ConstMap(self.parents[0]->data.data(), m, k).transpose() * gout;
                             });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[c * m + r] = a.data()[r * n + c];
  return detail::make_result({n, m}, std::move(out), {&a}, "transpose", [m, n](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[c * m + r];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::make_result({}, {s}, {&a}, "sum", [](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) g[i] += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

/// Sum of a matrix along `axis` (0: over rows -> (n), 1: over columns -> (m)).
inline Tensor sum(const Tensor& a, std::size_t axis) {
  detail::require_matrix(a, "sum(axis)");
  if (axis > 1) throw ShapeError("sum: axis " + std::to_string(axis) + " invalid for a matrix");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(axis == 0 ? n : m, 0.0);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[axis == 0 ? c : r] += a.data()[r * n + c];
  const std::size_t len = out.size();
  return detail::make_result({len}, std::move(out), {&a}, "sum_axis", [m, n, axis](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[axis == 0 ? c : r];
  });
}

/// Σ_i w_i Σ_j x_ij², with constant per-row weights w.
inline Tensor row_weighted_sqsum(const Tensor& x, std::span<const double> w) {
  detail::require_matrix(x, "row_weighted_sqsum");
  if (w.size() != x.rows()) throw ShapeError("row_weighted_sqsum: weight count does not match rows");
  const std::size_t m = x.rows(), n = x.cols();
  double s = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (w[r] == 0.0) continue;
    double row = 0.0;
    for (std::size_t c = 0; c < n; ++c) row += x.data()[r * n + c] * x.data()[r * n + c];
    s += w[r] * row;
  }
  std::vector<double> weights(w.begin(), w.end());
  return detail::make_result({}, {s}, {&x}, "row_weighted_sqsum",
                             [m, n, weights = std::move(weights)](detail::Node& self) {
                               double* g = detail::parent_grad(self, 0);
                               if (!g) return;
                               const auto& xs = self.parents[0]->data;
                               for (std::size_t r = 0; r < m; ++r)
                                 for (std::size_t c = 0; c < n; ++c)
                                   g[r * n + c] += self.grad[0] * 2.0 * weights[r] * xs[r * n + c];
                             });
}

// ---------------------------------------------------------------------------
// Softmax family

/// Softmax along `axis` of an arbitrary-rank tensor, with max subtraction.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(x.shape()));
  }
  const std::size_t len = x.shape()[axis];
  if (len == 0) throw ShapeError("softmax over an empty axis");
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t outer = x.numel() / (len * inner);

  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x.data()[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(x.data()[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  return detail::make_result(x.shape(), std::move(out), {&x}, "softmax", [outer, inner, len](detail::Node& self) {
    double* g = detail::parent_grad(self, 0);
    if (!g) return;
    const auto& y = self.data;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += self.grad[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          g[i] += y[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

/// Weighted mean cross-entropy of row-wise logits against integer targets.
/// Rows with zero weight are ignored; the result is Σ w_r CE_r / Σ w_r.
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                            std::span<const double> weights) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t m = logits.rows(), n = logits.cols();
  if (targets.size() != m || weights.size() != m) throw ShapeError("cross_entropy: targets/weights length mismatch");
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  if (wsum <= 0.0) throw ShapeError("cross_entropy: weights sum to zero");

  std::vector<double> probs(m * n);
  double loss = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (targets[r] >= n) throw ShapeError("cross_entropy: target id out of range");
    const double* row = logits.data().data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < n; ++c) probs[r * n + c] = std::exp(row[c] - lse);
    loss += weights[r] * (lse - row[targets[r]]);
  }
  loss /= wsum;
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  std::vector<double> w(weights.begin(), weights.end());
  return detail::make_result(
      {}, {loss}, {&logits}, "cross_entropy",
      [m, n, wsum, probs = std::move(probs), tgt = std::move(tgt), w = std::move(w)](detail::Node& self) {
        double* g = detail::parent_grad(self, 0);
        if (!g) return;
        for (std::size_t r = 0; r < m; ++r) {
          if (w[r] == 0.0) continue;
          const double k = self.grad[0] * w[r] / wsum;
          for (std::size_t c = 0; c < n; ++c) g[r * n + c] += k * (probs[r * n + c] - (c == tgt[r] ? 1.0 : 0.0));
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  detail::require_matrix(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma.numel() != n || beta.numel() != n) throw ShapeError("layer_norm: affine parameters do not match width");
  std::vector<double> out(m * n), xhat(m * n), inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = x.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (row[c] - mu) * inv_std[r];
      out[r * n + c] = xhat[r * n + c] * gamma.data()[c] + beta.data()[c];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {&x, &gamma, &beta}, "layer_norm",
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& gam = self.parents[1]->data;
        if (double* g = detail::parent_grad(self, 1))
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c] * xhat[r * n + c];
        if (double* g = detail::parent_grad(self, 2))
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
        if (double* g = detail::parent_grad(self, 0)) {
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < m; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              const double dxh = self.grad[r * n + c] * gam[c];
              s1 += dxh;
              s2 += dxh * xhat[r * n + c];
            }
            for (std::size_t c = 0; c < n; ++c) {
              const double dxh = self.grad[r * n + c] * gam[c];
              g[r * n + c] += inv_std[r] * (dxh - inv_n * s1 - xhat[r * n + c] * inv_n * s2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing

/// Rows of `x` selected by `idx` (repeats allowed).
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  detail::require_matrix(x, "gather_rows");
  const std::size_t n = x.cols(), m = x.rows();
  std::vector<double> out(idx.size() * n);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= m) {
      throw ShapeError("gather_rows: index " + std::to_string(idx[r]) + " out of range for " + std::to_string(m) +
                       " rows");
    }
    std::copy_n(x.data().data() + idx[r] * n, n, out.data() + r * n);
  }
  std::vector<std::size_t> ids(idx.begin(), idx.end());
  return detail::make_result({idx.size(), n}, std::move(out), {&x}, "gather_rows",
                             [n, ids = std::move(ids)](detail::Node& self) {
                               if (double* g = detail::parent_grad(self, 0))
                                 for (std::size_t r = 0; r < ids.size(); ++r)
                                   for (std::size_t c = 0; c < n; ++c) g[ids[r] * n + c] += self.grad[r * n + c];
                             });
}

/// Embedding lookup: rows of `table` for each id.
inline Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) { return gather_rows(table, ids); }

/// out (rows, n) with out[idx[r]] += x[r].
inline Tensor scatter_add_rows(const Tensor& x, std::span<const std::size_t> idx, std::size_t rows) {
  detail::require_matrix(x, "scatter_add_rows");
  if (idx.size() != x.rows()) throw ShapeError("scatter_add_rows: index count does not match rows");
  const std::size_t n = x.cols();
  std::vector<double> out(rows * n, 0.0);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= rows) throw ShapeError("scatter_add_rows: index out of range");
    for (std::size_t c = 0; c < n; ++c) out[idx[r] * n + c] += x.data()[r * n + c];
  }
  std::vector<std::size_t> ids(idx.begin(), idx.end());
  return detail::make_result({rows, n}, std::move(out), {&x}, "scatter_add_rows",
                             [n, ids = std::move(ids)](detail::Node& self) {
                               if (double* g = detail::parent_grad(self, 0))
                                 for (std::size_t r = 0; r < ids.size(); ++r)
                                   for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[ids[r] * n + c];
                             });
}

/// Vector of x[rows[i], col].
inline Tensor gather_column(const Tensor& x, std::span<const std::size_t> rows, std::size_t col) {
  detail::require_matrix(x, "gather_column");
  const std::size_t n = x.cols();
  if (col >= n) throw ShapeError("gather_column: column out of range");
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) throw ShapeError("gather_column: row out of range");
    out[i] = x.data()[rows[i] * n + col];
  }
  std::vector<std::size_t> ids(rows.begin(), rows.end());
  return detail::make_result({rows.size()}, std::move(out), {&x}, "gather_column",
                             [n, col, ids = std::move(ids)](detail::Node& self) {
                               if (double* g = detail::parent_grad(self, 0))
                                 for (std::size_t i = 0; i < ids.size(); ++i) g[ids[i] * n + col] += self.grad[i];
                             });
}

/// Row-wise blend: out_r = ca_r * a_r + cb_r * b_r with constant coefficients.
inline Tensor row_affine(const Tensor& a, const Tensor& b, std::span<const double> ca, std::span<const double> cb) {
  detail::require_same_shape(a, b, "row_affine");
  detail::require_matrix(a, "row_affine");
  const std::size_t m = a.rows(), n = a.cols();
  if (ca.size() != m || cb.size() != m) throw ShapeError("row_affine: coefficient count does not match rows");
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = ca[r] * a.data()[r * n + c] + cb[r] * b.data()[r * n + c];
  std::vector<double> ka(ca.begin(), ca.end()), kb(cb.begin(), cb.end());
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, "row_affine",
                             [m, n, ka = std::move(ka), kb = std::move(kb)](detail::Node& self) {
                               if (double* g = detail::parent_grad(self, 0))
                                 for (std::size_t r = 0; r < m; ++r)
                                   for (std::size_t c = 0; c < n; ++c) g[r * n + c] += ka[r] * self.grad[r * n + c];
                               if (double* g = detail::parent_grad(self, 1))
                                 for (std::size_t r = 0; r < m; ++r)
                                   for (std::size_t c = 0; c < n; ++c) g[r * n + c] += kb[r] * self.grad[r * n + c];
                             });
}

/// Rows where mask is set are replaced by the row vector `fill`.
inline Tensor replace_rows(const Tensor& x, const Tensor& fill, std::span<const std::uint8_t> mask) {
  detail::require_matrix(x, "replace_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (fill.numel() != n) throw ShapeError("replace_rows: fill width does not match " + shape_str(x.shape()));
  if (mask.size() != m) throw ShapeError("replace_rows: mask length does not match rows");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < m; ++r)
    if (mask[r]) std::copy_n(fill.data().data(), n, out.data() + r * n);
  std::vector<std::uint8_t> mk(mask.begin(), mask.end());
  return detail::make_result(x.shape(), std::move(out), {&x, &fill}, "replace_rows",
                             [m, n, mk = std::move(mk)](detail::Node& self) {
                               double* gx = detail::parent_grad(self, 0);
                               double* gf = detail::parent_grad(self, 1);
                               for (std::size_t r = 0; r < m; ++r)
                                 for (std::size_t c = 0; c < n; ++c) {
                                   if (mk[r]) {
                                     if (gf) gf[c] += self.grad[r * n + c];
                                   } else if (gx) {
                                     gx[r * n + c] += self.grad[r * n + c];
                                   }
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Slicing and concatenation

/// Columns [begin, begin + count) of a matrix.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  detail::require_matrix(x, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (begin + count > n) throw ShapeError("slice_cols: range exceeds " + shape_str(x.shape()));
  std::vector<double> out(m * count);
  for (std::size_t r = 0; r < m; ++r) std::copy_n(x.data().data() + r * n + begin, count, out.data() + r * count);
  return detail::make_result({m, count}, std::move(out), {&x}, "slice_cols", [m, n, begin, count](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < count; ++c) g[r * n + begin + c] += self.grad[r * count + c];
  });
}

/// Rows [begin, begin + count) of a matrix.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  detail::require_matrix(x, "slice_rows");
  const std::size_t n = x.cols();
  if (begin + count > x.rows()) throw ShapeError("slice_rows: range exceeds " + shape_str(x.shape()));
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                          x.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  return detail::make_result({count, n}, std::move(out), {&x}, "slice_rows", [n, begin, count](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < count * n; ++i) g[begin * n + i] += self.grad[i];
  });
}

namespace detail {

// Concatenation has a variable number of parents, so it builds its node directly.
inline Tensor concat_impl(const std::vector<Tensor>& parts, bool by_cols) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  for (const auto& p : parts) require_matrix(p, "concat");
  const std::size_t m = by_cols ? parts[0].rows() : 0;
  const std::size_t n = by_cols ? 0 : parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (by_cols ? p.rows() != m : p.cols() != n) throw ShapeError("concat: incompatible part " + shape_str(p.shape()));
    total += by_cols ? p.cols() : p.rows();
  }
  const std::size_t rows = by_cols ? m : total, cols = by_cols ? total : n;
  std::vector<double> out(rows * cols);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    if (by_cols) {
      for (std::size_t r = 0; r < m; ++r)
        std::copy_n(p.data().data() + r * p.cols(), p.cols(), out.data() + r * cols + off);
      off += p.cols();
    } else {
      std::copy(p.data().begin(), p.data().end(), out.begin() + static_cast<std::ptrdiff_t>(off * cols));
      off += p.rows();
    }
  }
  Tensor result({rows, cols}, std::move(out));
  if (!grad_mode_flag()) return result;
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (!any) return result;
  auto node = result.node();
  node->requires_grad = true;
  node->op = by_cols ? "concat_cols" : "concat_rows";
  for (const auto& p : parts) node->parents.push_back(p.node());
  node->backward = [offsets, rows, cols, by_cols](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      double* g = parent_grad(self, i);
      if (!g) continue;
      const Shape& ps = self.parents[i]->shape;
      if (by_cols) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < ps[1]; ++c) g[r * ps[1] + c] += self.grad[r * cols + offsets[i] + c];
      } else {
        for (std::size_t k = 0; k < ps[0] * cols; ++k) g[k] += self.grad[offsets[i] * cols + k];
      }
    }
  };
  return result;
}

}  // namespace detail

inline Tensor concat_cols(const std::vector<Tensor>& parts) { return detail::concat_impl(parts, true); }
inline Tensor concat_rows(const std::vector<Tensor>& parts) { return detail::concat_impl(parts, false); }

}  // namespace sadq
