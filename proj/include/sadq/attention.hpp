// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "sadq/numeric/nn.hpp"
#include "sadq/numeric/ops.hpp"

namespace sadq {

/// Sliding-window pattern with dilation and global tokens over a length-n sequence.
///
/// `window` is the total span: each position sees ⌊window/2⌋ dilated neighbours on
/// each side plus itself, clipped at the sequence boundaries. A window of at least
/// 2n - 1 therefore covers the whole sequence.
struct AttentionPattern {
  std::size_t n = 1;
  std::size_t window = 1;
  std::size_t dilation = 1;
  std::vector<std::size_t> global_tokens;

  void validate() const {
    if (n == 0) throw ConfigError("attention pattern: sequence length must be positive");
    if (window < 1) throw ConfigError("attention pattern: window must be >= 1");
    if (dilation < 1) throw ConfigError("attention pattern: dilation must be >= 1");
    for (std::size_t g : global_tokens)
      if (g >= n) throw ConfigError("attention pattern: global token " + std::to_string(g) + " out of range");
  }

  std::size_t half_span() const { return window / 2; }
};

/// Boolean n x n matrix of allowed (query, key) pairs.
class AttentionMask {
 public:
  AttentionMask() = default;
  explicit AttentionMask(std::size_t n, bool fill = false) : n_(n), bits_(n * n, fill ? 1 : 0) {}

  std::size_t size() const { return n_; }
  bool operator()(std::size_t i, std::size_t j) const { return bits_[i * n_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool on = true) { bits_[i * n_ + j] = on ? 1 : 0; }

  std::size_t row_count(std::size_t i) const {
    return static_cast<std::size_t>(std::count(bits_.begin() + static_cast<std::ptrdiff_t>(i * n_),
                                               bits_.begin() + static_cast<std::ptrdiff_t>((i + 1) * n_), 1));
  }
  std::size_t allowed() const { return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1)); }

  friend bool operator==(const AttentionMask&, const AttentionMask&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint8_t> bits_;
};

inline AttentionMask build_mask(const AttentionPattern& p) {
  p.validate();
  AttentionMask mask(p.n);
  const std::size_t reach = p.half_span() * p.dilation;
  for (std::size_t i = 0; i < p.n; ++i) {
    mask.set(i, i);
    for (std::size_t step = p.dilation; step <= reach; step += p.dilation) {
      if (i >= step) mask.set(i, i - step);
      if (i + step < p.n) mask.set(i, i + step);
    }
  }
  for (std::size_t g : p.global_tokens) {
    for (std::size_t j = 0; j < p.n; ++j) {
      mask.set(g, j);
      mask.set(j, g);
    }
  }
  return mask;
}

/// Per-head query, key and value matrices, each (n, d_k).
struct AttentionInputs {
  Tensor q;
  Tensor k;
  Tensor v;

  void validate() const {
    if (q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape()) {
      throw ShapeError("attention inputs must share shape (n, d_k): Q" + shape_str(q.shape()) + " K" +
                       shape_str(k.shape()) + " V" + shape_str(v.shape()));
    }
    if (q.cols() == 0) throw ShapeError("attention inputs: d_k must be positive");
  }
};

namespace detail {

// Eigen's vectorized reductions peel according to the buffer address, which makes
// the rounding depend on where the allocator placed the data. This loop fixes the order.
inline double ordered_dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

/// Masked scaled dot-product attention over a packed (batch * n, heads * d_k) layout.
///
/// Head h reads columns [h * d_k, (h + 1) * d_k). `head_masks` holds one mask per
/// head, or a single mask shared by all heads. Disallowed scores receive
/// kMaskedScore before the softmax. When `weights_out` is non-null it receives the
/// attention weights laid out (batch, heads, n, n).
inline Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                               std::size_t heads, std::span<const AttentionMask> head_masks,
                               std::vector<double>* weights_out = nullptr) {
  if (q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw ShapeError("masked_attention: Q/K/V shapes differ: " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                     ", " + shape_str(v.shape()));
  }
  if (batch == 0 || heads == 0 || q.rows() % batch != 0 || q.cols() % heads != 0) {
    throw ShapeError("masked_attention: " + shape_str(q.shape()) + " not divisible into batch " +
                     std::to_string(batch) + " x heads " + std::to_string(heads));
  }
  const std::size_t n = q.rows() / batch;
  const std::size_t width = q.cols();
  const std::size_t dk = width / heads;
  if (head_masks.size() != 1 && head_masks.size() != heads) {
    throw ShapeError("masked_attention: expected 1 or " + std::to_string(heads) + " masks");
  }
  for (const auto& m : head_masks)
    if (m.size() != n) throw ShapeError("masked_attention: mask size does not match sequence length");

  using detail::RowMat;
  using Strided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
  const auto N = static_cast<Eigen::Index>(n);
  const auto D = static_cast<Eigen::Index>(dk);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

  // The vectorized exp clamps large negative inputs, so masked weights are also zeroed explicitly.
  std::vector<RowMat> bias(head_masks.size(), RowMat::Zero(N, N));
  std::vector<RowMat> keep(head_masks.size(), RowMat::Ones(N, N));
  for (std::size_t h = 0; h < head_masks.size(); ++h)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (!head_masks[h](i, j)) {
          bias[h](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = kMaskedScore;
          keep[h](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 0.0;
        }

  std::vector<double> probs(batch * heads * n * n);
  std::vector<double> out(q.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * n * width + h * dk;
      Strided qm(q.data().data() + off, N, D, stride);
      Strided km(k.data().data() + off, N, D, stride);
      Strided vm(v.data().data() + off, N, D, stride);
      Eigen::Map<RowMat> p(probs.data() + (b * heads + h) * n * n, N, N);
      p.noalias() = (qm * km.transpose()) * inv_sqrt;
      const std::size_t mh = head_masks.size() == 1 ? 0 : h;
      p += bias[mh];
      for (Eigen::Index i = 0; i < N; ++i) {
        double* row = p.row(i).data();
        const double* kept = keep[mh].row(i).data();
        const double mx = *std::max_element(row, row + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += (row[j] = kept[j] * std::exp(row[j] - mx));
        for (std::size_t j = 0; j < n; ++j) row[j] /= total;
      }
      StridedMut om(out.data() + off, N, D, stride);
      om.noalias() = p * vm;
    }
  }
  if (weights_out) *weights_out = probs;

  return detail::make_result(
      q.shape(), std::move(out), {&q, &k, &v}, "masked_attention",
      [batch, heads, n, width, dk, inv_sqrt, probs = std::move(probs)](detail::Node& self) {
        const auto N = static_cast<Eigen::Index>(n);
        const auto D = static_cast<Eigen::Index>(dk);
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));
        double* gq = detail::parent_grad(self, 0);
        double* gk = detail::parent_grad(self, 1);
        double* gv = detail::parent_grad(self, 2);
        const double* qd = self.parents[0]->data.data();
        const double* kd = self.parents[1]->data.data();
        const double* vd = self.parents[2]->data.data();
        RowMat dp(N, N), ds(N, N);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = b * n * width + h * dk;
            Eigen::Map<const RowMat> p(probs.data() + (b * heads + h) * n * n, N, N);
            Strided dout(self.grad.data() + off, N, D, stride);
            if (gv) StridedMut(gv + off, N, D, stride).noalias() += p.transpose() * dout;
            if (!gq && !gk) continue;
            dp.noalias() = dout * Strided(vd + off, N, D, stride).transpose();
            for (Eigen::Index i = 0; i < N; ++i) {
              const double dot = detail::ordered_dot(dp.row(i).data(), p.row(i).data(), n);
              ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
            }
            if (gq) StridedMut(gq + off, N, D, stride).noalias() += (ds * Strided(kd + off, N, D, stride)) * inv_sqrt;
            if (gk)
              StridedMut(gk + off, N, D, stride).noalias() +=
                  (ds.transpose() * Strided(qd + off, N, D, stride)) * inv_sqrt;
          }
        }
      });
}

/// Windowed attention of one head: row i softmax-weights the values of its allowed keys.
inline Tensor sparse_attention(const AttentionInputs& in, const AttentionPattern& pattern) {
  in.validate();
  if (pattern.n != in.q.rows()) {
    throw ShapeError("sparse_attention: pattern length " + std::to_string(pattern.n) + " does not match inputs " +
                     shape_str(in.q.shape()));
  }
  const AttentionMask mask = build_mask(pattern);
  return masked_attention(in.q, in.k, in.v, 1, 1, std::span<const AttentionMask>(&mask, 1));
}

/// Attention weights (n x n) that sparse_attention applies to V.
inline std::vector<double> sparse_attention_weights(const AttentionInputs& in, const AttentionPattern& pattern) {
  in.validate();
  const AttentionMask mask = build_mask(pattern);
  std::vector<double> w;
  NoGradGuard no_grad;
  masked_attention(in.q, in.k, in.v, 1, 1, std::span<const AttentionMask>(&mask, 1), &w);
  return w;
}

/// Full quadratic attention, composed from primitive differentiable ops.
inline Tensor dense_attention(const AttentionInputs& in) {
  in.validate();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(in.q.cols()));
  const Tensor scores = scale(matmul(in.q, transpose(in.k)), inv_sqrt);
  return matmul(softmax(scores, 1), in.v);
}

/// Depth x dilation x window.
inline constexpr std::size_t receptive_field(std::size_t layers, std::size_t dilation, std::size_t window) {
  return layers * dilation * window;
}

/// Keys visible from query `i` under `p`, computed without materializing the mask.
inline std::size_t allowed_keys(const AttentionPattern& p, std::size_t i, const std::set<std::size_t>& globals) {
  if (globals.count(i)) return p.n;
  const std::size_t steps = p.half_span();
  const std::size_t left = std::min(steps, i / p.dilation);
  const std::size_t right = std::min(steps, (p.n - 1 - i) / p.dilation);
  std::size_t count = 1 + left + right;
  for (std::size_t g : globals) {
    const std::size_t dist = g > i ? g - i : i - g;
    const bool in_window = dist % p.dilation == 0 && dist / p.dilation <= steps;
    if (!in_window) ++count;
  }
  return count;
}

/// Exact multiply-accumulate count of sparse attention for one head: each allowed
/// (query, key) pair costs d_k MACs for the score and d_k for the value combination.
inline std::uint64_t count_attention_ops(const AttentionPattern& p, std::size_t d_k) {
  p.validate();
  const std::set<std::size_t> globals(p.global_tokens.begin(), p.global_tokens.end());
  std::uint64_t pairs = 0;
  for (std::size_t i = 0; i < p.n; ++i) pairs += allowed_keys(p, i, globals);
  return pairs * 2 * d_k;
}

inline constexpr std::uint64_t count_dense_attention_ops(std::size_t n, std::size_t d_k) {
  return static_cast<std::uint64_t>(n) * n * 2 * d_k;
}

/// Keys visible from query `i`, ascending.
inline std::vector<std::size_t> allowed_key_list(const AttentionPattern& p, std::size_t i,
                                                 const std::set<std::size_t>& globals) {
  std::vector<std::size_t> keys;
  if (globals.count(i)) {
    keys.resize(p.n);
    for (std::size_t j = 0; j < p.n; ++j) keys[j] = j;
    return keys;
  }
  const std::size_t steps = p.half_span();
  const std::size_t left = std::min(steps, i / p.dilation);
  const std::size_t right = std::min(steps, (p.n - 1 - i) / p.dilation);
  for (std::size_t s = left; s > 0; --s) keys.push_back(i - s * p.dilation);
  keys.push_back(i);
  for (std::size_t s = 1; s <= right; ++s) keys.push_back(i + s * p.dilation);
  for (std::size_t g : globals)
    if (!std::binary_search(keys.begin(), keys.end(), g)) keys.insert(std::upper_bound(keys.begin(), keys.end(), g), g);
  return keys;
}

/// Inference-only windowed attention that visits allowed pairs only, so its cost
/// grows with the number of allowed pairs rather than n². Returns (n, d_k) values.
inline std::vector<double> banded_attention(const AttentionInputs& in, const AttentionPattern& pattern) {
  in.validate();
  pattern.validate();
  const std::size_t n = in.q.rows(), dk = in.q.cols();
  if (pattern.n != n) throw ShapeError("banded_attention: pattern length does not match inputs");
  const std::set<std::size_t> globals(pattern.global_tokens.begin(), pattern.global_tokens.end());
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  const double* q = in.q.data().data();
  const double* k = in.k.data().data();
  const double* v = in.v.data().data();
  std::vector<double> out(n * dk, 0.0), scores;
  for (std::size_t i = 0; i < n; ++i) {
    const auto keys = allowed_key_list(pattern, i, globals);
    scores.resize(keys.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < keys.size(); ++a) {
      double s = 0.0;
      for (std::size_t c = 0; c < dk; ++c) s += q[i * dk + c] * k[keys[a] * dk + c];
      scores[a] = s * inv_sqrt;
      mx = std::max(mx, scores[a]);
    }
    double total = 0.0;
    for (double& s : scores) total += (s = std::exp(s - mx));
    for (std::size_t a = 0; a < keys.size(); ++a) {
      const double w = scores[a] / total;
      for (std::size_t c = 0; c < dk; ++c) out[i * dk + c] += w * v[keys[a] * dk + c];
    }
  }
  return out;
}

/// Multi-head attention with per-head masks: Q/K/V projections, masked attention
/// per head, concatenation, output projection.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t width, std::size_t heads, Rng& rng) : heads_(heads) {
    if (heads == 0 || width % heads != 0) {
      throw ConfigError("model width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) +
                        " heads");
    }
    q_ = Linear(width, width, rng);
    k_ = Linear(width, width, rng);
    v_ = Linear(width, width, rng);
    o_ = Linear(width, width, rng);
  }

  std::size_t heads() const { return heads_; }
  std::size_t head_dim() const { return q_.out_features() / heads_; }

  /// x is (batch * n, width); masks are per head (or one shared).
  Tensor forward(const Tensor& x, std::size_t batch, std::span<const AttentionMask> masks) const {
    return o_(masked_attention(q_(x), k_(x), v_(x), batch, heads_, masks));
  }

  /// Same computation with unmasked attention built from primitive ops per (example, head).
  Tensor forward_dense(const Tensor& x, std::size_t batch) const {
    const Tensor q = q_(x), k = k_(x), v = v_(x);
    const std::size_t n = x.rows() / batch, dk = head_dim();
    std::vector<Tensor> rows;
    for (std::size_t b = 0; b < batch; ++b) {
      std::vector<Tensor> cols;
      for (std::size_t h = 0; h < heads_; ++h) {
        auto part = [&](const Tensor& t) { return slice_cols(slice_rows(t, b * n, n), h * dk, dk); };
        cols.push_back(dense_attention({part(q), part(k), part(v)}));
      }
      rows.push_back(concat_cols(cols));
    }
    return o_(concat_rows(rows));
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    q_.collect(prefix + ".q", out);
    k_.collect(prefix + ".k", out);
    v_.collect(prefix + ".v", out);
    o_.collect(prefix + ".o", out);
  }

  Linear& q_proj() { return q_; }
  Linear& k_proj() { return k_; }
  Linear& v_proj() { return v_; }
  Linear& out_proj() { return o_; }
  const Linear& q_proj() const { return q_; }
  const Linear& k_proj() const { return k_; }
  const Linear& v_proj() const { return v_; }
  const Linear& out_proj() const { return o_; }

  static std::size_t param_count(std::size_t width) { return 4 * (width * width + width); }

 private:
  std::size_t heads_ = 1;
  Linear q_, k_, v_, o_;
};

/// Multi-head sparse attention of x with one pattern per head.
inline Tensor multi_head_sparse_attention(const Tensor& x, const MultiHeadAttention& mha,
                                          std::span<const AttentionPattern> patterns, std::size_t batch = 1) {
  if (patterns.size() != mha.heads() && patterns.size() != 1) {
    throw ConfigError("expected " + std::to_string(mha.heads()) + " head patterns, got " +
                      std::to_string(patterns.size()));
  }
  std::vector<AttentionMask> masks;
  for (const auto& p : patterns) masks.push_back(build_mask(p));
  return mha.forward(x, batch, masks);
}

}  // namespace sadq
