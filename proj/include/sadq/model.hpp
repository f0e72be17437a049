// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sadq/attention.hpp"
#include "sadq/diffusion.hpp"
#include "sadq/moe.hpp"
#include "sadq/numeric/checkpoint.hpp"
#include "sadq/numeric/nn.hpp"

namespace sadq {

enum class GlobalPolicy { kNone, kSourceStart };

inline std::string to_string(GlobalPolicy p) { return p == GlobalPolicy::kNone ? "none" : "source_start"; }
inline GlobalPolicy global_policy_from(const std::string& s) {
  if (s == "none") return GlobalPolicy::kNone;
  if (s == "source_start") return GlobalPolicy::kSourceStart;
  throw ConfigError("model.global_tokens: unknown policy '" + s + "' (expected none | source_start)");
}

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t width = 128;
  std::size_t embed_dim = 32;
  std::size_t ffn_hidden = 256;
  std::size_t window = 16;
  std::size_t dilation = 1;
  std::vector<std::size_t> head_dilations;  // empty: `dilation` for every head
  GlobalPolicy global_tokens = GlobalPolicy::kSourceStart;
  std::size_t experts = 4;
  std::size_t top_k = 2;
  bool use_moe = true;
  bool sparse = true;
  std::size_t vocab = 18;
  std::size_t diffusion_steps = 256;
  std::size_t max_len = 128;
  double lambda_abs = 0.1;
  double lambda_reg = 1e-3;
  double anchor_coef = 1.0;
  double moe_aux_coef = 0.0;
  std::uint64_t seed = 1;

  std::size_t head_dim() const { return width / heads; }

  std::size_t head_dilation(std::size_t h) const { return head_dilations.empty() ? dilation : head_dilations.at(h); }

  void validate() const {
    auto positive = [](std::size_t v, const char* field) {
      if (v == 0) throw ConfigError(std::string("model.") + field + " must be positive");
    };
    positive(heads, "heads");
    positive(width, "width");
    positive(embed_dim, "embed_dim");
    positive(ffn_hidden, "ffn_hidden");
    positive(window, "window");
    positive(dilation, "dilation");
    positive(experts, "experts");
    positive(vocab, "vocab");
    positive(diffusion_steps, "diffusion_steps");
    positive(max_len, "max_len");
    if (width % heads != 0) {
      throw ConfigError("model.width " + std::to_string(width) + " is not divisible by model.heads " + std::to_string(heads));
    }
    if (window > max_len) throw ConfigError("model.window must not exceed model.max_len");
    if (!head_dilations.empty() && head_dilations.size() != heads) {
      throw ConfigError("model.head_dilations must list one dilation per head");
    }
    for (std::size_t d : head_dilations)
      if (d == 0) throw ConfigError("model.head_dilations entries must be positive");
    if (use_moe) validate_top_k(top_k, experts);
    if (!(lambda_abs >= 0.0 && lambda_abs <= 1.0)) throw ConfigError("model.lambda_abs must lie in [0, 1]");
    if (lambda_reg < 0.0) throw ConfigError("model.lambda_reg must be non-negative");
    if (anchor_coef < 0.0) throw ConfigError("model.anchor_coef must be non-negative");
    if (moe_aux_coef < 0.0) throw ConfigError("model.moe_aux_coef must be non-negative");
  }
};

/// Sinusoidal features of a (possibly fractional) value.
inline void sinusoid(double value, std::span<double> out) {
  const std::size_t half = out.size() / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(half, 1)));
    out[2 * i] = std::sin(value * freq);
    out[2 * i + 1] = std::cos(value * freq);
  }
  if (out.size() % 2) out.back() = 0.0;
}

/// Records routing on the first pass and replays it afterwards (for gradient checks).
struct RoutingTrace {
  bool replay = false;
  std::vector<std::vector<RoutingDecision>> layers;
};

struct ForwardExtras {
  RoutingTrace* trace = nullptr;
  Tensor aux_loss;                           // Σ over layers, when the coefficient is non-zero
  std::vector<LoadBalanceStats> layer_stats;
};

struct TransformerBlock {
  LayerNorm attn_norm;
  MultiHeadAttention attn;
  LayerNorm ffn_norm;
  GatingNetwork gate;
  ExpertSet experts;  // a single entry serves as the plain FFN when MoE is disabled
};

/// Embedding + timestep conditioning + pre-norm sparse-attention/MoE blocks + output projection.
/// forward() maps noised latents (batch * n, embed_dim) to ẑ_0 predictions of the same shape.
class SADiffuSeqModel {
 public:
  explicit SADiffuSeqModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    table_ = EmbeddingTable(cfg_.vocab, cfg_.embed_dim, rng);
    in_proj_ = Linear(cfg_.embed_dim, cfg_.width, rng);
    pos_embed_ = make_param({cfg_.max_len, cfg_.width}, rng, 0.02);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      TransformerBlock b;
      b.attn_norm = LayerNorm(cfg_.width);
      b.attn = MultiHeadAttention(cfg_.width, cfg_.heads, rng);
      b.ffn_norm = LayerNorm(cfg_.width);
      const std::size_t e = cfg_.use_moe ? cfg_.experts : 1;
      if (cfg_.use_moe) b.gate = GatingNetwork(e, cfg_.width, rng);
      for (std::size_t i = 0; i < e; ++i) b.experts.emplace_back(cfg_.width, cfg_.ffn_hidden, rng);
      blocks_.push_back(std::move(b));
    }
    out_norm_ = LayerNorm(cfg_.width);
    out_proj_ = Linear(cfg_.width, cfg_.embed_dim, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const EmbeddingTable& table() const { return table_; }
  EmbeddingTable& table() { return table_; }
  std::vector<TransformerBlock>& blocks() { return blocks_; }

  /// Changes the attention window (staged training); parameters are unaffected.
  void set_window(std::size_t window) {
    ModelConfig next = cfg_;
    next.window = window;
    next.validate();
    cfg_ = next;
  }

  /// Per-head patterns for a sequence of length n.
  std::vector<AttentionPattern> patterns(std::size_t n) const {
    std::vector<AttentionPattern> out;
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      AttentionPattern p;
      p.n = n;
      p.window = cfg_.window;
      p.dilation = cfg_.head_dilation(h);
      if (cfg_.global_tokens == GlobalPolicy::kSourceStart) p.global_tokens = {0};
      out.push_back(p);
    }
    return out;
  }

  /// Rows flagged in `pad` (one entry per row, empty means none) have their latent
  /// replaced by zeros, so padding content never reaches the network.
  Tensor forward(const Tensor& zt, std::span<const double> row_times, std::size_t batch,
                 std::span<const std::uint8_t> pad = {}, ForwardExtras* extras = nullptr) const {
    if (zt.rank() != 2 || zt.cols() != cfg_.embed_dim || batch == 0 || zt.rows() % batch != 0) {
      throw ShapeError("model forward: latent " + shape_str(zt.shape()) + " incompatible with embed_dim " +
                       std::to_string(cfg_.embed_dim) + " and batch " + std::to_string(batch));
    }
    const std::size_t n = zt.rows() / batch;
    if (n > cfg_.max_len) {
      throw ShapeError("model forward: sequence length " + std::to_string(n) + " exceeds max_len " +
                       std::to_string(cfg_.max_len));
    }
    if (row_times.size() != zt.rows()) throw ShapeError("model forward: one timestep per row required");
    if (!pad.empty() && pad.size() != zt.rows()) throw ShapeError("model forward: padding mask needs one entry per row");

    std::vector<double> cond(zt.rows() * cfg_.width);
    for (std::size_t r = 0; r < zt.rows(); ++r) {
      const double tau = row_times[r];
      if (!(tau >= 0.0 && tau <= static_cast<double>(cfg_.diffusion_steps))) {
        throw ShapeError("model forward: timestep " + std::to_string(tau) + " outside [0, T]");
      }
      sinusoid(tau, std::span<double>(cond.data() + r * cfg_.width, cfg_.width));
    }
    std::vector<std::size_t> positions(zt.rows());
    for (std::size_t r = 0; r < zt.rows(); ++r) positions[r] = r % n;

    const Tensor z_in = pad.empty() ? zt : replace_rows(zt, Tensor::zeros({cfg_.embed_dim}), pad);
    Tensor h = add(add(in_proj_(z_in), gather_rows(pos_embed_, positions)), Tensor({zt.rows(), cfg_.width}, std::move(cond)));

    std::vector<AttentionMask> masks;
    if (cfg_.sparse)
      for (const auto& p : patterns(n)) masks.push_back(build_mask(p));

    if (extras && extras->trace && !extras->trace->replay) extras->trace->layers.clear();
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const auto& b = blocks_[l];
      const Tensor a_in = b.attn_norm(h);
      h = add(h, cfg_.sparse ? b.attn.forward(a_in, batch, masks) : b.attn.forward_dense(a_in, batch));
      const Tensor f_in = b.ffn_norm(h);
      if (!cfg_.use_moe) {
        h = add(h, b.experts.front()(f_in));
        continue;
      }
      const std::vector<RoutingDecision>* fixed = nullptr;
      if (extras && extras->trace && extras->trace->replay) fixed = &extras->trace->layers.at(l);
      MoeOutput moe = moe_forward_batch(f_in, b.experts, b.gate, cfg_.top_k, fixed);
      h = add(h, moe.output);
      if (extras) {
        if (cfg_.moe_aux_coef > 0.0) {
          const Tensor aux = load_balance_loss(moe);
          extras->aux_loss = extras->aux_loss.defined() ? add(extras->aux_loss, aux) : aux;
        }
        extras->layer_stats.push_back(load_balance_stats(moe.decisions));
        if (extras->trace && !extras->trace->replay) extras->trace->layers.push_back(std::move(moe.decisions));
      }
    }
    return out_proj_(out_norm_(h));
  }

  /// Adapter to the diffusion-layer denoiser interface for a fixed batch size.
  Denoiser denoiser(std::size_t batch, std::vector<std::uint8_t> pad = {}, ForwardExtras* extras = nullptr) const {
    return [this, batch, pad = std::move(pad), extras](const Tensor& z, std::span<const double> t) {
      return forward(z, t, batch, pad, extras);
    };
  }

  NamedParams named_parameters() const {
    NamedParams out;
    out.emplace_back("embedding.table", table_.weight());
    in_proj_.collect("input_proj", out);
    out.emplace_back("position.table", pos_embed_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const auto& b = blocks_[l];
      const std::string p = "blocks." + std::to_string(l);
      b.attn_norm.collect(p + ".attn_norm", out);
      b.attn.collect(p + ".attn", out);
      b.ffn_norm.collect(p + ".ffn_norm", out);
      if (cfg_.use_moe) {
        out.emplace_back(p + ".moe.gate", b.gate.weight);
        for (std::size_t e = 0; e < b.experts.size(); ++e) b.experts[e].collect(p + ".moe.expert" + std::to_string(e), out);
      } else {
        b.experts.front().collect(p + ".ffn", out);
      }
    }
    out_norm_.collect("output_norm", out);
    out_proj_.collect("output_proj", out);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  NamedTensors state() const {
    NamedTensors out;
    for (const auto& [name, t] : named_parameters()) out.emplace(name, t);
    return out;
  }

  /// Copies values from `state` into the parameters; every parameter must be present with its shape.
  void load_state(const NamedTensors& state) {
    std::ostringstream problems;
    const auto params = named_parameters();
    for (const auto& [name, t] : params) {
      auto it = state.find(name);
      if (it == state.end()) {
        problems << "\n  missing " << name << " " << shape_str(t.shape());
      } else if (it->second.shape() != t.shape()) {
        problems << "\n  " << name << ": checkpoint " << shape_str(it->second.shape()) << " vs model " << shape_str(t.shape());
      }
    }
    for (const auto& [name, t] : state) {
      if (name.rfind("meta.", 0) == 0) continue;
      bool known = false;
      for (const auto& p : params) known = known || p.first == name;
      if (!known) problems << "\n  unexpected " << name << " " << shape_str(t.shape());
    }
    if (!problems.str().empty()) throw FormatError("checkpoint does not match model config:" + problems.str());
    for (auto& [name, t] : params) {
      Tensor dst = t;
      const auto src = state.at(name).data();
      std::copy(src.begin(), src.end(), dst.data().begin());
    }
  }

 private:
  ModelConfig cfg_;
  EmbeddingTable table_;
  Linear in_proj_;
  Tensor pos_embed_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm out_norm_;
  Linear out_proj_;
};

/// Closed-form parameter count of a model built from `cfg`.
inline std::size_t param_count(const ModelConfig& cfg) {
  const std::size_t w = cfg.width, e = cfg.embed_dim;
  std::size_t total = (cfg.vocab + 1) * e;  // token table incl. absorbing row
  total += e * w + w;                       // input projection
  total += cfg.max_len * w;                 // positions
  const std::size_t experts = cfg.use_moe ? cfg.experts : 1;
  const std::size_t per_layer = 4 * w + MultiHeadAttention::param_count(w) + (cfg.use_moe ? cfg.experts * w : 0) +
                                experts * Expert::param_count(w, cfg.ffn_hidden);
  total += cfg.layers * per_layer;
  total += 2 * w;      // output norm
  total += w * e + e;  // output projection
  return total;
}

}  // namespace sadq
