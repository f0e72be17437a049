// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sadq/model.hpp"
#include "sadq/numeric/checkpoint.hpp"
#include "sadq/sampler.hpp"
#include "sadq/tasks.hpp"

namespace sadq {

struct OptimConfig {
  double lr = 1e-3;
  std::size_t warmup = 100;
  std::size_t steps = 3000;
  std::size_t batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global norm; 0 disables
  std::size_t log_every = 10;
  std::size_t checkpoint_every = 500;  // 0: final checkpoint only
};

/// One training stage. `max_source_len` 0 means the task's own maximum.
struct StageConfig {
  std::size_t steps = 0;
  std::size_t window = 0;
  std::size_t max_source_len = 0;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";
  ModelConfig model;
  SyntheticTask task;
  OptimConfig optim;
  SamplerConfig sampler;
  std::vector<StageConfig> stages;  // empty: one stage of optim.steps at model.window

  /// Stage list with the implicit single stage filled in.
  std::vector<StageConfig> resolved_stages() const {
    if (!stages.empty()) return stages;
    return {StageConfig{optim.steps, model.window, task.max_len}};
  }

  std::size_t total_steps() const {
    std::size_t n = 0;
    for (const auto& s : resolved_stages()) n += s.steps;
    return n;
  }

  void validate() const {
    model.validate();
    task.validate(model.max_len);
    if (model.vocab != task.vocab_size()) {
      throw ConfigError("model.vocab " + std::to_string(model.vocab) + " does not match task vocabulary " +
                        std::to_string(task.vocab_size()) + " (task.symbols + 2)");
    }
    if (!(optim.lr > 0.0)) throw ConfigError("optim.lr must be positive");
    if (optim.batch_size == 0) throw ConfigError("optim.batch_size must be positive");
    if (optim.batch_size > task.train) throw ConfigError("optim.batch_size exceeds task.train");
    if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0)) throw ConfigError("optim.beta1 must lie in [0, 1)");
    if (!(optim.beta2 >= 0.0 && optim.beta2 < 1.0)) throw ConfigError("optim.beta2 must lie in [0, 1)");
    if (!(optim.eps > 0.0)) throw ConfigError("optim.eps must be positive");
    if (optim.grad_clip < 0.0) throw ConfigError("optim.grad_clip must be non-negative");
    if (optim.log_every == 0) throw ConfigError("optim.log_every must be positive");
    if (diffusion_min_step() > model.diffusion_steps) throw ConfigError("model.diffusion_steps must be >= 2");
    (void)sampler.resolved_times(model.diffusion_steps);
    if (sampler.batch_size == 0) throw ConfigError("sampler.batch_size must be positive");
    std::size_t prev_window = 0, prev_len = 0;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      const std::string at = "stages[" + std::to_string(i) + "]";
      if (s.steps == 0) throw ConfigError(at + ".steps must be positive");
      if (s.window == 0 || s.window > model.max_len) throw ConfigError(at + ".window must lie in [1, model.max_len]");
      const std::size_t len = s.max_source_len == 0 ? task.max_len : s.max_source_len;
      if (len < task.min_len || len > task.max_len) throw ConfigError(at + ".max_source_len must lie in [task.min_len, task.max_len]");
      if (s.window < prev_window || len < prev_len) throw ConfigError(at + ": stages must not shrink window or length");
      prev_window = s.window;
      prev_len = len;
    }
    if (!stages.empty() && stages.back().window != model.window) {
      throw ConfigError("stages: the last stage window must equal model.window");
    }
    if (total_steps() == 0) throw ConfigError("optim.steps must be positive");
  }

  static constexpr std::size_t diffusion_min_step() { return 2; }
};

namespace detail {

using json = nlohmann::json;

/// Reads fields from one JSON object, rejecting unknown keys and wrong types.
class FieldReader {
 public:
  FieldReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where("") + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_unsigned()) throw ConfigError("");
      }
      out = it->template get<T>();
    } catch (const std::exception&) {
      throw ConfigError(where(key) + ": expected " + type_name<T>() + ", got " + it->dump());
    }
  }

  void get(const char* key, std::vector<std::size_t>& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    if (!it->is_array()) throw ConfigError(where(key) + ": expected a list of non-negative integers");
    out.clear();
    for (const auto& v : *it) {
      if (!v.is_number_unsigned()) throw ConfigError(where(key) + ": expected a list of non-negative integers");
      out.push_back(v.get<std::size_t>());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown config field '" + where(it.key().c_str()) + "'");
  }

  std::string where(const char* key) const {
    if (path_.empty()) return key;
    return *key ? path_ + "." + key : path_;
  }

 private:
  template <typename T>
  static const char* type_name() {
    if constexpr (std::is_same_v<T, bool>) return "true/false";
    else if constexpr (std::is_same_v<T, std::string>) return "a string";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else return "a non-negative integer";
  }

  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  using nlohmann::json;
  const auto& m = c.model;
  json model = {{"layers", m.layers},
                {"heads", m.heads},
                {"width", m.width},
                {"embed_dim", m.embed_dim},
                {"ffn_hidden", m.ffn_hidden},
                {"window", m.window},
                {"dilation", m.dilation},
                {"head_dilations", m.head_dilations},
                {"global_tokens", to_string(m.global_tokens)},
                {"experts", m.experts},
                {"top_k", m.top_k},
                {"use_moe", m.use_moe},
                {"sparse", m.sparse},
                {"vocab", m.vocab},
                {"diffusion_steps", m.diffusion_steps},
                {"max_len", m.max_len},
                {"lambda_abs", m.lambda_abs},
                {"lambda_reg", m.lambda_reg},
                {"anchor_coef", m.anchor_coef},
                {"moe_aux_coef", m.moe_aux_coef},
                {"seed", m.seed}};
  const auto& t = c.task;
  json task = {{"kind", to_string(t.kind)}, {"symbols", t.symbols}, {"min_len", t.min_len}, {"max_len", t.max_len},
               {"seed", t.seed},           {"train", t.train},     {"valid", t.valid},     {"test", t.test}};
  const auto& o = c.optim;
  json optim = {{"lr", o.lr},           {"warmup", o.warmup},       {"steps", o.steps},
                {"batch_size", o.batch_size}, {"beta1", o.beta1}, {"beta2", o.beta2},
                {"eps", o.eps},         {"grad_clip", o.grad_clip}, {"log_every", o.log_every},
                {"checkpoint_every", o.checkpoint_every}};
  const auto& s = c.sampler;
  json sampler = {{"steps", s.num_steps}, {"times", s.times}, {"seed", s.seed}, {"clamp", s.clamp}, {"batch_size", s.batch_size}};
  json stages = json::array();
  for (const auto& st : c.stages) {
    stages.push_back({{"steps", st.steps}, {"window", st.window}, {"max_source_len", st.max_source_len}});
  }
  return {{"seed", c.seed}, {"out_dir", c.out_dir}, {"model", model}, {"task", task},
          {"optim", optim}, {"sampler", sampler},   {"stages", stages}};
}

/// Parses a config; absent fields keep their defaults and `model.vocab` defaults to
/// the task vocabulary. Unknown fields and wrongly typed values are errors.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::FieldReader root(j, "");
  root.get("seed", c.seed);
  root.get("out_dir", c.out_dir);
  bool vocab_given = false;
  if (const auto* node = root.child("task")) {
    detail::FieldReader r(*node, "task");
    std::string kind = to_string(c.task.kind);
    r.get("kind", kind);
    c.task.kind = task_kind_from(kind);
    r.get("symbols", c.task.symbols);
    r.get("min_len", c.task.min_len);
    r.get("max_len", c.task.max_len);
    r.get("seed", c.task.seed);
    r.get("train", c.task.train);
    r.get("valid", c.task.valid);
    r.get("test", c.task.test);
    r.finish();
  }
  if (const auto* node = root.child("model")) {
    detail::FieldReader r(*node, "model");
    auto& m = c.model;
    r.get("layers", m.layers);
    r.get("heads", m.heads);
    r.get("width", m.width);
    r.get("embed_dim", m.embed_dim);
    r.get("ffn_hidden", m.ffn_hidden);
    r.get("window", m.window);
    r.get("dilation", m.dilation);
    r.get("head_dilations", m.head_dilations);
    std::string policy = to_string(m.global_tokens);
    r.get("global_tokens", policy);
    m.global_tokens = global_policy_from(policy);
    r.get("experts", m.experts);
    r.get("top_k", m.top_k);
    r.get("use_moe", m.use_moe);
    r.get("sparse", m.sparse);
    vocab_given = node->contains("vocab");
    r.get("vocab", m.vocab);
    r.get("diffusion_steps", m.diffusion_steps);
    r.get("max_len", m.max_len);
    r.get("lambda_abs", m.lambda_abs);
    r.get("lambda_reg", m.lambda_reg);
    r.get("anchor_coef", m.anchor_coef);
    r.get("moe_aux_coef", m.moe_aux_coef);
    r.get("seed", m.seed);
    r.finish();
  }
  if (!vocab_given) c.model.vocab = c.task.vocab_size();
  if (const auto* node = root.child("optim")) {
    detail::FieldReader r(*node, "optim");
    auto& o = c.optim;
    r.get("lr", o.lr);
    r.get("warmup", o.warmup);
    r.get("steps", o.steps);
    r.get("batch_size", o.batch_size);
    r.get("beta1", o.beta1);
    r.get("beta2", o.beta2);
    r.get("eps", o.eps);
    r.get("grad_clip", o.grad_clip);
    r.get("log_every", o.log_every);
    r.get("checkpoint_every", o.checkpoint_every);
    r.finish();
  }
  if (const auto* node = root.child("sampler")) {
    detail::FieldReader r(*node, "sampler");
    auto& s = c.sampler;
    r.get("steps", s.num_steps);
    r.get("times", s.times);
    r.get("seed", s.seed);
    r.get("clamp", s.clamp);
    r.get("batch_size", s.batch_size);
    r.finish();
  }
  if (const auto* node = root.child("stages")) {
    if (!node->is_array()) throw ConfigError("stages: expected a list of stage objects");
    for (std::size_t i = 0; i < node->size(); ++i) {
      detail::FieldReader r((*node)[i], "stages[" + std::to_string(i) + "]");
      StageConfig st;
      r.get("steps", st.steps);
      r.get("window", st.window);
      r.get("max_source_len", st.max_source_len);
      r.finish();
      c.stages.push_back(st);
    }
  }
  root.finish();
  c.validate();
  return c;
}

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

inline std::string dump_run_config(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

/// FNV-1a over the canonical form of everything that shapes the trained weights
/// (sampler settings and the output directory are excluded).
inline std::uint64_t config_hash(const RunConfig& c) {
  auto j = to_json(c);
  j.erase("sampler");
  j.erase("out_dir");
  const std::string canon = j.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : canon) h = (h ^ ch) * 1099511628211ull;
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline constexpr const char* kConfigHashKey = "meta.config_hash";

/// Stores a 64-bit value exactly as four 16-bit chunks.
inline void put_hash(NamedTensors& state, std::uint64_t h) {
  std::vector<double> parts(4);
  for (std::size_t i = 0; i < 4; ++i) parts[i] = static_cast<double>((h >> (16 * i)) & 0xffffu);
  state[kConfigHashKey] = Tensor({4}, std::move(parts));
}

inline std::uint64_t get_hash(const NamedTensors& state) {
  const auto it = state.find(kConfigHashKey);
  if (it == state.end() || it->second.numel() != 4) throw FormatError("checkpoint carries no config hash");
  std::uint64_t h = 0;
  for (std::size_t i = 0; i < 4; ++i) h |= static_cast<std::uint64_t>(it->second.data()[i]) << (16 * i);
  return h;
}

}  // namespace sadq
