// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sadq/attention.hpp"
#include "sadq/config.hpp"
#include "sadq/eval.hpp"
#include "sadq/model.hpp"
#include "sadq/numeric/checkpoint.hpp"
#include "sadq/sampler.hpp"
#include "sadq/tasks.hpp"
#include "sadq/train.hpp"

namespace sadq {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

inline constexpr const char* kCheckpointFile = "checkpoint.sadq";
inline constexpr const char* kConfigFile = "config.json";
inline constexpr const char* kTrainLogFile = "train.log";

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot write " + path.string());
    f << text;
    if (!f) throw FormatError("failed writing " + path.string());
  }
  fs::rename(tmp, path);
}

inline void save_run_checkpoint(const fs::path& path, const SADiffuSeqModel& model, const RunConfig& cfg) {
  NamedTensors state = model.state();
  put_hash(state, config_hash(cfg));
  save_checkpoint(path, state);
}

struct LoadedRun {
  RunConfig config;
  SADiffuSeqModel model;
};

/// Loads a checkpoint together with its config (the sidecar next to it unless given).
/// Refuses to proceed when the embedded config hash differs.
inline LoadedRun load_run(const fs::path& checkpoint, const std::optional<fs::path>& config_path = std::nullopt) {
  const fs::path cfg_path = config_path ? *config_path : checkpoint.parent_path() / kConfigFile;
  RunConfig cfg = load_run_config(cfg_path);
  const NamedTensors state = load_checkpoint(checkpoint);
  const std::uint64_t stored = get_hash(state), expected = config_hash(cfg);
  if (stored != expected) {
    throw FormatError("checkpoint " + checkpoint.string() + " was trained with config hash " + hash_hex(stored) +
                      " but " + cfg_path.string() + " hashes to " + hash_hex(expected) + "; refusing to run");
  }
  SADiffuSeqModel model(cfg.model);
  model.load_state(state);
  return {std::move(cfg), std::move(model)};
}

struct TrainSummary {
  std::size_t steps = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  fs::path checkpoint;
  std::vector<StepRecord> history;
};

/// Trains `cfg` into cfg.out_dir: sidecar config, corpus splits, log and checkpoint.
inline TrainSummary train_run(const RunConfig& cfg, SADiffuSeqModel* trained = nullptr) {
  cfg.validate();
  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  write_text(dir / kConfigFile, dump_run_config(cfg));
  const Corpus corpus = generate_corpus(cfg.task);
  write_corpus(dir / "train.tsv", corpus.train);
  write_corpus(dir / "valid.tsv", corpus.valid);
  write_corpus(dir / "test.tsv", corpus.test);

  SADiffuSeqModel model(cfg.model);
  std::ofstream log(dir / kTrainLogFile, std::ios::binary | std::ios::trunc);
  if (!log) throw FormatError("cannot write " + (dir / kTrainLogFile).string());
  TrainHooks hooks;
  hooks.log = &log;
  hooks.checkpoint = [&](std::size_t) { save_run_checkpoint(dir / kCheckpointFile, model, cfg); };
  const TrainResult res = train(model, cfg, corpus, hooks);
  TrainSummary s;
  s.steps = res.history.size();
  s.initial_loss = res.history.front().loss;
  s.final_loss = res.history.back().loss;
  s.checkpoint = dir / kCheckpointFile;
  s.history = res.history;
  if (trained) *trained = model;
  return s;
}

inline std::vector<TokenSeq> sources_of(std::span<const Example> examples) {
  std::vector<TokenSeq> out;
  for (const auto& e : examples) out.push_back(e.source);
  return out;
}

inline std::vector<TokenSeq> targets_of(std::span<const Example> examples) {
  std::vector<TokenSeq> out;
  for (const auto& e : examples) out.push_back(e.target);
  return out;
}

inline std::string format_sequences(std::span<const TokenSeq> seqs) {
  std::string out;
  for (const auto& s : seqs) out += join_ids(s) + '\n';
  return out;
}

inline std::vector<TokenSeq> generate(const LoadedRun& run, std::span<const TokenSeq> sources, const SamplerConfig& sc) {
  return sample(run.model, sources, sc, sqrt_schedule(run.config.model.diffusion_steps), SequenceLayout{run.config.task.max_len});
}

// ---------------------------------------------------------------------------
// bench

struct BenchRow {
  std::size_t n = 0;
  std::uint64_t sparse_macs = 0;
  std::uint64_t dense_macs = 0;
  double sparse_seconds = 0.0;
  double dense_seconds = 0.0;
};

struct BenchOptions {
  std::vector<std::size_t> sizes{256, 512, 1024, 2048};
  std::size_t window = 64;
  std::size_t dilation = 1;
  std::size_t d_k = 16;
  std::size_t reps = 5;
  std::size_t globals = 0;  // leading positions with global attention
  bool timing = true;
};

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline std::vector<BenchRow> run_bench(const BenchOptions& o) {
  if (o.sizes.empty()) throw ConfigError("bench: --sizes is empty");
  for (std::size_t i = 0; i < o.sizes.size(); ++i) {
    if (o.sizes[i] == 0) throw ConfigError("bench: sizes must be positive");
    if (i > 0 && o.sizes[i] <= o.sizes[i - 1]) throw ConfigError("bench: --sizes must be strictly ascending");
  }
  if (o.d_k == 0) throw ConfigError("bench: --dk must be positive");
  if (o.timing && o.reps < 5) throw ConfigError("bench: --reps must be at least 5");
  std::vector<BenchRow> rows;
  Rng rng(0);
  for (std::size_t n : o.sizes) {
    AttentionPattern p{n, o.window, o.dilation, {}};
    for (std::size_t g = 0; g < std::min(o.globals, n); ++g) p.global_tokens.push_back(g);
    BenchRow r;
    r.n = n;
    r.sparse_macs = count_attention_ops(p, o.d_k);
    r.dense_macs = count_dense_attention_ops(n, o.d_k);
    if (o.timing) {
      NoGradGuard no_grad;
      const AttentionInputs in{randn({n, o.d_k}, rng), randn({n, o.d_k}, rng), randn({n, o.d_k}, rng)};
      std::vector<double> ts, td;
      for (std::size_t k = 0; k < o.reps; ++k) {
        auto t0 = std::chrono::steady_clock::now();
        const auto y = banded_attention(in, p);
        auto t1 = std::chrono::steady_clock::now();
        const Tensor d = dense_attention(in);
        auto t2 = std::chrono::steady_clock::now();
        ts.push_back(std::chrono::duration<double>(t1 - t0).count() + 0.0 * y.front());
        td.push_back(std::chrono::duration<double>(t2 - t1).count() + 0.0 * d.data().front());
      }
      r.sparse_seconds = median(ts);
      r.dense_seconds = median(td);
    }
    rows.push_back(r);
  }
  return rows;
}

inline std::string format_bench(const BenchOptions& o, const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "# bench window=" << o.window << " dilation=" << o.dilation << " d_k=" << o.d_k << " globals=" << o.globals
     << " reps=" << o.reps << '\n';
  os << "n\tsparse_macs\tdense_macs\tsparse_seconds\tdense_seconds\n";
  char buf[64];
  for (const auto& r : rows) {
    os << r.n << '\t' << r.sparse_macs << '\t' << r.dense_macs << '\t';
    std::snprintf(buf, sizeof buf, "%.6e\t%.6e", r.sparse_seconds, r.dense_seconds);
    os << buf << '\n';
  }
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::snprintf(buf, sizeof buf, "sparse=%.6f dense=%.6f",
                  static_cast<double>(rows[i].sparse_macs) / static_cast<double>(rows[i - 1].sparse_macs),
                  static_cast<double>(rows[i].dense_macs) / static_cast<double>(rows[i - 1].dense_macs));
    os << "# ratio " << rows[i - 1].n << "->" << rows[i].n << ' ' << buf << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// ablate

struct AblationRow {
  std::string variant;
  std::string full_scale_value;
  std::string desk_value;
  double final_loss = 0.0;
  double token_accuracy = 0.0;
  double bleu = 0.0;
  double rouge_l = 0.0;
  std::uint64_t attn_macs = 0;
};

/// Exact attention MACs of one head at the model's maximum length.
inline std::uint64_t model_attention_macs(const ModelConfig& m) {
  if (!m.sparse) return count_dense_attention_ops(m.max_len, m.head_dim());
  AttentionPattern p{m.max_len, m.window, m.dilation, {}};
  if (m.global_tokens == GlobalPolicy::kSourceStart) p.global_tokens = {0};
  return count_attention_ops(p, m.head_dim());
}

struct AblationVariant {
  std::string name;
  std::string full_scale_value;
  std::string desk_value;
  RunConfig config;
};

inline std::vector<AblationVariant> ablation_variants(const RunConfig& base, const std::string& axis) {
  RunConfig b = base;
  b.stages.clear();
  std::vector<AblationVariant> out;
  if (axis == "sparse_attention") {
    out.push_back({"base", "sparse", "sparse", b});
    RunConfig d = b;
    d.model.sparse = false;
    out.push_back({"dense_attention", "dense", "dense", d});
  } else if (axis == "diffusion_steps") {
    out.push_back({"base", "-", std::to_string(b.model.diffusion_steps), b});
    const std::pair<std::size_t, std::size_t> map[] = {{1024, 64}, {2048, 256}, {4096, 1024}};
    for (auto [full, desk] : map) {
      RunConfig v = b;
      v.model.diffusion_steps = desk;
      v.sampler.num_steps = std::min(v.sampler.num_steps, desk);
      v.sampler.times.clear();
      out.push_back({"T_" + std::to_string(full), std::to_string(full), std::to_string(desk), v});
    }
  } else if (axis == "window_size") {
    out.push_back({"base", "-", std::to_string(b.model.window), b});
    const std::pair<std::size_t, std::size_t> map[] = {{256, 8}, {512, 16}, {1024, 32}};
    for (auto [full, desk] : map) {
      RunConfig v = b;
      v.model.window = desk;
      out.push_back({"window_" + std::to_string(full), std::to_string(full), std::to_string(desk), v});
    }
  } else {
    throw ConfigError("ablate: unknown axis '" + axis + "' (expected sparse_attention | diffusion_steps | window_size)");
  }
  for (auto& v : out) {
    v.config.out_dir = (fs::path(base.out_dir) / v.name).string();
    v.config.validate();
  }
  return out;
}

inline AblationRow run_ablation_variant(const AblationVariant& v) {
  SADiffuSeqModel model(v.config.model);
  const TrainSummary s = train_run(v.config, &model);
  const Corpus corpus = generate_corpus(v.config.task);
  const LoadedRun run{v.config, model};
  const auto gen = generate(run, sources_of(corpus.test), v.config.sampler);
  const auto ref = targets_of(corpus.test);
  AblationRow r;
  r.variant = v.name;
  r.full_scale_value = v.full_scale_value;
  r.desk_value = v.desk_value;
  r.final_loss = s.final_loss;
  r.token_accuracy = token_accuracy(gen, ref);
  r.bleu = bleu(gen, ref);
  r.rouge_l = rouge_l(gen, ref);
  r.attn_macs = model_attention_macs(v.config.model);
  return r;
}

inline std::string format_ablation(const std::string& axis, const RunConfig& base, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "# ablate axis=" << axis << " seed=" << base.seed << " model_seed=" << base.model.seed
     << " steps=" << base.optim.steps << '\n';
  os << "variant\tfull_scale_value\tdesk_value\tfinal_loss\ttoken_accuracy\tbleu\trouge_l\tattn_macs\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6f\t%.6f\t%.6f\t%.6f", r.final_loss, r.token_accuracy, r.bleu, r.rouge_l);
    os << r.variant << '\t' << r.full_scale_value << '\t' << r.desk_value << '\t' << buf << '\t' << r.attn_macs << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// entry point

inline std::vector<std::size_t> parse_size_list(const std::string& text, const char* flag) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &pos);
    } catch (const std::exception&) {
      pos = std::string::npos;
    }
    if (pos != item.size() || item.empty() || item[0] == '-') {
      throw ConfigError(std::string(flag) + ": '" + item + "' is not a positive integer");
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

/// Runs one command line (without the program name). Returns the process exit code.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse-attention mixture-of-experts diffusion for sequence-to-sequence generation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_path, out_path, checkpoint_path, source_path, generated_path, reference_path, train_corpus_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  bool clamp = false;
  std::string sizes = "256,512,1024,2048", axis;
  BenchOptions bench;

  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  train_cmd->add_option("--config", config_path, "Run config (JSON)")->required();
  train_cmd->add_option("--seed", seed, "Override the run and model seeds");
  train_cmd->add_option("--steps", steps, "Override optim.steps (single-stage configs only)");
  train_cmd->add_option("--out", out_path, "Override the output directory");

  auto* sample_cmd = app.add_subcommand("sample", "Generate one target per source line");
  sample_cmd->add_option("--checkpoint", checkpoint_path, "Trained checkpoint")->required();
  sample_cmd->add_option("--config", config_path, "Config (default: config.json beside the checkpoint)");
  sample_cmd->add_option("--source", source_path, "Source ids, one sequence per line")->required();
  sample_cmd->add_option("--out", out_path, "Output file (default: stdout)");
  sample_cmd->add_option("--seed", seed, "Override sampler.seed");
  sample_cmd->add_option("--steps", steps, "Override sampler.steps");
  sample_cmd->add_flag("--clamp", clamp, "Snap intermediate predictions to the nearest embedding");

  auto* bench_cmd = app.add_subcommand("bench", "Attention cost scaling: exact MACs and wall-clock medians");
  bench_cmd->add_option("--sizes", sizes, "Comma-separated ascending sequence lengths");
  bench_cmd->add_option("--window", bench.window, "Window span");
  bench_cmd->add_option("--dilation", bench.dilation, "Dilation");
  bench_cmd->add_option("--dk", bench.d_k, "Head width");
  bench_cmd->add_option("--reps", bench.reps, "Timing repetitions (>= 5)");
  bench_cmd->add_option("--globals", bench.globals, "Leading global tokens");
  bench_cmd->add_option("--out", out_path, "Output file (default: stdout)");

  auto* eval_cmd = app.add_subcommand("eval", "Score generated sequences against references");
  eval_cmd->add_option("--generated", generated_path, "Generated ids, one sequence per line")->required();
  eval_cmd->add_option("--reference", reference_path, "Reference ids, aligned with --generated")->required();
  eval_cmd->add_option("--train-corpus", train_corpus_path, "Training corpus for bigram novelty");
  eval_cmd->add_option("--out", out_path, "Output file (default: stdout)");

  auto* ablate_cmd = app.add_subcommand("ablate", "Train and compare variants along one axis");
  ablate_cmd->add_option("--config", config_path, "Base run config")->required();
  ablate_cmd->add_option("--axis", axis, "sparse_attention | diffusion_steps | window_size")
      ->required()
      ->check(CLI::IsMember({"sparse_attention", "diffusion_steps", "window_size"}));
  ablate_cmd->add_option("--seed", seed, "Override the run and model seeds");
  ablate_cmd->add_option("--steps", steps, "Override optim.steps");
  ablate_cmd->add_option("--out", out_path, "Override the output directory");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  auto emit = [&](const std::string& text) {
    if (out_path.empty()) {
      out << text;
    } else {
      if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
      write_text(out_path, text);
    }
  };

  auto apply_training_overrides = [&](RunConfig& cfg) {
    if (seed) {
      cfg.seed = *seed;
      cfg.model.seed = *seed;
    }
    if (steps) {
      if (!cfg.stages.empty()) throw ConfigError("--steps cannot override a staged config; edit stages[] instead");
      cfg.optim.steps = *steps;
    }
    if (!out_path.empty()) cfg.out_dir = out_path;
    cfg.validate();
  };

  try {
    if (*train_cmd) {
      RunConfig cfg = load_run_config(config_path);
      apply_training_overrides(cfg);
      const TrainSummary s = train_run(cfg);
      char buf[128];
      std::snprintf(buf, sizeof buf, "steps\t%zu\ninitial_loss\t%.6f\nfinal_loss\t%.6f\n", s.steps, s.initial_loss, s.final_loss);
      out << buf << "checkpoint\t" << s.checkpoint.string() << '\n';
    } else if (*sample_cmd) {
      const LoadedRun run = load_run(checkpoint_path, config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path));
      SamplerConfig sc = run.config.sampler;
      if (seed) sc.seed = *seed;
      if (steps) {
        sc.num_steps = *steps;
        sc.times.clear();
      }
      sc.clamp = sc.clamp || clamp;
      const auto sources = sources_of(read_corpus(source_path));
      emit(format_sequences(generate(run, sources, sc)));
    } else if (*bench_cmd) {
      bench.sizes = parse_size_list(sizes, "--sizes");
      emit(format_bench(bench, run_bench(bench)));
    } else if (*eval_cmd) {
      const auto gen = read_sequences(generated_path);
      const auto ref = read_sequences(reference_path);
      if (gen.size() != ref.size()) {
        throw ShapeError("eval: " + generated_path + " has " + std::to_string(gen.size()) + " lines but " +
                         reference_path + " has " + std::to_string(ref.size()));
      }
      std::vector<TokenSeq> training;
      if (!train_corpus_path.empty()) {
        // Paired files contribute their targets; single-column files contribute each line.
        for (const auto& e : read_corpus(train_corpus_path)) training.push_back(e.target.empty() ? e.source : e.target);
      }
      const auto reports = evaluate(gen, ref, training);
      std::string text;
      for (const auto& r : reports) text += format_report(r) + '\n';
      emit(text);
      for (const auto& r : reports) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "%-16s %7.2f\n", r.name.c_str(), 100.0 * r.value);
        err << buf;
      }
    } else if (*ablate_cmd) {
      RunConfig base = load_run_config(config_path);
      base.stages.clear();
      apply_training_overrides(base);
      std::vector<AblationRow> rows;
      for (const auto& v : ablation_variants(base, axis)) {
        err << "ablate: training " << v.name << '\n';
        rows.push_back(run_ablation_variant(v));
      }
      const std::string table = format_ablation(axis, base, rows);
      fs::create_directories(base.out_dir);
      write_text(fs::path(base.out_dir) / ("ablation_" + axis + ".tsv"), table);
      out << table;
    }
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

inline int run_cli(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, out, err);
}

}  // namespace sadq
