// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sadq/diffusion.hpp"
#include "sadq/numeric/random.hpp"

namespace sadq {

inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kSepId = 1;
inline constexpr std::size_t kReservedIds = 2;
inline constexpr std::size_t kMaxSymbols = 64;

using TokenSeq = std::vector<std::size_t>;

/// Character-level vocabulary: PAD = 0, SEP = 1, then one id per symbol.
/// The embedding table appends the absorbing-state row after the last id.
class Tokenizer {
 public:
  static constexpr std::string_view kAlphabet =
      "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789+-*/=.,;:!?#";

  explicit Tokenizer(std::size_t symbols) : symbols_(symbols) {
    if (symbols == 0 || symbols > kMaxSymbols) {
      throw ConfigError("tokenizer: symbol count must lie in [1, " + std::to_string(kMaxSymbols) + "]");
    }
  }

  std::size_t symbols() const { return symbols_; }
  std::size_t vocab_size() const { return symbols_ + kReservedIds; }
  std::size_t absorbing_id() const { return vocab_size(); }

  static std::size_t symbol_id(std::size_t symbol) { return symbol + kReservedIds; }

  TokenSeq encode(std::string_view text) const {
    TokenSeq ids;
    for (char ch : text) {
      if (ch == '|') {
        ids.push_back(kSepId);
        continue;
      }
      const auto pos = kAlphabet.substr(0, symbols_).find(ch);
      if (pos == std::string_view::npos) throw ConfigError(std::string("tokenizer: character '") + ch + "' not in vocabulary");
      ids.push_back(symbol_id(pos));
    }
    return ids;
  }

  std::string decode(std::span<const std::size_t> ids) const {
    std::string out;
    for (std::size_t id : ids) {
      if (id == kPadId) continue;
      if (id == kSepId) {
        out += '|';
        continue;
      }
      if (id >= vocab_size()) throw ConfigError("tokenizer: id " + std::to_string(id) + " outside vocabulary");
      out += kAlphabet[id - kReservedIds];
    }
    return out;
  }

 private:
  std::size_t symbols_;
};

enum class TaskKind { kCopy, kReverse, kParaphrase };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kCopy: return "copy";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kParaphrase: return "paraphrase";
  }
  return "?";
}

inline TaskKind task_kind_from(const std::string& s) {
  if (s == "copy") return TaskKind::kCopy;
  if (s == "reverse") return TaskKind::kReverse;
  if (s == "paraphrase") return TaskKind::kParaphrase;
  throw ConfigError("task.kind: unknown task '" + s + "' (expected copy | reverse | paraphrase)");
}

struct SyntheticTask {
  TaskKind kind = TaskKind::kCopy;
  std::size_t symbols = 16;
  std::size_t min_len = 4;
  std::size_t max_len = 15;
  std::uint64_t seed = 7;
  std::size_t train = 4000;
  std::size_t valid = 100;
  std::size_t test = 200;

  std::size_t vocab_size() const { return symbols + kReservedIds; }

  /// Layout length: source slot, separator, target slot.
  std::size_t sequence_length() const { return 2 * max_len + 1; }

  void validate(std::size_t model_max_len = std::numeric_limits<std::size_t>::max()) const {
    if (symbols == 0 || symbols > kMaxSymbols) {
      throw ConfigError("task.symbols must lie in [1, " + std::to_string(kMaxSymbols) + "]");
    }
    if (min_len < 1 || min_len > max_len) throw ConfigError("task.min_len must lie in [1, task.max_len]");
    if (sequence_length() > model_max_len) {
      throw ConfigError("task.max_len " + std::to_string(max_len) + " needs sequence length " +
                        std::to_string(sequence_length()) + " but model.max_len is " + std::to_string(model_max_len));
    }
    if (train == 0) throw ConfigError("task.train must be positive");
  }
};

/// Ordered symbol rewrite rules (from -> to), applied one after another over the whole sequence.
inline constexpr std::array<std::pair<std::size_t, std::size_t>, 16> kSynonymRules{{
    {0, 3},  {1, 6},  {2, 9},  {4, 12}, {5, 15}, {7, 2},  {8, 5},  {10, 13},
    {11, 0}, {12, 7}, {13, 1}, {14, 8}, {15, 10}, {3, 14}, {6, 11}, {9, 4},
}};

inline TokenSeq paraphrase(const TokenSeq& source) {
  TokenSeq out = source;
  for (const auto& [from, to] : kSynonymRules) {
    for (auto& id : out)
      if (id == Tokenizer::symbol_id(from)) id = Tokenizer::symbol_id(to);
  }
  return out;
}

inline TokenSeq apply_task(TaskKind kind, const TokenSeq& source) {
  switch (kind) {
    case TaskKind::kCopy: return source;
    case TaskKind::kReverse: return TokenSeq(source.rbegin(), source.rend());
    case TaskKind::kParaphrase: return paraphrase(source);
  }
  return source;
}

struct Example {
  TokenSeq source;
  TokenSeq target;
  friend bool operator==(const Example&, const Example&) = default;
};

struct Corpus {
  std::vector<Example> train;
  std::vector<Example> valid;
  std::vector<Example> test;
};

inline std::uint64_t hash_tokens(std::span<const std::size_t> ids) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t id : ids) {
    h ^= static_cast<std::uint64_t>(id) + 0x9e3779b97f4a7c15ull;
    h *= 1099511628211ull;
  }
  return h;
}

/// Distinct sources drawn from the task seed, split in order into train/valid/test.
inline Corpus generate_corpus(const SyntheticTask& task) {
  task.validate();
  const std::size_t wanted = task.train + task.valid + task.test;
  // Distinct sequences available with lengths in [min_len, max_len].
  double capacity = 0.0;
  for (std::size_t len = task.min_len; len <= task.max_len; ++len)
    capacity += std::pow(static_cast<double>(task.symbols), static_cast<double>(len));
  if (capacity < static_cast<double>(wanted)) throw ConfigError("task: split sizes exceed the number of distinct sources");

  Rng rng(task.seed);
  std::unordered_set<std::uint64_t> seen;
  std::vector<Example> all;
  all.reserve(wanted);
  while (all.size() < wanted) {
    const std::size_t len = rng.uniform_int(task.min_len, task.max_len);
    TokenSeq src(len);
    for (auto& id : src) id = Tokenizer::symbol_id(rng.uniform_int(0, task.symbols - 1));
    if (!seen.insert(hash_tokens(src)).second) continue;
    TokenSeq tgt = apply_task(task.kind, src);
    all.push_back({std::move(src), std::move(tgt)});
  }
  Corpus c;
  auto it = all.begin();
  c.train.assign(it, it + static_cast<std::ptrdiff_t>(task.train));
  it += static_cast<std::ptrdiff_t>(task.train);
  c.valid.assign(it, it + static_cast<std::ptrdiff_t>(task.valid));
  it += static_cast<std::ptrdiff_t>(task.valid);
  c.test.assign(it, all.end());
  return c;
}

/// Fixed-slot sequence layout:
///   [source, PAD.. up to slot] [SEP] [target, PAD.. up to slot]
/// Source rows and padding are clean conditioning; only real target rows are generated.
struct SequenceLayout {
  std::size_t slot = 15;

  std::size_t length() const { return 2 * slot + 1; }
  std::size_t target_begin() const { return slot + 1; }

  /// Lays out one example; `target` may be empty with `target_len` giving the length to generate.
  void append(const TokenSeq& source, const TokenSeq& target, std::size_t target_len, std::vector<std::size_t>& tokens,
              std::vector<Role>& roles) const {
    if (source.size() > slot || target_len > slot) {
      throw ConfigError("sequence of length " + std::to_string(std::max(source.size(), target_len)) +
                        " exceeds layout slot " + std::to_string(slot));
    }
    for (std::size_t i = 0; i < slot; ++i) {
      tokens.push_back(i < source.size() ? source[i] : kPadId);
      roles.push_back(i < source.size() ? Role::kSource : Role::kPad);
    }
    tokens.push_back(kSepId);
    roles.push_back(Role::kSource);
    for (std::size_t i = 0; i < slot; ++i) {
      const bool real = i < target_len;
      tokens.push_back(real && i < target.size() ? target[i] : kPadId);
      roles.push_back(real ? Role::kTarget : Role::kPad);
    }
  }
};

struct TokenBatch {
  std::size_t batch = 0;
  std::size_t n = 0;
  std::vector<std::size_t> tokens;
  std::vector<Role> roles;
  std::vector<std::size_t> example_ids;

  std::size_t pad_count() const { return static_cast<std::size_t>(std::count(roles.begin(), roles.end(), Role::kPad)); }
};

inline TokenBatch make_batch(std::span<const Example> corpus, std::span<const std::size_t> ids, const SequenceLayout& layout) {
  TokenBatch b;
  b.batch = ids.size();
  b.n = layout.length();
  for (std::size_t id : ids) {
    const auto& ex = corpus[id];
    layout.append(ex.source, ex.target, ex.target.size(), b.tokens, b.roles);
    b.example_ids.push_back(id);
  }
  return b;
}

/// Epoch-wise shuffled, fixed-shape batches over a corpus. Each epoch visits every
/// example exactly once; the final batch of an epoch may be smaller.
class BatchIterator {
 public:
  BatchIterator(std::span<const Example> corpus, std::size_t batch_size, std::uint64_t shuffle_seed, SequenceLayout layout)
      : corpus_(corpus.begin(), corpus.end()), batch_size_(batch_size), rng_(shuffle_seed), layout_(layout) {
    if (corpus_.empty()) throw ConfigError("batch iterator: empty corpus");
    if (batch_size == 0 || batch_size > corpus_.size()) {
      throw ConfigError("batch size " + std::to_string(batch_size) + " must lie in [1, corpus size " +
                        std::to_string(corpus_.size()) + "]");
    }
    order_.resize(corpus_.size());
    reshuffle();
  }

  TokenBatch next() {
    if (cursor_ >= order_.size()) {
      reshuffle();
      ++epoch_;
    }
    const std::size_t take = std::min(batch_size_, order_.size() - cursor_);
    std::span<const std::size_t> ids(order_.data() + cursor_, take);
    cursor_ += take;
    return make_batch(corpus_, ids, layout_);
  }

  std::size_t epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const { return (corpus_.size() + batch_size_ - 1) / batch_size_; }
  const std::vector<Example>& corpus() const { return corpus_; }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_.engine());
    cursor_ = 0;
  }

  std::vector<Example> corpus_;
  std::size_t batch_size_;
  Rng rng_;
  SequenceLayout layout_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

// Line-oriented corpus files: "source ids<TAB>target ids", ids space-separated.

inline std::string join_ids(std::span<const std::size_t> ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(ids[i]);
  }
  return s;
}

inline TokenSeq parse_ids(std::string_view text) {
  TokenSeq out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(tok, &pos);
    } catch (const std::exception&) {
      throw FormatError("token '" + tok + "' is not a non-negative integer id");
    }
    if (pos != tok.size() || !std::isdigit(static_cast<unsigned char>(tok[0]))) throw FormatError("token '" + tok + "' is not a non-negative integer id");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

inline void write_corpus(const std::filesystem::path& path, std::span<const Example> examples) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write corpus " + path.string());
  for (const auto& ex : examples) f << join_ids(ex.source) << '\t' << join_ids(ex.target) << '\n';
}

/// Reads a corpus file. Lines without a tab are taken as sources with an empty target.
inline std::vector<Example> read_corpus(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot read corpus " + path.string());
  std::vector<Example> out;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      out.push_back({parse_ids(line), {}});
    } else {
      out.push_back({parse_ids(std::string_view(line).substr(0, tab)), parse_ids(std::string_view(line).substr(tab + 1))});
    }
  }
  return out;
}

/// Reads one id sequence per line (the target column of a tab-separated line).
inline std::vector<TokenSeq> read_sequences(const std::filesystem::path& path) {
  std::vector<TokenSeq> out;
  for (auto& ex : read_corpus(path)) out.push_back(ex.target.empty() && !ex.source.empty() ? ex.source : ex.target);
  return out;
}

}  // namespace sadq
