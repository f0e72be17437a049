// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sadq/numeric/tensor.hpp"
#include "sadq/tasks.hpp"

namespace sadq {

/// Replaces zero n-gram matches in BLEU so the geometric mean stays defined.
inline constexpr double kBleuSmoothing = 1e-9;

namespace detail {

inline std::map<std::vector<std::size_t>, std::size_t> ngram_counts(std::span<const std::size_t> seq, std::size_t order) {
  std::map<std::vector<std::size_t>, std::size_t> out;
  if (seq.size() < order) return out;
  for (std::size_t i = 0; i + order <= seq.size(); ++i) ++out[std::vector<std::size_t>(seq.begin() + i, seq.begin() + i + order)];
  return out;
}

inline void require_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": " + std::to_string(a) + " candidates vs " + std::to_string(b) + " references");
  }
}

}  // namespace detail

/// Corpus-level BLEU: clipped n-gram precisions for n = 1..max_n pooled over the corpus,
/// uniform geometric mean, brevity penalty exp(1 − r/c) when c < r.
inline double bleu(std::span<const TokenSeq> candidates, std::span<const TokenSeq> references, std::size_t max_n = 4) {
  detail::require_aligned(candidates.size(), references.size(), "bleu");
  if (candidates.empty()) throw ShapeError("bleu: empty corpus");
  if (max_n == 0) throw ConfigError("bleu: max_n must be positive");
  std::vector<double> matched(max_n, 0.0), total(max_n, 0.0);
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += static_cast<double>(candidates[i].size());
    ref_len += static_cast<double>(references[i].size());
    for (std::size_t n = 1; n <= max_n; ++n) {
      const auto c = detail::ngram_counts(candidates[i], n);
      const auto r = detail::ngram_counts(references[i], n);
      for (const auto& [gram, count] : c) {
        total[n - 1] += static_cast<double>(count);
        const auto it = r.find(gram);
        if (it != r.end()) matched[n - 1] += static_cast<double>(std::min(count, it->second));
      }
    }
  }
  if (cand_len == 0.0) return 0.0;
  double log_p = 0.0;
  for (std::size_t n = 0; n < max_n; ++n) {
    const double p = total[n] > 0.0 ? std::max(matched[n], kBleuSmoothing) / total[n] : kBleuSmoothing;
    log_p += std::log(p) / static_cast<double>(max_n);
  }
  const double bp = cand_len < ref_len ? std::exp(1.0 - ref_len / cand_len) : 1.0;
  return std::min(1.0, bp * std::exp(log_p));
}

inline std::size_t lcs_length(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// LCS-based F1 of one candidate against one reference; 0 when either side is empty.
inline double rouge_l(std::span<const std::size_t> candidate, std::span<const std::size_t> reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  return 2.0 * p * r / (p + r);
}

/// Mean ROUGE-L F1 over aligned pairs.
inline double rouge_l(std::span<const TokenSeq> candidates, std::span<const TokenSeq> references) {
  detail::require_aligned(candidates.size(), references.size(), "rouge_l");
  if (candidates.empty()) throw ShapeError("rouge_l: empty corpus");
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) total += rouge_l(candidates[i], references[i]);
  return total / static_cast<double>(candidates.size());
}

/// ROUGE-N F1 of one candidate against one reference from clipped n-gram overlap;
/// 0 when either side has no n-grams.
inline double rouge_n(std::span<const std::size_t> candidate, std::span<const std::size_t> reference, std::size_t n) {
  if (n == 0) throw ConfigError("rouge_n: n must be positive");
  const auto c = detail::ngram_counts(candidate, n);
  const auto r = detail::ngram_counts(reference, n);
  double overlap = 0.0, c_total = 0.0, r_total = 0.0;
  for (const auto& [gram, count] : c) {
    c_total += static_cast<double>(count);
    const auto it = r.find(gram);
    if (it != r.end()) overlap += static_cast<double>(std::min(count, it->second));
  }
  for (const auto& [gram, count] : r) r_total += static_cast<double>(count);
  if (overlap == 0.0) return 0.0;
  const double p = overlap / c_total, rec = overlap / r_total;
  return 2.0 * p * rec / (p + rec);
}

inline double rouge_n(std::span<const TokenSeq> candidates, std::span<const TokenSeq> references, std::size_t n) {
  detail::require_aligned(candidates.size(), references.size(), "rouge_n");
  if (candidates.empty()) throw ShapeError("rouge_n: empty corpus");
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) total += rouge_n(candidates[i], references[i], n);
  return total / static_cast<double>(candidates.size());
}

using Bigram = std::pair<std::size_t, std::size_t>;

inline std::set<Bigram> bigram_set(std::span<const TokenSeq> corpus) {
  std::set<Bigram> out;
  for (const auto& seq : corpus)
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) out.emplace(seq[i], seq[i + 1]);
  return out;
}

/// Share of distinct generated bigrams that never occur in the training corpus.
inline double bigram_novelty(std::span<const TokenSeq> generated, std::span<const TokenSeq> training) {
  if (generated.empty()) throw ShapeError("bigram_novelty: empty generated corpus");
  const auto gen = bigram_set(generated);
  if (gen.empty()) throw ShapeError("bigram_novelty: no generated sequence has two or more tokens");
  const auto seen = bigram_set(training);
  std::size_t novel = 0;
  for (const auto& g : gen) novel += seen.count(g) == 0;
  return static_cast<double>(novel) / static_cast<double>(gen.size());
}

/// Exact-match share over reference positions. Positions past the shorter sequence
/// count as wrong; PAD ids are dropped from both sides first.
inline double token_accuracy(std::span<const TokenSeq> candidates, std::span<const TokenSeq> references) {
  detail::require_aligned(candidates.size(), references.size(), "token_accuracy");
  std::size_t correct = 0, total = 0;
  auto strip = [](const TokenSeq& s) {
    TokenSeq out;
    for (std::size_t id : s)
      if (id != kPadId) out.push_back(id);
    return out;
  };
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const TokenSeq c = strip(candidates[i]), r = strip(references[i]);
    const std::size_t common = std::min(c.size(), r.size());
    for (std::size_t j = 0; j < common; ++j) correct += c[j] == r[j];
    total += std::max(c.size(), r.size());
  }
  if (total == 0) throw ShapeError("token_accuracy: no tokens to score");
  return static_cast<double>(correct) / static_cast<double>(total);
}

struct MetricReport {
  std::string name;
  double value = 0.0;
  std::size_t count = 0;
};

/// "name<TAB>value<TAB>count" with the value at six decimals.
inline std::string format_report(const MetricReport& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", r.value);
  return r.name + '\t' + buf + '\t' + std::to_string(r.count);
}

inline MetricReport parse_report(const std::string& line) {
  const auto a = line.find('\t');
  const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
  if (b == std::string::npos) throw FormatError("metric record needs three tab-separated fields: " + line);
  MetricReport r;
  r.name = line.substr(0, a);
  try {
    r.value = std::stod(line.substr(a + 1, b - a - 1));
    r.count = static_cast<std::size_t>(std::stoull(line.substr(b + 1)));
  } catch (const std::exception&) {
    throw FormatError("malformed metric record: " + line);
  }
  return r;
}

/// BLEU, ROUGE-1/2/L, bigram novelty (when a training corpus is given) and token accuracy.
inline std::vector<MetricReport> evaluate(std::span<const TokenSeq> generated, std::span<const TokenSeq> references,
                                          std::span<const TokenSeq> training = {}) {
  detail::require_aligned(generated.size(), references.size(), "evaluate");
  const std::size_t n = generated.size();
  std::vector<MetricReport> out;
  out.push_back({"bleu", bleu(generated, references), n});
  out.push_back({"rouge_1", rouge_n(generated, references, 1), n});
  out.push_back({"rouge_2", rouge_n(generated, references, 2), n});
  out.push_back({"rouge_l", rouge_l(generated, references), n});
  if (!training.empty()) out.push_back({"bigram_novelty", bigram_novelty(generated, training), n});
  out.push_back({"token_accuracy", token_accuracy(generated, references), n});
  return out;
}

}  // namespace sadq
