// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Lexical translation metrics: BLEU and chrF at sentence and corpus level.
 *
 * BLEU uses clipped modified n-gram precisions with uniform weights and the
 * exponential brevity penalty. Orders for which the hypothesis has no n-grams
 * at all (hypothesis shorter than n) are dropped and the weights renormalised
 * over the remaining orders, so a short exact match still scores 100.
 *
 * chrF computes a character n-gram F-beta per order on whitespace-stripped
 * text and averages it over the orders where either side has n-grams.
 *
 * Corpus variants micro-average: raw counts are summed over segments before
 * any ratio is taken.
 */

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mbrforge/error.hpp"
#include "mbrforge/text.hpp"

namespace mbrforge::metrics {

using TokenSequence = std::vector<std::string>;

enum class TokenScheme { Whitespace, PunctuationSplit };

inline bool is_ascii_punct(char c) {
  auto u = static_cast<unsigned char>(c);
  return (u >= 0x21 && u <= 0x2F) || (u >= 0x3A && u <= 0x40) || (u >= 0x5B && u <= 0x60) ||
         (u >= 0x7B && u <= 0x7E);
}

/// Whitespace tokenisation; PunctuationSplit additionally emits every ASCII
/// punctuation character as its own token.
inline TokenSequence tokenize(std::string_view s, TokenScheme scheme) {
  auto words = text::split_whitespace(s);
  if (scheme == TokenScheme::Whitespace) return words;
  TokenSequence out;
  out.reserve(words.size());
  for (const auto& w : words) {
    std::string cur;
    for (char c : w) {
      if (is_ascii_punct(c)) {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
        out.emplace_back(1, c);
      } else {
        cur += c;
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
  }
  return out;
}

/// Multiset of n-grams of a single order. Keys join the n units with a
/// single space; units never contain whitespace, so keys are unambiguous.
struct NGramCounts {
  int order = 1;
  std::unordered_map<std::string, std::size_t> counts;

  std::size_t total() const {
    std::size_t t = 0;
    for (const auto& [_, c] : counts) t += c;
    return t;
  }
};

template <typename Unit>
NGramCounts extract_ngrams(std::span<const Unit> units, int order) {
  NGramCounts out;
  out.order = order;
  const auto n = static_cast<std::size_t>(order);
  if (units.size() < n) return out;
  for (std::size_t i = 0; i + n <= units.size(); ++i) {
    std::string key(units[i]);
    for (std::size_t j = 1; j < n; ++j) {
      key += ' ';
      key += units[i + j];
    }
    ++out.counts[key];
  }
  return out;
}

/// Score on a 0..100 scale with per-order detail. Per-order entries are NaN
/// for orders excluded from the average.
struct MetricScore {
  double value = 0.0;
  std::vector<double> precision;
  std::vector<double> recall;   // chrF only
  std::vector<double> fscore;   // chrF only
  double brevity_penalty = 1.0; // BLEU only
};

// --------------------------------------------------------------------------
// BLEU
// --------------------------------------------------------------------------

struct Smoothing {
  enum class Kind { None, AddK };
  Kind kind = Kind::None;
  double k = 0.1;

  static Smoothing none() { return {}; }
  static Smoothing add_k(double eps = 0.1) { return {Kind::AddK, eps}; }
};

/// Sufficient statistics for BLEU; additive across segments.
struct BleuStats {
  std::vector<std::size_t> matches;
  std::vector<std::size_t> totals;
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;

  explicit BleuStats(int max_order = 4)
      : matches(static_cast<std::size_t>(max_order), 0),
        totals(static_cast<std::size_t>(max_order), 0) {}

  BleuStats& operator+=(const BleuStats& o) {
    for (std::size_t n = 0; n < matches.size(); ++n) {
      matches[n] += o.matches[n];
      totals[n] += o.totals[n];
    }
    hyp_len += o.hyp_len;
    ref_len += o.ref_len;
    return *this;
  }
};

/// Reference length closest to the hypothesis length; ties go to the shorter.
inline std::size_t closest_ref_length(std::size_t hyp_len, std::span<const TokenSequence> refs) {
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    auto d = [&](std::size_t len) { return len > hyp_len ? len - hyp_len : hyp_len - len; };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  return best;
}

inline BleuStats bleu_stats(const TokenSequence& hyp, std::span<const TokenSequence> refs,
                            int max_order = 4) {
  if (max_order < 1) throw UsageError("BLEU max_order must be >= 1");
  if (refs.empty()) throw DataError("BLEU requires at least one reference");
  BleuStats st(max_order);
  st.hyp_len = hyp.size();
  st.ref_len = closest_ref_length(hyp.size(), refs);
  for (int n = 1; n <= max_order; ++n) {
    auto h = extract_ngrams(std::span<const std::string>(hyp), n);
    std::unordered_map<std::string, std::size_t> max_ref;
    for (const auto& r : refs) {
      for (const auto& [g, c] : extract_ngrams(std::span<const std::string>(r), n).counts) {
        auto& m = max_ref[g];
        m = std::max(m, c);
      }
    }
    std::size_t matched = 0;
    for (const auto& [g, c] : h.counts) {
      auto it = max_ref.find(g);
      if (it != max_ref.end()) matched += std::min(c, it->second);
    }
    st.matches[n - 1] = matched;
    st.totals[n - 1] = h.total();
  }
  return st;
}

inline MetricScore bleu_from_stats(const BleuStats& st, Smoothing smoothing = Smoothing::none()) {
  MetricScore s;
  const auto orders = st.matches.size();
  s.precision.assign(orders, std::numeric_limits<double>::quiet_NaN());
  if (st.hyp_len == 0) {
    // empty against empty is a vacuous perfect match
    s.value = st.ref_len == 0 ? 100.0 : 0.0;
    s.brevity_penalty = st.ref_len == 0 ? 1.0 : 0.0;
    return s;
  }
  s.brevity_penalty = st.hyp_len >= st.ref_len
                          ? 1.0
                          : std::exp(1.0 - static_cast<double>(st.ref_len) /
                                               static_cast<double>(st.hyp_len));
  double log_sum = 0.0;
  std::size_t effective = 0;
  bool zero = false;
  for (std::size_t n = 0; n < orders; ++n) {
    if (st.totals[n] == 0) continue;
    ++effective;
    double m = static_cast<double>(st.matches[n]);
    double t = static_cast<double>(st.totals[n]);
    double p = smoothing.kind == Smoothing::Kind::AddK ? (m + smoothing.k) / (t + smoothing.k)
                                                       : m / t;
    s.precision[n] = p;
    if (p <= 0.0) {
      zero = true;
    } else {
      log_sum += std::log(p);
    }
  }
  if (zero || effective == 0) {
    s.value = 0.0;
    return s;
  }
  s.value = 100.0 * s.brevity_penalty * std::exp(log_sum / static_cast<double>(effective));
  s.value = std::clamp(s.value, 0.0, 100.0);
  return s;
}

inline MetricScore sentence_bleu(const TokenSequence& hyp, std::span<const TokenSequence> refs,
                                 int max_order = 4, Smoothing smoothing = Smoothing::none()) {
  return bleu_from_stats(bleu_stats(hyp, refs, max_order), smoothing);
}

inline MetricScore sentence_bleu(const TokenSequence& hyp, const TokenSequence& ref,
                                 int max_order = 4, Smoothing smoothing = Smoothing::none()) {
  return sentence_bleu(hyp, std::span<const TokenSequence>(&ref, 1), max_order, smoothing);
}

/// Corpus BLEU with one or more references per segment.
inline MetricScore corpus_bleu(std::span<const TokenSequence> hyps,
                               std::span<const std::vector<TokenSequence>> refs,
                               int max_order = 4, Smoothing smoothing = Smoothing::none()) {
  if (hyps.size() != refs.size()) {
    throw AlignmentError("corpus BLEU: " + std::to_string(hyps.size()) + " hypotheses vs " +
                         std::to_string(refs.size()) + " references");
  }
  if (hyps.empty()) throw DataError("corpus BLEU: empty corpus");
  BleuStats total(max_order);
  for (std::size_t i = 0; i < hyps.size(); ++i) total += bleu_stats(hyps[i], refs[i], max_order);
  return bleu_from_stats(total, smoothing);
}

inline MetricScore corpus_bleu(std::span<const TokenSequence> hyps,
                               std::span<const TokenSequence> refs, int max_order = 4,
                               Smoothing smoothing = Smoothing::none()) {
  std::vector<std::vector<TokenSequence>> wrapped;
  wrapped.reserve(refs.size());
  for (const auto& r : refs) wrapped.push_back({r});
  return corpus_bleu(hyps, std::span<const std::vector<TokenSequence>>(wrapped), max_order,
                     smoothing);
}

// --------------------------------------------------------------------------
// chrF
// --------------------------------------------------------------------------

struct ChrfStats {
  std::vector<std::size_t> matches;
  std::vector<std::size_t> hyp_totals;
  std::vector<std::size_t> ref_totals;

  explicit ChrfStats(int char_order = 6)
      : matches(static_cast<std::size_t>(char_order), 0),
        hyp_totals(static_cast<std::size_t>(char_order), 0),
        ref_totals(static_cast<std::size_t>(char_order), 0) {}

  ChrfStats& operator+=(const ChrfStats& o) {
    for (std::size_t n = 0; n < matches.size(); ++n) {
      matches[n] += o.matches[n];
      hyp_totals[n] += o.hyp_totals[n];
      ref_totals[n] += o.ref_totals[n];
    }
    return *this;
  }
};

/// Code points of a segment with all whitespace removed.
inline std::vector<std::string_view> chrf_units(std::string_view s) {
  std::vector<std::string_view> out;
  for (auto cp : text::code_points(s)) {
    if (cp.size() == 1 && text::is_space(cp[0])) continue;
    out.push_back(cp);
  }
  return out;
}

inline ChrfStats chrf_stats(std::string_view hyp, std::string_view ref, int char_order = 6) {
  if (char_order < 1) throw UsageError("chrF char_order must be >= 1");
  ChrfStats st(char_order);
  auto h = chrf_units(hyp);
  auto r = chrf_units(ref);
  for (int n = 1; n <= char_order; ++n) {
    auto hc = extract_ngrams(std::span<const std::string_view>(h), n);
    auto rc = extract_ngrams(std::span<const std::string_view>(r), n);
    std::size_t matched = 0;
    for (const auto& [g, c] : hc.counts) {
      auto it = rc.counts.find(g);
      if (it != rc.counts.end()) matched += std::min(c, it->second);
    }
    st.matches[n - 1] = matched;
    st.hyp_totals[n - 1] = hc.total();
    st.ref_totals[n - 1] = rc.total();
  }
  return st;
}

inline MetricScore chrf_from_stats(const ChrfStats& st, double beta = 2.0) {
  if (!(beta > 0.0)) throw UsageError("chrF beta must be > 0");
  const auto nan = std::numeric_limits<double>::quiet_NaN();
  const auto orders = st.matches.size();
  MetricScore s;
  s.precision.assign(orders, nan);
  s.recall.assign(orders, nan);
  s.fscore.assign(orders, nan);
  const double b2 = beta * beta;
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t n = 0; n < orders; ++n) {
    if (st.hyp_totals[n] == 0 && st.ref_totals[n] == 0) continue;
    double m = static_cast<double>(st.matches[n]);
    double p = st.hyp_totals[n] ? m / static_cast<double>(st.hyp_totals[n]) : 0.0;
    double r = st.ref_totals[n] ? m / static_cast<double>(st.ref_totals[n]) : 0.0;
    double f = (p + r) > 0.0 ? (1.0 + b2) * p * r / (b2 * p + r) : 0.0;
    s.precision[n] = p;
    s.recall[n] = r;
    s.fscore[n] = f;
    sum += f;
    ++used;
  }
  // both sides empty: vacuous perfect match
  s.value = used == 0 ? 100.0 : std::clamp(100.0 * sum / static_cast<double>(used), 0.0, 100.0);
  return s;
}

inline MetricScore sentence_chrf(std::string_view hyp, std::string_view ref, int char_order = 6,
                                 double beta = 2.0) {
  return chrf_from_stats(chrf_stats(hyp, ref, char_order), beta);
}

inline MetricScore corpus_chrf(std::span<const std::string> hyps, std::span<const std::string> refs,
                               int char_order = 6, double beta = 2.0) {
  if (hyps.size() != refs.size()) {
    throw AlignmentError("corpus chrF: " + std::to_string(hyps.size()) + " hypotheses vs " +
                         std::to_string(refs.size()) + " references");
  }
  if (hyps.empty()) throw DataError("corpus chrF: empty corpus");
  ChrfStats total(char_order);
  for (std::size_t i = 0; i < hyps.size(); ++i) total += chrf_stats(hyps[i], refs[i], char_order);
  return chrf_from_stats(total, beta);
}

}  // namespace mbrforge::metrics
