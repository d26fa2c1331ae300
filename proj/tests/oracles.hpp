// SPDX-License-Identifier: Apache-2.0

#pragma once

// Brute-force reference implementations used only by the tests. They count
// n-grams by linear scans over token vectors and share no code with the
// library beyond the final scoring formulas.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace oracle {

using Tokens = std::vector<std::string>;

inline std::vector<Tokens> ngrams(const Tokens& t, std::size_t n) {
  std::vector<Tokens> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) out.emplace_back(t.begin() + i, t.begin() + i + n);
  return out;
}

inline std::size_t occurrences(const std::vector<Tokens>& list, const Tokens& g) {
  return static_cast<std::size_t>(std::count(list.begin(), list.end(), g));
}

struct Counts {
  std::vector<double> matches, totals;
  double hyp_len = 0, ref_len = 0;
};

inline Counts bleu_counts(const Tokens& hyp, const std::vector<Tokens>& refs, std::size_t order) {
  Counts c;
  c.matches.assign(order, 0);
  c.totals.assign(order, 0);
  c.hyp_len = static_cast<double>(hyp.size());
  double best = static_cast<double>(refs[0].size());
  for (const auto& r : refs) {
    double len = static_cast<double>(r.size());
    double d = std::abs(len - c.hyp_len), bd = std::abs(best - c.hyp_len);
    if (d < bd || (d == bd && len < best)) best = len;
  }
  c.ref_len = best;
  for (std::size_t n = 1; n <= order; ++n) {
    auto hg = ngrams(hyp, n);
    std::vector<Tokens> done;
    for (const auto& g : hg) {
      if (std::find(done.begin(), done.end(), g) != done.end()) continue;
      done.push_back(g);
      std::size_t ref_max = 0;
      for (const auto& r : refs) ref_max = std::max(ref_max, occurrences(ngrams(r, n), g));
      c.matches[n - 1] += static_cast<double>(std::min(occurrences(hg, g), ref_max));
    }
    c.totals[n - 1] = static_cast<double>(hg.size());
  }
  return c;
}

/// eps < 0 means no smoothing.
inline double bleu_from(const Counts& c, double eps) {
  if (c.hyp_len == 0) return c.ref_len == 0 ? 100.0 : 0.0;
  double bp = c.hyp_len >= c.ref_len ? 1.0 : std::exp(1.0 - c.ref_len / c.hyp_len);
  double log_sum = 0;
  int used = 0;
  for (std::size_t n = 0; n < c.matches.size(); ++n) {
    if (c.totals[n] == 0) continue;
    ++used;
    double p = eps >= 0 ? (c.matches[n] + eps) / (c.totals[n] + eps) : c.matches[n] / c.totals[n];
    if (p == 0) return 0.0;
    log_sum += std::log(p);
  }
  if (used == 0) return 0.0;
  return 100.0 * bp * std::exp(log_sum / used);
}

inline double sentence_bleu(const Tokens& hyp, const Tokens& ref, std::size_t order = 4,
                            double eps = -1) {
  return bleu_from(bleu_counts(hyp, {ref}, order), eps);
}

inline double corpus_bleu(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs,
                          std::size_t order = 4, double eps = -1) {
  Counts total;
  total.matches.assign(order, 0);
  total.totals.assign(order, 0);
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    auto c = bleu_counts(hyps[i], {refs[i]}, order);
    for (std::size_t n = 0; n < order; ++n) {
      total.matches[n] += c.matches[n];
      total.totals[n] += c.totals[n];
    }
    total.hyp_len += c.hyp_len;
    total.ref_len += c.ref_len;
  }
  return bleu_from(total, eps);
}

/// Code points of `s` without ASCII whitespace.
inline Tokens chars(const std::string& s) {
  Tokens out;
  for (std::size_t i = 0; i < s.size();) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t len = c >= 0xF0 ? 4 : c >= 0xE0 ? 3 : c >= 0xC0 ? 2 : 1;
    std::string cp = s.substr(i, len);
    i += len;
    if (cp == " " || cp == "\t" || cp == "\n" || cp == "\r" || cp == "\f" || cp == "\v") continue;
    out.push_back(cp);
  }
  return out;
}

struct CharCounts {
  std::vector<double> matches, hyp_totals, ref_totals;
};

inline CharCounts chrf_counts(const std::string& hyp, const std::string& ref, std::size_t order) {
  CharCounts c;
  c.matches.assign(order, 0);
  c.hyp_totals.assign(order, 0);
  c.ref_totals.assign(order, 0);
  auto h = chars(hyp), r = chars(ref);
  for (std::size_t n = 1; n <= order; ++n) {
    auto hg = ngrams(h, n), rg = ngrams(r, n);
    std::vector<Tokens> done;
    for (const auto& g : hg) {
      if (std::find(done.begin(), done.end(), g) != done.end()) continue;
      done.push_back(g);
      c.matches[n - 1] += static_cast<double>(std::min(occurrences(hg, g), occurrences(rg, g)));
    }
    c.hyp_totals[n - 1] = static_cast<double>(hg.size());
    c.ref_totals[n - 1] = static_cast<double>(rg.size());
  }
  return c;
}

inline double chrf_from(const CharCounts& c, double beta) {
  double b2 = beta * beta, sum = 0;
  int used = 0;
  for (std::size_t n = 0; n < c.matches.size(); ++n) {
    if (c.hyp_totals[n] == 0 && c.ref_totals[n] == 0) continue;
    ++used;
    double p = c.hyp_totals[n] > 0 ? c.matches[n] / c.hyp_totals[n] : 0.0;
    double r = c.ref_totals[n] > 0 ? c.matches[n] / c.ref_totals[n] : 0.0;
    sum += (p + r) > 0 ? (1 + b2) * p * r / (b2 * p + r) : 0.0;
  }
  if (used == 0) return 100.0;
  return 100.0 * sum / used;
}

inline double sentence_chrf(const std::string& hyp, const std::string& ref, std::size_t order = 6,
                            double beta = 2.0) {
  return chrf_from(chrf_counts(hyp, ref, order), beta);
}

inline double corpus_chrf(const std::vector<std::string>& hyps, const std::vector<std::string>& refs,
                          std::size_t order = 6, double beta = 2.0) {
  CharCounts total;
  total.matches.assign(order, 0);
  total.hyp_totals.assign(order, 0);
  total.ref_totals.assign(order, 0);
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    auto c = chrf_counts(hyps[i], refs[i], order);
    for (std::size_t n = 0; n < order; ++n) {
      total.matches[n] += c.matches[n];
      total.hyp_totals[n] += c.hyp_totals[n];
      total.ref_totals[n] += c.ref_totals[n];
    }
  }
  return chrf_from(total, beta);
}

/// Brute-force MBR: index of the max row mean, first index on ties.
template <typename Utility>
std::size_t mbr_index(const std::vector<std::string>& cands, Utility&& u, bool include_self = true) {
  std::size_t best = 0;
  double best_mean = 0;
  for (std::size_t c = 0; c < cands.size(); ++c) {
    double sum = 0;
    for (std::size_t r = 0; r < cands.size(); ++r) {
      if (r != c || include_self) sum += u(cands[c], cands[r]);
    }
    double mean = sum / static_cast<double>(include_self ? cands.size() : cands.size() - 1);
    if (c == 0 || mean > best_mean) {
      best = c;
      best_mean = mean;
    }
  }
  return best;
}

/// Naive row-major matmul: (d x r) * (r x k).
inline std::vector<double> matmul(const std::vector<float>& b, const std::vector<float>& a,
                                  std::size_t d, std::size_t r, std::size_t k) {
  std::vector<double> out(d * k, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t q = 0; q < r; ++q) out[i * k + j] += double(b[i * r + q]) * double(a[q * k + j]);
  return out;
}

/// ½(Σ p ln(p/q) + Σ q ln(q/p)) evaluated term by term.
inline double symmetric_kl(const std::vector<double>& p, const std::vector<double>& q) {
  double a = 0, b = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0) a += p[i] * std::log(p[i] / q[i]);
    if (q[i] > 0) b += q[i] * std::log(q[i] / p[i]);
  }
  return 0.5 * (a + b);
}

}  // namespace oracle
