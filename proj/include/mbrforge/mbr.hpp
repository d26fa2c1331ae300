// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Minimum Bayes Risk selection over aligned multi-system candidates.
 *
 * For every source segment each candidate is scored as a hypothesis against
 * every candidate as a pseudo-reference; the candidate with the highest mean
 * utility wins. Ties resolve to the lowest candidate index.
 */

#include <atomic>
#include <concepts>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "mbrforge/bridge.hpp"
#include "mbrforge/error.hpp"
#include "mbrforge/metrics.hpp"
#include "mbrforge/text.hpp"

namespace mbrforge::mbr {

using bridge::ScoreRequest;

/// m source segments, each with one candidate from each of n systems.
struct CandidateSet {
  std::vector<Segment> sources;
  std::vector<std::string> systems;
  /// candidates[i][j]: output of system j for segment i.
  std::vector<std::vector<Segment>> candidates;

  std::size_t num_segments() const { return candidates.size(); }
  std::size_t num_systems() const { return systems.size(); }

  /// Builds a set from per-system columns, checking alignment.
  static CandidateSet from_columns(std::vector<std::string> systems,
                                   const std::vector<std::vector<Segment>>& columns,
                                   std::vector<Segment> sources = {}) {
    if (systems.size() != columns.size()) {
      throw DataError("candidate set: " + std::to_string(systems.size()) + " system names for " +
                      std::to_string(columns.size()) + " columns");
    }
    if (columns.empty()) throw DataError("candidate set: no systems");
    const auto m = columns.front().size();
    bool ragged = false;
    for (const auto& c : columns) ragged |= c.size() != m;
    if (!sources.empty() && sources.size() != m) ragged = true;
    if (ragged) {
      std::string msg = "candidate files are not aligned:";
      for (std::size_t j = 0; j < columns.size(); ++j) {
        msg += " " + systems[j] + "=" + std::to_string(columns[j].size());
      }
      if (!sources.empty()) msg += " source=" + std::to_string(sources.size());
      throw AlignmentError(msg);
    }
    CandidateSet set;
    set.systems = std::move(systems);
    set.sources = std::move(sources);
    if (set.sources.empty()) set.sources.assign(m, Segment{});
    set.candidates.assign(m, std::vector<Segment>(columns.size()));
    for (std::size_t j = 0; j < columns.size(); ++j) {
      for (std::size_t i = 0; i < m; ++i) set.candidates[i][j] = columns[j][i];
    }
    return set;
  }
};

/// Loads one candidate file per system (path order defines system order)
/// plus an optional aligned source file.
inline CandidateSet load_candidates(std::span<const std::filesystem::path> candidate_paths,
                                    const std::optional<std::filesystem::path>& source_path) {
  if (candidate_paths.size() < 2) {
    throw UsageError("MBR needs at least 2 candidate files, got " +
                     std::to_string(candidate_paths.size()));
  }
  std::vector<std::string> names;
  std::vector<std::vector<Segment>> columns;
  for (const auto& p : candidate_paths) {
    names.push_back(p.string());
    columns.push_back(text::read_lines(p));
  }
  std::vector<Segment> sources;
  if (source_path) {
    sources = text::read_lines(*source_path);
    if (sources.size() != columns.front().size()) {
      std::string msg = "source file " + source_path->string() + " has " +
                        std::to_string(sources.size()) + " lines; candidates:";
      for (std::size_t j = 0; j < columns.size(); ++j) {
        msg += " " + names[j] + "=" + std::to_string(columns[j].size());
      }
      throw AlignmentError(msg);
    }
    // an empty source file aligned with empty candidates is still fine
  }
  return CandidateSet::from_columns(std::move(names), columns, std::move(sources));
}

// --------------------------------------------------------------------------
// Utilities
// --------------------------------------------------------------------------

enum class UtilityKind { NativeBleu, NativeChrf, External };

struct UtilitySpec {
  UtilityKind kind = UtilityKind::NativeChrf;

  int bleu_order = 4;
  metrics::Smoothing bleu_smoothing = metrics::Smoothing::add_k(0.1);
  metrics::TokenScheme bleu_tokens = metrics::TokenScheme::PunctuationSplit;

  int chrf_order = 6;
  double chrf_beta = 2.0;

  std::optional<bridge::BridgeConfig> bridge;

  /// Average over all n references including the candidate itself.
  bool include_self = true;
  /// Pass the source segment to the utility (external scorers only).
  bool uses_source = false;
  /// Utility is symmetric, so each unordered pair is scored once.
  bool symmetric = false;

  static UtilitySpec bleu() {
    UtilitySpec u;
    u.kind = UtilityKind::NativeBleu;
    return u;
  }
  static UtilitySpec chrf() { return {}; }
  static UtilitySpec external(bridge::BridgeConfig config) {
    UtilitySpec u;
    u.kind = UtilityKind::External;
    u.bridge = std::move(config);
    u.uses_source = true;
    return u;
  }

  void validate() const {
    if (kind == UtilityKind::External) {
      if (!bridge || bridge->command.empty()) {
        throw UsageError("external utility requires a scorer command");
      }
    } else if (uses_source) {
      throw UsageError("native utilities do not consume the source segment");
    }
  }
};

/// Scores a batch of (src, hyp, ref) requests, one value per request.
using BatchScorer = std::function<std::vector<double>(std::span<const ScoreRequest>)>;

/// Creates a scorer for `spec`. External scorers own a private scorer
/// process, so each worker needs its own instance.
inline BatchScorer make_scorer(const UtilitySpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case UtilityKind::NativeBleu:
      return [spec](std::span<const ScoreRequest> reqs) {
        std::vector<double> out;
        out.reserve(reqs.size());
        for (const auto& r : reqs) {
          auto hyp = metrics::tokenize(r.mt, spec.bleu_tokens);
          auto ref = metrics::tokenize(r.ref, spec.bleu_tokens);
          out.push_back(metrics::sentence_bleu(hyp, ref, spec.bleu_order, spec.bleu_smoothing).value);
        }
        return out;
      };
    case UtilityKind::NativeChrf:
      return [spec](std::span<const ScoreRequest> reqs) {
        std::vector<double> out;
        out.reserve(reqs.size());
        for (const auto& r : reqs) {
          out.push_back(metrics::sentence_chrf(r.mt, r.ref, spec.chrf_order, spec.chrf_beta).value);
        }
        return out;
      };
    case UtilityKind::External: {
      auto client = std::make_shared<bridge::BridgeClient>(*spec.bridge);
      return [client](std::span<const ScoreRequest> reqs) { return client->score(reqs); };
    }
  }
  throw UsageError("unknown utility kind");
}

// --------------------------------------------------------------------------
// Utility matrix
// --------------------------------------------------------------------------

struct UtilityMatrix {
  std::size_t segment_index = 0;
  /// values[c][r]: candidate c scored against candidate r as reference.
  std::vector<std::vector<double>> values;
  std::vector<double> row_means;
  std::size_t best_index = 0;
  double best_mean = 0.0;

  std::size_t size() const { return values.size(); }
};

/// Fills row means and the argmax (lowest index wins ties) from `values`.
inline UtilityMatrix summarize(std::size_t segment_index, std::vector<std::vector<double>> values,
                               bool include_self) {
  const auto n = values.size();
  if (n == 0) throw DataError("utility matrix: no candidates");
  if (!include_self && n < 2) {
    throw DataError("utility matrix: excluding self needs at least 2 candidates");
  }
  UtilityMatrix u;
  u.segment_index = segment_index;
  u.row_means.assign(n, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    if (values[c].size() != n) throw DataError("utility matrix: ragged row");
    double sum = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c && !include_self) continue;
      sum += values[c][r];
    }
    u.row_means[c] = sum / static_cast<double>(include_self ? n : n - 1);
  }
  u.values = std::move(values);
  for (std::size_t c = 1; c < n; ++c) {
    if (u.row_means[c] > u.row_means[u.best_index]) u.best_index = c;
  }
  u.best_mean = u.row_means[u.best_index];
  return u;
}

/// Computes the n×n utility matrix of one segment with `scorer`.
template <typename Scorer>
  requires std::invocable<Scorer&, std::span<const ScoreRequest>>
UtilityMatrix utility_matrix(const CandidateSet& set, std::size_t segment_index, Scorer&& scorer,
                             bool include_self = true, bool uses_source = false,
                             bool symmetric = false) {
  if (segment_index >= set.num_segments()) {
    throw DataError("segment index " + std::to_string(segment_index) + " out of range [0, " +
                    std::to_string(set.num_segments()) + ")");
  }
  const auto& row = set.candidates[segment_index];
  const auto n = row.size();
  const Segment empty;
  const Segment& src = uses_source ? set.sources[segment_index] : empty;

  std::vector<ScoreRequest> reqs;
  reqs.reserve(n * n);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t r = symmetric ? c : 0; r < n; ++r) reqs.push_back({src, row[c], row[r]});
  }
  auto scores = scorer(std::span<const ScoreRequest>(reqs));
  if (scores.size() != reqs.size()) {
    throw DataError("utility returned " + std::to_string(scores.size()) + " scores for " +
                    std::to_string(reqs.size()) + " requests");
  }
  std::vector<std::vector<double>> values(n, std::vector<double>(n, 0.0));
  std::size_t k = 0;
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t r = symmetric ? c : 0; r < n; ++r) {
      values[c][r] = scores[k++];
      if (symmetric) values[r][c] = values[c][r];
    }
  }
  return summarize(segment_index, std::move(values), include_self);
}

inline UtilityMatrix utility_matrix(const CandidateSet& set, std::size_t segment_index,
                                    const UtilitySpec& spec) {
  return utility_matrix(set, segment_index, make_scorer(spec), spec.include_self,
                        spec.uses_source, spec.symmetric);
}

// --------------------------------------------------------------------------
// Decoding
// --------------------------------------------------------------------------

struct MbrSelection {
  std::vector<Segment> chosen;
  std::vector<std::size_t> indices;
  std::vector<double> expected_utilities;
  /// Per-segment matrices, kept only when requested.
  std::vector<UtilityMatrix> matrices;
};

namespace detail {

inline std::exception_ptr with_segment(std::size_t segment, const std::exception_ptr& ep) {
  const std::string prefix = "segment " + std::to_string(segment) + ": ";
  try {
    std::rethrow_exception(ep);
  } catch (const BridgeError& e) {
    return std::make_exception_ptr(BridgeError(e.reason(), prefix + e.what(), e.raw_response()));
  } catch (const Error& e) {
    return std::make_exception_ptr(Error(e.kind(), prefix + e.what()));
  } catch (const std::exception& e) {
    return std::make_exception_ptr(DataError(prefix + e.what()));
  }
}

}  // namespace detail

/// Runs MBR over every segment. `make_scorer_fn()` is called once per worker
/// thread. Results do not depend on `workers`; on failure the error of the
/// lowest failing segment is rethrown with its index attached.
template <typename ScorerFactory>
  requires std::invocable<ScorerFactory&>
MbrSelection mbr_decode(const CandidateSet& set, ScorerFactory&& make_scorer_fn,
                        bool include_self = true, bool uses_source = false, bool symmetric = false,
                        std::size_t workers = 1, bool keep_matrices = false) {
  const auto m = set.num_segments();
  std::vector<std::optional<UtilityMatrix>> results(m);
  std::vector<std::exception_ptr> errors(m);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};

  auto work = [&] {
    std::optional<BatchScorer> scorer;
    while (!failed.load()) {
      auto i = next.fetch_add(1);
      if (i >= m) break;
      try {
        if (!scorer) scorer.emplace(make_scorer_fn());
        results[i] = utility_matrix(set, i, *scorer, include_self, uses_source, symmetric);
      } catch (...) {
        errors[i] = std::current_exception();
        failed.store(true);
      }
    }
  };

  workers = std::max<std::size_t>(1, std::min(workers, std::max<std::size_t>(1, m)));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (errors[i]) std::rethrow_exception(detail::with_segment(i, errors[i]));
  }

  MbrSelection sel;
  sel.chosen.reserve(m);
  sel.indices.reserve(m);
  sel.expected_utilities.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    auto& u = *results[i];
    sel.indices.push_back(u.best_index);
    sel.chosen.push_back(set.candidates[i][u.best_index]);
    sel.expected_utilities.push_back(u.best_mean);
    if (keep_matrices) sel.matrices.push_back(std::move(u));
  }
  return sel;
}

inline MbrSelection mbr_decode(const CandidateSet& set, const UtilitySpec& spec,
                               std::size_t workers = 1, bool keep_matrices = false) {
  spec.validate();
  return mbr_decode(
      set, [&spec] { return make_scorer(spec); }, spec.include_self, spec.uses_source,
      spec.symmetric, workers, keep_matrices);
}

/// Tab-separated dump: segment_index, candidate_index, the n utilities of
/// that row and its mean, reals with 6 decimals.
inline std::string format_matrix_dump(std::span<const UtilityMatrix> matrices) {
  std::string out;
  char buf[64];
  for (const auto& u : matrices) {
    for (std::size_t c = 0; c < u.size(); ++c) {
      out += std::to_string(u.segment_index);
      out += '\t';
      out += std::to_string(c);
      for (double v : u.values[c]) {
        std::snprintf(buf, sizeof buf, "\t%.6f", v);
        out += buf;
      }
      std::snprintf(buf, sizeof buf, "\t%.6f\n", u.row_means[c]);
      out += buf;
    }
  }
  return out;
}

}  // namespace mbrforge::mbr
