// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Synthetic parallel corpora from forward (self-training) and backward
 * (back-translation) system outputs.
 *
 * Self-training keeps the monolingual text as the source and the system
 * output as the target. Back-translation keeps the monolingual text as the
 * target and puts the synthetic output on the source side, optionally
 * prefixed by a tag token.
 */

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mbrforge/atomic_write.hpp"
#include "mbrforge/error.hpp"
#include "mbrforge/text.hpp"

namespace mbrforge::selftrain {

enum class Provenance { Genuine, SelfTrain, BackTranslate };

inline std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::Genuine: return "genuine";
    case Provenance::SelfTrain: return "self-train";
    case Provenance::BackTranslate: return "back-translate";
  }
  return "genuine";
}

inline Provenance parse_provenance(std::string_view s) {
  if (s == "genuine") return Provenance::Genuine;
  if (s == "self-train") return Provenance::SelfTrain;
  if (s == "back-translate") return Provenance::BackTranslate;
  throw DataError("unknown provenance label '" + std::string(s) + "'");
}

struct SentencePair {
  Segment source;
  Segment target;
  Provenance provenance = Provenance::Genuine;

  friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

struct ParallelCorpus {
  std::vector<SentencePair> pairs;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

inline constexpr std::string_view kDefaultBtTag = "<BT>";

/// Token counts are whitespace tokens. Pairs with a blank side are always
/// dropped.
struct FilterConfig {
  /// Upper bound on max(src/tgt, tgt/src) token ratio.
  double max_length_ratio = 3.0;
  std::size_t min_tokens = 1;
  std::size_t max_tokens = 250;
  bool dedup = false;

  static FilterConfig permissive() {
    FilterConfig f;
    f.max_length_ratio = 1e300;
    f.min_tokens = 0;
    f.max_tokens = static_cast<std::size_t>(-1);
    return f;
  }

  void validate() const {
    if (!(max_length_ratio > 0.0)) throw UsageError("max_length_ratio must be > 0");
    if (min_tokens > max_tokens) throw UsageError("min_tokens must not exceed max_tokens");
  }
};

/// True when the pair passes the length, ratio and emptiness rules.
inline bool keep_pair(std::string_view source, std::string_view target, const FilterConfig& f) {
  auto s = text::count_tokens(source);
  auto t = text::count_tokens(target);
  if (s == 0 || t == 0) return false;
  if (s < f.min_tokens || t < f.min_tokens) return false;
  if (s > f.max_tokens || t > f.max_tokens) return false;
  double ratio = s > t ? static_cast<double>(s) / static_cast<double>(t)
                       : static_cast<double>(t) / static_cast<double>(s);
  return ratio <= f.max_length_ratio;
}

/// Drops exact (source, target) repeats, keeping the first occurrence.
inline ParallelCorpus dedup_pairs(ParallelCorpus corpus) {
  std::set<std::pair<std::string, std::string>> seen;
  ParallelCorpus out;
  for (auto& p : corpus.pairs) {
    if (seen.emplace(p.source, p.target).second) out.pairs.push_back(std::move(p));
  }
  return out;
}

inline ParallelCorpus apply_filter(ParallelCorpus corpus, const FilterConfig& filter) {
  filter.validate();
  ParallelCorpus out;
  for (auto& p : corpus.pairs) {
    if (keep_pair(p.source, p.target, filter)) out.pairs.push_back(std::move(p));
  }
  return filter.dedup ? dedup_pairs(std::move(out)) : out;
}

inline void check_aligned(const char* what, std::size_t a, const char* a_name, std::size_t b,
                          const char* b_name) {
  if (a != b) {
    throw AlignmentError(std::string(what) + ": " + std::to_string(a) + " " + a_name + " vs " +
                         std::to_string(b) + " " + b_name);
  }
}

/// Self-training pairs (source -> translation). Pass an MBR selection's
/// chosen outputs as `translations` for MBR self-training.
inline ParallelCorpus build_st_corpus(std::span<const Segment> sources,
                                      std::span<const Segment> translations,
                                      const FilterConfig& filter) {
  check_aligned("self-training corpus", sources.size(), "sources", translations.size(),
                "translations");
  ParallelCorpus c;
  c.pairs.reserve(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    c.pairs.push_back({sources[i], translations[i], Provenance::SelfTrain});
  }
  return apply_filter(std::move(c), filter);
}

/// Back-translation pairs (back_translation -> target). Length filtering
/// sees the untagged synthetic source.
inline ParallelCorpus build_bt_corpus(std::span<const Segment> targets,
                                      std::span<const Segment> back_translations,
                                      const std::optional<std::string>& tag,
                                      const FilterConfig& filter) {
  check_aligned("back-translation corpus", targets.size(), "targets", back_translations.size(),
                "back-translations");
  if (tag && (text::split_whitespace(*tag) != std::vector<std::string>{*tag})) {
    throw UsageError("back-translation tag must be a single token");
  }
  filter.validate();
  ParallelCorpus c;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!keep_pair(back_translations[i], targets[i], filter)) continue;
    Segment src = tag ? *tag + " " + back_translations[i] : back_translations[i];
    c.pairs.push_back({std::move(src), targets[i], Provenance::BackTranslate});
  }
  return filter.dedup ? dedup_pairs(std::move(c)) : c;
}

/// Uniform integer in [0, bound) by rejection from a 64-bit Mersenne
/// Twister, so shuffles are identical across standard libraries.
inline std::uint64_t bounded_random(std::mt19937_64& rng, std::uint64_t bound) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % bound;
}

/// Fisher-Yates shuffle driven by mt19937_64(seed).
template <typename T>
void seeded_shuffle(std::vector<T>& items, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) {
    auto j = static_cast<std::size_t>(bounded_random(rng, i));
    std::swap(items[i - 1], items[j]);
  }
}

inline ParallelCorpus merge_corpora(std::span<const ParallelCorpus> corpora,
                                    std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
  ParallelCorpus out;
  for (const auto& c : corpora) out.pairs.insert(out.pairs.end(), c.pairs.begin(), c.pairs.end());
  if (shuffle_seed) seeded_shuffle(out.pairs, *shuffle_seed);
  return out;
}

// --------------------------------------------------------------------------
// Files: <prefix>.src, <prefix>.tgt and optionally <prefix>.meta
// --------------------------------------------------------------------------

inline std::filesystem::path with_suffix(const std::filesystem::path& prefix, const char* ext) {
  auto p = prefix;
  p += ext;
  return p;
}

inline void write_corpus(const ParallelCorpus& corpus, const std::filesystem::path& prefix,
                         bool with_meta = true) {
  std::string src, tgt, meta;
  for (const auto& p : corpus.pairs) {
    if (p.source.find('\n') != std::string::npos || p.target.find('\n') != std::string::npos) {
      throw DataError("corpus segment contains a line break");
    }
    src += p.source + '\n';
    tgt += p.target + '\n';
    meta += std::string(to_string(p.provenance)) + '\n';
  }
  AtomicWriteSet files;
  files.add(with_suffix(prefix, ".src"), src);
  files.add(with_suffix(prefix, ".tgt"), tgt);
  if (with_meta) files.add(with_suffix(prefix, ".meta"), meta);
  files.commit();
}

/// Reads a corpus; pairs default to genuine when no .meta file exists.
inline ParallelCorpus read_corpus(const std::filesystem::path& prefix) {
  auto src_path = with_suffix(prefix, ".src");
  auto tgt_path = with_suffix(prefix, ".tgt");
  auto meta_path = with_suffix(prefix, ".meta");
  auto src = text::read_lines(src_path);
  auto tgt = text::read_lines(tgt_path);
  if (src.size() != tgt.size()) {
    throw AlignmentError(src_path.string() + " has " + std::to_string(src.size()) + " lines, " +
                         tgt_path.string() + " has " + std::to_string(tgt.size()));
  }
  std::vector<Segment> meta;
  if (std::filesystem::exists(meta_path)) {
    meta = text::read_lines(meta_path);
    if (meta.size() != src.size()) {
      throw AlignmentError(meta_path.string() + " has " + std::to_string(meta.size()) +
                           " lines, expected " + std::to_string(src.size()));
    }
  }
  ParallelCorpus c;
  for (std::size_t i = 0; i < src.size(); ++i) {
    c.pairs.push_back({src[i], tgt[i], meta.empty() ? Provenance::Genuine : parse_provenance(meta[i])});
  }
  return c;
}

}  // namespace mbrforge::selftrain
