// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Prompt layouts for LLM post-editing of chat translations.
 *
 * Streaming (history only, references of earlier turns visible):
 *
 *     Natural English: <src1>, Translated German: <mt1>, Natural German: <ref1>
 *     ...
 *     Translate the following sentence into German with a style bias towards Natural:
 *     Natural English: <srcN>, Translated German: <mtN>, Natural German: <refN>
 *
 * Context-aware (window of neighbouring turns with machine translations):
 *
 *     Natural English: <src1>, Translated German: <mt1>
 *     ...
 *     Translate the following sentence into German with a style bias towards Natural:
 *     Natural English: <srcN>, Natural German: <refN>
 *
 * Exactly one space follows every colon. The prompt text stops right after
 * the final "Natural <lang>: " label; the reference is the completion.
 */

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mbrforge/error.hpp"
#include "mbrforge/selftrain.hpp"
#include "mbrforge/text.hpp"

namespace mbrforge::promptgen {

enum class Speaker { Customer, Agent };

inline std::string_view to_string(Speaker s) { return s == Speaker::Customer ? "customer" : "agent"; }

inline Speaker parse_speaker(std::string_view s) {
  if (s == "customer") return Speaker::Customer;
  if (s == "agent") return Speaker::Agent;
  throw DataError("unknown speaker '" + std::string(s) + "'");
}

struct ChatTurn {
  Speaker speaker = Speaker::Customer;
  std::string src_lang;
  std::string tgt_lang;
  Segment source;
  Segment mt;
  std::optional<Segment> reference;
  long long turn_index = 0;
};

struct ChatDocument {
  std::string doc_id;
  std::vector<ChatTurn> turns;
};

struct RenderedPrompt {
  std::string text;
  std::string completion;

  friend bool operator==(const RenderedPrompt&, const RenderedPrompt&) = default;
};

inline void validate_turn(const ChatTurn& t) {
  auto where = [&] { return "turn " + std::to_string(t.turn_index) + ": "; };
  if (t.src_lang.empty() || t.tgt_lang.empty()) throw DataError(where() + "missing language name");
  if (t.src_lang == t.tgt_lang) throw DataError(where() + "source and target language are equal");
  if (t.source.empty()) throw DataError(where() + "empty source");
  for (const std::string* s : {&t.src_lang, &t.tgt_lang, &t.source, &t.mt}) {
    if (s->find('\n') != std::string::npos) throw DataError(where() + "field contains a line break");
  }
  if (t.reference && t.reference->find('\n') != std::string::npos) {
    throw DataError(where() + "reference contains a line break");
  }
}

inline void validate_document(const ChatDocument& doc) {
  if (doc.turns.empty()) throw DataError("document '" + doc.doc_id + "' has no turns");
  for (const auto& t : doc.turns) validate_turn(t);
}

inline std::string instruction_line(std::string_view tgt_lang) {
  return "Translate the following sentence into " + std::string(tgt_lang) +
         " with a style bias towards Natural:";
}

namespace detail {

inline void check_index(const ChatDocument& doc, std::size_t index) {
  if (index >= doc.turns.size()) {
    throw DataError("turn index " + std::to_string(index) + " out of range for document '" +
                    doc.doc_id + "' with " + std::to_string(doc.turns.size()) + " turns");
  }
}

inline std::string natural_translated(const ChatTurn& t) {
  return "Natural " + t.src_lang + ": " + t.source + ", Translated " + t.tgt_lang + ": " + t.mt;
}

}  // namespace detail

/// Streaming prompt for turn `index` with up to `k_history` earlier turns.
inline RenderedPrompt render_stream(const ChatDocument& doc, std::size_t index,
                                    std::size_t k_history) {
  detail::check_index(doc, index);
  const std::size_t first = index > k_history ? index - k_history : 0;
  RenderedPrompt out;
  for (std::size_t i = first; i < index; ++i) {
    const auto& h = doc.turns[i];
    if (!h.reference) {
      throw DataError("document '" + doc.doc_id + "': history turn " + std::to_string(i) +
                      " has no reference, which the streaming format requires");
    }
    out.text += detail::natural_translated(h) + ", Natural " + h.tgt_lang + ": " + *h.reference + "\n";
  }
  const auto& q = doc.turns[index];
  out.text += instruction_line(q.tgt_lang) + "\n";
  out.text += detail::natural_translated(q) + ", Natural " + q.tgt_lang + ": ";
  out.completion = q.reference.value_or("");
  return out;
}

/// Context-aware prompt for turn `index` over the window
/// [index - before, index + after], clipped at the document edges.
inline RenderedPrompt render_context(const ChatDocument& doc, std::size_t index, std::size_t before,
                                     std::size_t after, bool include_query = true) {
  detail::check_index(doc, index);
  const std::size_t first = index > before ? index - before : 0;
  const std::size_t last = std::min(doc.turns.size() - 1, index + std::min(after, doc.turns.size()));
  RenderedPrompt out;
  for (std::size_t i = first; i <= last; ++i) {
    if (i == index && !include_query) continue;
    out.text += detail::natural_translated(doc.turns[i]) + "\n";
  }
  const auto& q = doc.turns[index];
  out.text += instruction_line(q.tgt_lang) + "\n";
  out.text += "Natural " + q.src_lang + ": " + q.source + ", Natural " + q.tgt_lang + ": ";
  out.completion = q.reference.value_or("");
  return out;
}

struct Demo {
  Segment source;
  Segment reference;
};

inline constexpr std::size_t kDefaultShots = 5;

/// Picks k demonstrations: the first k in pool order, or k drawn by a
/// seeded shuffle of the pool.
inline std::vector<Demo> select_demos(std::span<const Demo> pool, std::size_t k,
                                      std::optional<std::uint64_t> seed = std::nullopt) {
  if (pool.size() < k) {
    throw DataError("few-shot prompt needs k=" + std::to_string(k) + " demonstrations, only " +
                    std::to_string(pool.size()) + " available");
  }
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (seed) selftrain::seeded_shuffle(order, *seed);
  std::vector<Demo> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(pool[order[i]]);
  return out;
}

/// k-shot prompt built from the first k demos.
inline RenderedPrompt render_fewshot(std::span<const Demo> demos, std::string_view query_source,
                                     std::string_view src_lang, std::string_view tgt_lang,
                                     std::size_t k = kDefaultShots) {
  if (demos.size() < k) {
    throw DataError("few-shot prompt needs k=" + std::to_string(k) + " demonstrations, only " +
                    std::to_string(demos.size()) + " available");
  }
  RenderedPrompt out;
  const std::string sl(src_lang), tl(tgt_lang);
  for (std::size_t i = 0; i < k; ++i) {
    out.text += sl + ": " + demos[i].source + "\n" + tl + ": " + demos[i].reference + "\n\n";
  }
  out.text += sl + ": " + std::string(query_source) + "\n" + tl + ": ";
  return out;
}

// --------------------------------------------------------------------------
// Parsing rendered prompts back
// --------------------------------------------------------------------------

struct ParsedLine {
  std::string src_lang;
  std::string source;
  std::optional<std::string> mt_lang;
  std::optional<std::string> mt;
  std::optional<std::string> natural_lang;
  std::optional<std::string> natural;  // text after the trailing "Natural <lang>: "
};

struct ParsedPrompt {
  std::vector<ParsedLine> context;
  std::string instruction_lang;
  ParsedLine query;
};

namespace detail {

/// Splits "Natural L: a, Translated M: b, Natural N: c" style lines.
inline ParsedLine parse_line(std::string_view line) {
  auto fail = [&] { throw DataError("unrecognised prompt line '" + std::string(line) + "'"); };
  constexpr std::string_view kNatural = "Natural ";
  if (line.substr(0, kNatural.size()) != kNatural) fail();
  line.remove_prefix(kNatural.size());
  ParsedLine out;
  auto colon = line.find(": ");
  if (colon == std::string_view::npos) fail();
  out.src_lang = std::string(line.substr(0, colon));
  line.remove_prefix(colon + 2);

  constexpr std::string_view kTrans = ", Translated ";
  constexpr std::string_view kNat2 = ", Natural ";
  auto take_labelled = [&](std::string_view label, std::optional<std::string>& lang) {
    line.remove_prefix(label.size());
    auto c = line.find(": ");
    if (c == std::string_view::npos) fail();
    lang = std::string(line.substr(0, c));
    line.remove_prefix(c + 2);
  };
  auto t = line.find(kTrans);
  if (t != std::string_view::npos) {
    out.source = std::string(line.substr(0, t));
    line.remove_prefix(t);
    take_labelled(kTrans, out.mt_lang);
    auto n = line.find(kNat2);
    out.mt = std::string(line.substr(0, n));
    if (n == std::string_view::npos) return out;
    line.remove_prefix(n);
  } else {
    auto n = line.find(kNat2);
    if (n == std::string_view::npos) fail();
    out.source = std::string(line.substr(0, n));
    line.remove_prefix(n);
  }
  take_labelled(kNat2, out.natural_lang);
  out.natural = std::string(line);
  return out;
}

}  // namespace detail

/// Parses a streaming or context-aware prompt (text plus completion).
inline ParsedPrompt parse_prompt(std::string_view full) {
  auto lines = text::split_lines(full);
  if (lines.size() < 2) throw DataError("prompt has fewer than two lines");
  constexpr std::string_view kInstrHead = "Translate the following sentence into ";
  constexpr std::string_view kInstrTail = " with a style bias towards Natural:";
  const auto& instr = lines[lines.size() - 2];
  if (instr.size() < kInstrHead.size() + kInstrTail.size() ||
      std::string_view(instr).substr(0, kInstrHead.size()) != kInstrHead ||
      std::string_view(instr).substr(instr.size() - kInstrTail.size()) != kInstrTail) {
    throw DataError("missing instruction line");
  }
  ParsedPrompt out;
  out.instruction_lang =
      instr.substr(kInstrHead.size(), instr.size() - kInstrHead.size() - kInstrTail.size());
  for (std::size_t i = 0; i + 2 < lines.size(); ++i) out.context.push_back(detail::parse_line(lines[i]));
  out.query = detail::parse_line(lines.back());
  return out;
}

// --------------------------------------------------------------------------
// Chat document records (JSON lines)
// --------------------------------------------------------------------------

/// One JSON object per line with doc_id, turn_index, speaker, src_lang,
/// tgt_lang, source, mt and an optional reference. Documents keep their
/// first-appearance order; turns are ordered by turn_index.
inline std::vector<ChatDocument> parse_chat_records(std::string_view buffer,
                                                    const std::string& origin = "<input>") {
  std::vector<ChatDocument> docs;
  std::map<std::string, std::size_t> by_id;
  auto lines = text::split_lines(buffer);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    const auto where = origin + ":" + std::to_string(ln + 1) + ": ";
    if (text::is_blank(lines[ln])) continue;
    if (!text::is_valid_utf8(lines[ln])) throw DataError(where + "invalid UTF-8");
    ChatTurn turn;
    std::string doc_id;
    try {
      auto j = nlohmann::json::parse(lines[ln]);
      if (!j.is_object()) throw DataError("record is not a JSON object");
      const auto& id = j.at("doc_id");
      doc_id = id.is_string() ? id.get<std::string>() : id.dump();
      turn.turn_index = j.at("turn_index").get<long long>();
      turn.speaker = parse_speaker(j.at("speaker").get<std::string>());
      turn.src_lang = j.at("src_lang").get<std::string>();
      turn.tgt_lang = j.at("tgt_lang").get<std::string>();
      turn.source = j.at("source").get<std::string>();
      turn.mt = j.at("mt").get<std::string>();
      if (auto it = j.find("reference"); it != j.end() && !it->is_null()) {
        turn.reference = it->get<std::string>();
      }
      validate_turn(turn);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + e.what());
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    }
    auto [it, fresh] = by_id.emplace(doc_id, docs.size());
    if (fresh) docs.push_back({doc_id, {}});
    docs[it->second].turns.push_back(std::move(turn));
  }
  for (auto& d : docs) {
    std::stable_sort(d.turns.begin(), d.turns.end(),
                     [](const ChatTurn& a, const ChatTurn& b) { return a.turn_index < b.turn_index; });
    for (std::size_t i = 1; i < d.turns.size(); ++i) {
      if (d.turns[i].turn_index == d.turns[i - 1].turn_index) {
        throw DataError(origin + ": document '" + d.doc_id + "' repeats turn_index " +
                        std::to_string(d.turns[i].turn_index));
      }
    }
  }
  return docs;
}

inline std::vector<ChatDocument> load_chat_records(const std::filesystem::path& path) {
  return parse_chat_records(text::read_file(path), path.string());
}

inline std::string to_record(const ChatTurn& t, const std::string& doc_id) {
  nlohmann::json j{{"doc_id", doc_id},     {"turn_index", t.turn_index},
                   {"speaker", to_string(t.speaker)}, {"src_lang", t.src_lang},
                   {"tgt_lang", t.tgt_lang}, {"source", t.source},
                   {"mt", t.mt}};
  if (t.reference) j["reference"] = *t.reference;
  return j.dump();
}

}  // namespace mbrforge::promptgen
