// SPDX-License-Identifier: Apache-2.0

// mbrforge: MBR selection, corpus building, checkpoint utilities and prompt
// rendering for chat translation pipelines.

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "mbrforge/atomic_write.hpp"
#include "mbrforge/bridge.hpp"
#include "mbrforge/checkpoint.hpp"
#include "mbrforge/error.hpp"
#include "mbrforge/mbr.hpp"
#include "mbrforge/metrics.hpp"
#include "mbrforge/promptgen.hpp"
#include "mbrforge/selftrain.hpp"
#include "mbrforge/tensor_store.hpp"
#include "mbrforge/text.hpp"

namespace fs = std::filesystem;
using namespace mbrforge;

namespace {

struct GlobalOptions {
  std::size_t workers = 1;
  std::optional<std::uint64_t> seed;
  int verbosity = 0;
};

void log(const GlobalOptions& g, const std::string& msg) {
  if (g.verbosity > 0) std::cerr << "mbrforge: " << msg << '\n';
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

/// Runs fn(i) for i in [0, n) on `workers` threads.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (auto i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// --------------------------------------------------------------------------
// eval
// --------------------------------------------------------------------------

struct EvalOptions {
  std::string hyp, ref;
  std::string metric = "bleu";
  bool sentence_level = false;
  std::string tokenize = "punct";
  int bleu_order = 4;
  std::string smoothing = "none";
  double epsilon = 0.1;
  int chrf_order = 6;
  double chrf_beta = 2.0;
};

metrics::TokenScheme token_scheme(const std::string& name) {
  return name == "whitespace" ? metrics::TokenScheme::Whitespace
                              : metrics::TokenScheme::PunctuationSplit;
}

void run_eval(const EvalOptions& o, const GlobalOptions& g) {
  auto hyps = text::read_lines(o.hyp);
  auto refs = text::read_lines(o.ref);
  if (hyps.size() != refs.size()) {
    throw AlignmentError("hypothesis file " + o.hyp + " has " + std::to_string(hyps.size()) +
                         " lines, reference file " + o.ref + " has " +
                         std::to_string(refs.size()));
  }
  const auto smoothing = o.smoothing == "add-k" ? metrics::Smoothing::add_k(o.epsilon)
                                                : metrics::Smoothing::none();
  const auto scheme = token_scheme(o.tokenize);
  std::string out;
  if (o.sentence_level) {
    std::vector<double> scores(hyps.size());
    parallel_for(hyps.size(), g.workers, [&](std::size_t i) {
      if (o.metric == "bleu") {
        scores[i] = metrics::sentence_bleu(metrics::tokenize(hyps[i], scheme),
                                           metrics::tokenize(refs[i], scheme), o.bleu_order,
                                           smoothing)
                        .value;
      } else {
        scores[i] = metrics::sentence_chrf(hyps[i], refs[i], o.chrf_order, o.chrf_beta).value;
      }
    });
    for (double s : scores) out += fixed(s, 2) + "\n";
  } else {
    double value;
    if (o.metric == "bleu") {
      std::vector<metrics::TokenSequence> h, r;
      for (const auto& s : hyps) h.push_back(metrics::tokenize(s, scheme));
      for (const auto& s : refs) r.push_back(metrics::tokenize(s, scheme));
      value = metrics::corpus_bleu(std::span<const metrics::TokenSequence>(h),
                                   std::span<const metrics::TokenSequence>(r), o.bleu_order,
                                   smoothing)
                  .value;
    } else {
      value = metrics::corpus_chrf(hyps, refs, o.chrf_order, o.chrf_beta).value;
    }
    out = fixed(value, 2) + "\n";
  }
  std::cout << out;
}

// --------------------------------------------------------------------------
// mbr
// --------------------------------------------------------------------------

struct MbrOptions {
  std::string src;
  std::vector<std::string> cands;
  std::string utility = "chrf";
  std::string external_cmd;
  bool exclude_self = false;
  bool symmetric = false;
  std::string out;
  std::string matrix_out;
  std::string indices_out;
  std::string tokenize = "punct";
  int bleu_order = 4;
  double epsilon = 0.1;
  int chrf_order = 6;
  double chrf_beta = 2.0;
  std::size_t batch_size = 32;
  long timeout_ms = 60000;
  bool restart = false;
};

void run_mbr(const MbrOptions& o, const GlobalOptions& g) {
  mbr::UtilitySpec spec;
  if (o.utility == "bleu") {
    spec = mbr::UtilitySpec::bleu();
    spec.bleu_order = o.bleu_order;
    spec.bleu_smoothing = metrics::Smoothing::add_k(o.epsilon);
    spec.bleu_tokens = token_scheme(o.tokenize);
  } else if (o.utility == "chrf") {
    spec = mbr::UtilitySpec::chrf();
    spec.chrf_order = o.chrf_order;
    spec.chrf_beta = o.chrf_beta;
  } else {
    if (o.external_cmd.empty()) throw UsageError("--utility external requires --external-cmd");
    if (o.src.empty()) throw UsageError("--utility external requires --src");
    auto cfg = bridge::BridgeConfig::shell(o.external_cmd);
    cfg.batch_size = o.batch_size;
    cfg.timeout = std::chrono::milliseconds(o.timeout_ms);
    cfg.restart_on_failure = o.restart;
    if (cfg.batch_size == 0 || cfg.batch_size > bridge::BridgeConfig::kMaxBatchSize) {
      throw UsageError("--batch-size must be in [1, " +
                       std::to_string(bridge::BridgeConfig::kMaxBatchSize) + "]");
    }
    spec = mbr::UtilitySpec::external(cfg);
  }
  spec.include_self = !o.exclude_self;
  spec.symmetric = o.symmetric;
  spec.validate();

  std::vector<fs::path> paths(o.cands.begin(), o.cands.end());
  std::optional<fs::path> src;
  if (!o.src.empty()) src = o.src;
  auto set = mbr::load_candidates(paths, src);
  log(g, "mbr: " + std::to_string(set.num_segments()) + " segments x " +
             std::to_string(set.num_systems()) + " systems, " + std::to_string(g.workers) +
             " worker(s)");

  const bool keep = !o.matrix_out.empty();
  auto sel = mbr::mbr_decode(set, spec, g.workers, keep);

  for (const auto& s : sel.chosen) {
    if (s.find('\n') != std::string::npos) throw DataError("selected segment contains a line break");
  }
  AtomicWriteSet files;
  files.add(o.out, text::join_lines(sel.chosen));
  if (keep) files.add(o.matrix_out, mbr::format_matrix_dump(sel.matrices));
  if (!o.indices_out.empty()) {
    std::string idx;
    for (std::size_t i = 0; i < sel.indices.size(); ++i) {
      idx += std::to_string(sel.indices[i]) + "\t" + fixed(sel.expected_utilities[i], 6) + "\n";
    }
    files.add(o.indices_out, idx);
  }
  files.commit();
}

// --------------------------------------------------------------------------
// corpora
// --------------------------------------------------------------------------

struct FilterOptions {
  double max_ratio = 3.0;
  std::size_t min_tokens = 1;
  std::size_t max_tokens = 250;
  bool dedup = false;

  selftrain::FilterConfig config() const {
    selftrain::FilterConfig f;
    f.max_length_ratio = max_ratio;
    f.min_tokens = min_tokens;
    f.max_tokens = max_tokens;
    f.dedup = dedup;
    f.validate();
    return f;
  }
};

void add_filter_flags(CLI::App* cmd, FilterOptions& f) {
  cmd->add_option("--max-ratio", f.max_ratio, "Drop pairs whose token-length ratio exceeds this")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--min-tokens", f.min_tokens, "Drop pairs with a side shorter than this");
  cmd->add_option("--max-tokens", f.max_tokens, "Drop pairs with a side longer than this");
  cmd->add_flag("--dedup", f.dedup, "Drop repeated (source, target) pairs");
}

struct BuildOptions {
  std::string mono, synthetic, out_prefix;
  std::optional<std::string> tag;
  bool no_meta = false;
  FilterOptions filter;
};

void run_build_st(const BuildOptions& o, const GlobalOptions& g) {
  auto filter = o.filter.config();
  auto sources = text::read_lines(o.mono);
  auto translations = text::read_lines(o.synthetic);
  auto corpus = selftrain::build_st_corpus(sources, translations, filter);
  log(g, "build-st: kept " + std::to_string(corpus.size()) + " of " +
             std::to_string(sources.size()) + " pairs");
  selftrain::write_corpus(corpus, o.out_prefix, !o.no_meta);
}

void run_build_bt(const BuildOptions& o, const GlobalOptions& g) {
  auto filter = o.filter.config();
  auto targets = text::read_lines(o.mono);
  auto back = text::read_lines(o.synthetic);
  auto corpus = selftrain::build_bt_corpus(targets, back, o.tag, filter);
  log(g, "build-bt: kept " + std::to_string(corpus.size()) + " of " +
             std::to_string(targets.size()) + " pairs");
  selftrain::write_corpus(corpus, o.out_prefix, !o.no_meta);
}

struct MergeOptions {
  std::vector<std::string> inputs;
  std::string out_prefix;
  bool no_meta = false;
};

void run_merge(const MergeOptions& o, const GlobalOptions& g) {
  std::vector<selftrain::ParallelCorpus> corpora;
  for (const auto& p : o.inputs) corpora.push_back(selftrain::read_corpus(p));
  auto merged = selftrain::merge_corpora(corpora, g.seed);
  log(g, "merge: " + std::to_string(merged.size()) + " pairs");
  selftrain::write_corpus(merged, o.out_prefix, !o.no_meta);
}

// --------------------------------------------------------------------------
// checkpoints
// --------------------------------------------------------------------------

struct AvgOptions {
  std::vector<std::string> inputs;
  std::string out;
};

void run_avg(const AvgOptions& o, const GlobalOptions& g) {
  std::vector<checkpoint::TensorStore> stores;
  for (const auto& p : o.inputs) stores.push_back(checkpoint::load(p));
  log(g, "avg: averaging " + std::to_string(stores.size()) + " checkpoint(s)");
  checkpoint::save(checkpoint::average_checkpoints(stores), o.out);
}

struct LoraOptions {
  std::string base, adapter, out;
  std::optional<double> alpha;
};

void run_lora(const LoraOptions& o, const GlobalOptions& g) {
  auto base = checkpoint::load(o.base);
  auto store = checkpoint::load(o.adapter);
  // alpha defaults to the rank, i.e. an unscaled update
  auto adapter = checkpoint::adapter_from_store(store, 1.0);
  adapter.alpha = o.alpha ? *o.alpha : static_cast<double>(adapter.rank);
  if (!(adapter.alpha > 0.0)) throw UsageError("--alpha must be positive");
  log(g, "lora-merge: " + std::to_string(adapter.targets.size()) + " target(s), rank " +
             std::to_string(adapter.rank) + ", alpha " + fixed(adapter.alpha, 4));
  checkpoint::save(checkpoint::lora_merge(base, adapter), o.out);
}

// --------------------------------------------------------------------------
// prompts
// --------------------------------------------------------------------------

struct PromptOptions {
  std::string mode = "stream";
  std::string doc;
  std::string demos;
  std::optional<std::size_t> k;
  std::size_t before = 2;
  std::size_t after = 2;
  bool exclude_query = false;
  std::string format = "jsonl";
  std::string separator = "====";
  std::string out;
};

constexpr std::size_t kDefaultStreamHistory = 3;

void run_prompts(const PromptOptions& o, const GlobalOptions& g) {
  using namespace promptgen;
  auto docs = load_chat_records(o.doc);
  std::vector<ChatDocument> demo_docs = o.demos.empty() ? docs : load_chat_records(o.demos);

  std::string out;
  std::size_t count = 0;
  auto emit = [&](const ChatDocument& d, const ChatTurn& t, const RenderedPrompt& p) {
    ++count;
    if (o.format == "jsonl") {
      nlohmann::json j{{"doc_id", d.doc_id},
                       {"turn_index", t.turn_index},
                       {"text", p.text},
                       {"completion", p.completion}};
      out += j.dump() + "\n";
    } else {
      out += p.text + p.completion + "\n" + o.separator + "\n";
    }
  };

  for (const auto& d : docs) {
    for (std::size_t i = 0; i < d.turns.size(); ++i) {
      const auto& t = d.turns[i];
      if (o.mode == "stream") {
        emit(d, t, render_stream(d, i, o.k.value_or(kDefaultStreamHistory)));
      } else if (o.mode == "context") {
        emit(d, t, render_context(d, i, o.before, o.after, !o.exclude_query));
      } else {
        std::vector<Demo> pool;
        for (const auto& dd : demo_docs) {
          for (const auto& c : dd.turns) {
            if (!c.reference || c.src_lang != t.src_lang || c.tgt_lang != t.tgt_lang) continue;
            if (dd.doc_id == d.doc_id && c.turn_index == t.turn_index) continue;
            pool.push_back({c.source, *c.reference});
          }
        }
        auto k = o.k.value_or(kDefaultShots);
        if (pool.size() < k) {
          throw DataError("document '" + d.doc_id + "' turn " + std::to_string(t.turn_index) +
                          ": few-shot prompt needs k=" + std::to_string(k) + " " + t.src_lang +
                          "->" + t.tgt_lang + " demonstrations, only " +
                          std::to_string(pool.size()) + " available");
        }
        auto demos = select_demos(pool, k, g.seed);
        auto p = render_fewshot(demos, t.source, t.src_lang, t.tgt_lang, k);
        p.completion = t.reference.value_or("");
        emit(d, t, p);
      }
    }
  }
  log(g, "prompts: rendered " + std::to_string(count) + " prompt(s)");
  write_file_atomic(o.out, out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mbrforge: MBR selection, synthetic corpora, checkpoint tools and prompt rendering"};
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->always_capture_default();

  GlobalOptions g;
  app.add_option("--workers", g.workers, "Worker threads for mbr and eval")
      ->envname("MBRFORGE_WORKERS")
      ->check(CLI::PositiveNumber);
  app.add_option("--seed", g.seed, "Seed for merge shuffling and random few-shot selection");
  app.add_flag("-v,--verbose", g.verbosity, "Print progress to stderr");

  EvalOptions eval;
  auto* cmd_eval = app.add_subcommand("eval", "Score hypotheses against references");
  cmd_eval->add_option("--hyp", eval.hyp, "Hypothesis file")->required();
  cmd_eval->add_option("--ref", eval.ref, "Reference file")->required();
  cmd_eval->add_option("--metric", eval.metric, "Metric")->check(CLI::IsMember({"bleu", "chrf"}));
  cmd_eval->add_flag("--sentence-level", eval.sentence_level, "One score per line");
  cmd_eval->add_option("--tokenize", eval.tokenize, "BLEU tokenizer")
      ->check(CLI::IsMember({"whitespace", "punct"}));
  cmd_eval->add_option("--bleu-order", eval.bleu_order, "BLEU max n-gram order")->check(CLI::PositiveNumber);
  cmd_eval->add_option("--smoothing", eval.smoothing, "BLEU smoothing")
      ->check(CLI::IsMember({"none", "add-k"}));
  cmd_eval->add_option("--epsilon", eval.epsilon, "Add-k smoothing constant")->check(CLI::PositiveNumber);
  cmd_eval->add_option("--chrf-order", eval.chrf_order, "chrF character n-gram order")->check(CLI::PositiveNumber);
  cmd_eval->add_option("--chrf-beta", eval.chrf_beta, "chrF recall weight")->check(CLI::PositiveNumber);

  MbrOptions mbr_opts;
  auto* cmd_mbr = app.add_subcommand("mbr", "Select one candidate per segment by MBR");
  cmd_mbr->add_option("--src", mbr_opts.src, "Source file (required for external utilities)");
  cmd_mbr->add_option("--cand", mbr_opts.cands, "Candidate file, one per system (repeat)")
      ->required();
  cmd_mbr->add_option("--utility", mbr_opts.utility, "Pairwise utility")
      ->check(CLI::IsMember({"bleu", "chrf", "external"}));
  cmd_mbr->add_option("--external-cmd", mbr_opts.external_cmd, "Scorer command line (run via /bin/sh)");
  cmd_mbr->add_flag("--exclude-self,!--include-self", mbr_opts.exclude_self,
                    "Leave each candidate out of its own reference set");
  cmd_mbr->add_flag("--symmetric", mbr_opts.symmetric, "Score each unordered pair once");
  cmd_mbr->add_option("--out", mbr_opts.out, "Selected translations")->required();
  cmd_mbr->add_option("--matrix-out", mbr_opts.matrix_out, "Utility matrix dump (TSV)");
  cmd_mbr->add_option("--indices-out", mbr_opts.indices_out, "Chosen index and expected utility per line");
  cmd_mbr->add_option("--tokenize", mbr_opts.tokenize, "BLEU utility tokenizer")
      ->check(CLI::IsMember({"whitespace", "punct"}));
  cmd_mbr->add_option("--bleu-order", mbr_opts.bleu_order, "BLEU utility n-gram order")->check(CLI::PositiveNumber);
  cmd_mbr->add_option("--epsilon", mbr_opts.epsilon, "BLEU utility add-k smoothing")->check(CLI::PositiveNumber);
  cmd_mbr->add_option("--chrf-order", mbr_opts.chrf_order, "chrF utility n-gram order")->check(CLI::PositiveNumber);
  cmd_mbr->add_option("--chrf-beta", mbr_opts.chrf_beta, "chrF utility beta")->check(CLI::PositiveNumber);
  cmd_mbr->add_option("--batch-size", mbr_opts.batch_size, "Requests per scorer batch");
  cmd_mbr->add_option("--timeout-ms", mbr_opts.timeout_ms, "Scorer response timeout")->check(CLI::PositiveNumber);
  cmd_mbr->add_flag("--restart-on-failure", mbr_opts.restart, "Restart a crashed scorer once per batch");

  BuildOptions st;
  auto* cmd_st = app.add_subcommand("build-st", "Build a self-training corpus (source -> translation)");
  cmd_st->add_option("--src", st.mono, "Monolingual source file")->required();
  cmd_st->add_option("--hyp", st.synthetic, "Forward translations, e.g. mbr output")
      ->required();
  cmd_st->add_option("--out-prefix", st.out_prefix, "Writes <prefix>.src/.tgt/.meta")->required();
  cmd_st->add_flag("--no-meta", st.no_meta, "Do not write the .meta provenance file");
  add_filter_flags(cmd_st, st.filter);

  BuildOptions bt;
  auto* cmd_bt = app.add_subcommand("build-bt", "Build a back-translation corpus (synthetic -> target)");
  cmd_bt->add_option("--tgt", bt.mono, "Monolingual target file")->required();
  cmd_bt->add_option("--back", bt.synthetic, "Back-translations of --tgt")
      ->required();
  cmd_bt->add_option("--tag", bt.tag, "Prefix each synthetic source with this token (e.g. <BT>)");
  cmd_bt->add_option("--out-prefix", bt.out_prefix, "Writes <prefix>.src/.tgt/.meta")->required();
  cmd_bt->add_flag("--no-meta", bt.no_meta, "Do not write the .meta provenance file");
  add_filter_flags(cmd_bt, bt.filter);

  MergeOptions merge;
  auto* cmd_merge = app.add_subcommand("merge", "Concatenate corpora, shuffled when --seed is given");
  cmd_merge->add_option("--in", merge.inputs, "Corpus prefix to read (repeat)")->required();
  cmd_merge->add_option("--out-prefix", merge.out_prefix, "Writes <prefix>.src/.tgt/.meta")->required();
  cmd_merge->add_flag("--no-meta", merge.no_meta, "Do not write the .meta provenance file");

  AvgOptions avg;
  auto* cmd_avg = app.add_subcommand(
      "avg", "Average TSF checkpoints elementwise (typically the last or best 5)");
  cmd_avg->add_option("--inputs", avg.inputs, "TSF checkpoints")->required();
  cmd_avg->add_option("--out", avg.out, "Averaged TSF output")->required();

  LoraOptions lora;
  auto* cmd_lora = app.add_subcommand("lora-merge", "Merge a LoRA adapter into a base TSF model");
  cmd_lora->add_option("--base", lora.base, "Base TSF model")->required();
  cmd_lora->add_option("--adapter", lora.adapter, "Adapter TSF with <name>.lora_A / <name>.lora_B")
      ->required();
  cmd_lora->add_option("--alpha", lora.alpha, "LoRA alpha (default: the adapter rank)")
      ->check(CLI::PositiveNumber);
  cmd_lora->add_option("--out", lora.out, "Merged TSF output")->required();

  PromptOptions prompts;
  auto* cmd_prompts = app.add_subcommand("prompts", "Render LLM prompts from chat records");
  cmd_prompts->add_option("--mode", prompts.mode, "Prompt layout")
      ->check(CLI::IsMember({"stream", "context", "fewshot"}));
  cmd_prompts->add_option("--doc", prompts.doc, "Chat records (JSON lines)")
      ->required();
  cmd_prompts->add_option("--demos", prompts.demos, "Few-shot demonstration pool (default: --doc)");
  cmd_prompts->add_option("--k", prompts.k, "History turns (stream, default 3) or shots (fewshot, default 5)");
  cmd_prompts->add_option("--before", prompts.before, "Context turns before the query");
  cmd_prompts->add_option("--after", prompts.after, "Context turns after the query");
  cmd_prompts->add_flag("--exclude-query", prompts.exclude_query,
                        "Leave the query turn out of the context block");
  cmd_prompts->add_option("--format", prompts.format, "Output format")
      ->check(CLI::IsMember({"jsonl", "text"}));
  cmd_prompts->add_option("--separator", prompts.separator, "Record separator line in text format");
  cmd_prompts->add_option("--out", prompts.out, "Prompt output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ErrorKind::Usage);
  }

  try {
    if (cmd_eval->parsed()) run_eval(eval, g);
    else if (cmd_mbr->parsed()) run_mbr(mbr_opts, g);
    else if (cmd_st->parsed()) run_build_st(st, g);
    else if (cmd_bt->parsed()) run_build_bt(bt, g);
    else if (cmd_merge->parsed()) run_merge(merge, g);
    else if (cmd_avg->parsed()) run_avg(avg, g);
    else if (cmd_lora->parsed()) run_lora(lora, g);
    else if (cmd_prompts->parsed()) run_prompts(prompts, g);
  } catch (const Error& e) {
    std::cerr << "mbrforge: error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "mbrforge: error: " << e.what() << '\n';
    return static_cast<int>(ErrorKind::Io);
  }
  return 0;
}
