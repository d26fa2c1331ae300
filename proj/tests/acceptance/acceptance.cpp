// SPDX-License-Identifier: Apache-2.0

// Standalone acceptance suite: one PASS/FAIL line per criterion, non-zero
// exit status if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "../oracles.hpp"
#include "../test_util.hpp"
#include "mbrforge/bridge.hpp"
#include "mbrforge/checkpoint.hpp"
#include "mbrforge/mbr.hpp"
#include "mbrforge/metrics.hpp"
#include "mbrforge/promptgen.hpp"

using namespace mbrforge;
using Clock = std::chrono::steady_clock;

namespace {

/// Thrown by check() to abort a criterion with a diagnostic.
struct Failure {
  std::string what;
};

void check(bool ok, const std::string& what) {
  if (!ok) throw Failure{what};
}

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

int failures = 0;

void criterion(const std::string& name, const std::function<std::string()>& body) {
  auto start = Clock::now();
  std::string detail, status = "PASS";
  try {
    detail = body();
  } catch (const Failure& f) {
    status = "FAIL";
    detail = f.what;
  } catch (const std::exception& e) {
    status = "FAIL";
    detail = std::string("unexpected exception: ") + e.what();
  }
  if (status == "FAIL") ++failures;
  std::printf("%s  %-28s %s [%.2fs]\n", status.c_str(), name.c_str(), detail.c_str(),
              seconds_since(start));
  std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

oracle::Tokens ws(const std::string& s) { return text::split_whitespace(s); }

checkpoint::TensorStore random_store(std::mt19937_64& rng) {
  std::normal_distribution<float> v(0.0f, 1.0f);
  checkpoint::TensorStore s;
  for (auto [name, shape] : std::vector<std::pair<std::string, checkpoint::Shape>>{
           {"enc.w", {4, 3}}, {"enc.b", {3}}, {"dec.w", {2, 2, 5}}}) {
    std::vector<float> d(checkpoint::shape_elements(shape));
    for (auto& x : d) x = v(rng);
    s.add(name, shape, d);
  }
  return s;
}

std::vector<double> random_distribution(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(0.001, 1.0);
  std::vector<double> p(n);
  double sum = 0;
  for (auto& x : p) sum += (x = u(rng));
  for (auto& x : p) x /= sum;
  return p;
}

std::string cli(const std::string& args) {
  return testutil::sh_quote(MBRFORGE_CLI_PATH) + " " + args;
}

std::string q(const std::filesystem::path& p) { return testutil::sh_quote(p.string()); }

}  // namespace

int main() {
  criterion("results-disclaimer", [] {
    return std::string(
        "neural-metric and LLM results need trained models; not reproduced. "
        "Acceptance rests on the property/oracle criteria below");
  });

  criterion("mbr-oracle-equivalence", [] {
    std::mt19937_64 rng(20240601);
    std::uniform_int_distribution<std::size_t> n_dist(2, 5);
    auto start = Clock::now();
    std::size_t ties = 0;
    for (int inst = 0; inst < 1000; ++inst) {
      const auto n = n_dist(rng);
      std::vector<std::vector<Segment>> columns(n);
      std::vector<std::string> names, cands;
      for (std::size_t j = 0; j < n; ++j) {
        cands.push_back(testutil::random_sentence(rng, 8, 1));
        columns[j] = {cands.back()};
        names.push_back("sys" + std::to_string(j));
      }
      auto set = mbr::CandidateSet::from_columns(names, columns);
      const bool include_self = inst % 2 == 0;
      auto spec = mbr::UtilitySpec::chrf();
      spec.include_self = include_self;
      auto sel = mbr::mbr_decode(set, spec, 1, true);
      auto expected = oracle::mbr_index(
          cands, [](const std::string& h, const std::string& r) { return oracle::sentence_chrf(h, r); },
          include_self);
      check(sel.indices[0] == expected,
            "instance " + std::to_string(inst) + ": native " + std::to_string(sel.indices[0]) +
                " vs oracle " + std::to_string(expected));
      // the full matrix agrees too, not just the argmax
      const auto& m = sel.matrices[0];
      for (std::size_t c = 0; c < n; ++c)
        for (std::size_t r = 0; r < n; ++r)
          check(std::fabs(m.values[c][r] - oracle::sentence_chrf(cands[c], cands[r])) < 1e-9,
                "utility mismatch in instance " + std::to_string(inst));
      for (std::size_t c = 1; c < n; ++c) ties += m.row_means[c] == m.row_means[0];
    }
    double t = seconds_since(start);
    check(t < 30.0, "runtime " + fmt("%.2f", t) + "s exceeds 30s");
    return "1000/1000 exact index matches (" + std::to_string(ties) + " tied rows), " +
           fmt("%.2f", t) + "s";
  });

  criterion("metric-oracle-equivalence", [] {
    std::mt19937_64 rng(7);
    auto start = Clock::now();
    double worst = 0;
    std::vector<oracle::Tokens> hs, rs;
    std::vector<std::string> hc, rc;
    for (int i = 0; i < 500; ++i) {
      auto h = testutil::random_sentence(rng, 12), r = testutil::random_sentence(rng, 12);
      auto ht = ws(h), rt = ws(r);
      for (double eps : {-1.0, 0.1}) {
        auto sm = eps < 0 ? metrics::Smoothing::none() : metrics::Smoothing::add_k(eps);
        double d = std::fabs(metrics::sentence_bleu(ht, rt, 4, sm).value -
                             oracle::sentence_bleu(ht, rt, 4, eps));
        worst = std::max(worst, d);
        check(d <= 1e-9, "BLEU pair " + std::to_string(i) + " differs by " + fmt("%.3g", d));
      }
      auto hx = testutil::random_chars(rng, 30), rx = testutil::random_chars(rng, 30);
      for (const auto& [a, b] : {std::pair{h, r}, std::pair{hx, rx}}) {
        double d = std::fabs(metrics::sentence_chrf(a, b).value - oracle::sentence_chrf(a, b));
        worst = std::max(worst, d);
        check(d <= 1e-9, "chrF pair " + std::to_string(i) + " differs by " + fmt("%.3g", d));
      }
      hs.push_back(ht);
      rs.push_back(rt);
      hc.push_back(hx);
      rc.push_back(rx);
    }
    double dc = std::fabs(metrics::corpus_bleu(std::span<const metrics::TokenSequence>(hs),
                                               std::span<const metrics::TokenSequence>(rs))
                              .value -
                          oracle::corpus_bleu(hs, rs));
    double dx = std::fabs(metrics::corpus_chrf(hc, rc).value - oracle::corpus_chrf(hc, rc));
    check(dc <= 1e-9 && dx <= 1e-9, "corpus-level mismatch");
    worst = std::max({worst, dc, dx});
    double t = seconds_since(start);
    check(t < 10.0, "runtime " + fmt("%.2f", t) + "s exceeds 10s");
    return "500 pairs, max |diff| " + fmt("%.3g", worst) + ", " + fmt("%.2f", t) + "s";
  });

  criterion("argmax-invariance", [] {
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<std::size_t> n_dist(2, 8);
    std::uniform_real_distribution<double> u(0.0, 100.0);
    int checked = 0;
    for (int i = 0; i < 200; ++i) {
      const auto n = n_dist(rng);
      std::vector<std::vector<double>> m(n, std::vector<double>(n));
      for (auto& row : m)
        for (auto& v : row) v = u(rng);
      for (bool include_self : {true, false}) {
        auto base = mbr::summarize(0, m, include_self).best_index;
        for (double a : {0.5, 2.0, 10.0})
          for (double b : {-1.0, 0.0, 3.0}) {
            auto t = m;
            for (auto& row : t)
              for (auto& v : row) v = a * v + b;
            auto idx = mbr::summarize(0, t, include_self).best_index;
            check(idx == base, "matrix " + std::to_string(i) + " a=" + fmt("%g", a) +
                                   " b=" + fmt("%g", b) + " moved the argmax");
            ++checked;
          }
      }
    }
    return std::to_string(checked) + " transformed matrices, argmax unchanged";
  });

  criterion("checkpoint-algebra", [] {
    std::mt19937_64 rng(5);
    std::vector<checkpoint::TensorStore> stores;
    for (int i = 0; i < 5; ++i) stores.push_back(random_store(rng));
    auto avg = checkpoint::average_checkpoints(stores);
    double worst = 0;
    for (const auto& t : avg.tensors()) {
      for (std::size_t j = 0; j < t.data.size(); ++j) {
        double sum = 0;
        for (const auto& s : stores) sum += s.at(t.name).data[j];
        worst = std::max(worst, std::fabs(t.data[j] - sum / 5.0));
      }
    }
    check(worst <= 1e-6, "average differs from oracle by " + fmt("%.3g", worst));
    std::vector<checkpoint::TensorStore> same(5, stores[0]);
    check(checkpoint::serialize(checkpoint::average_checkpoints(same)) ==
              checkpoint::serialize(stores[0]),
          "averaging identical stores is not idempotent");
    testutil::TempDir dir;
    auto bytes = checkpoint::serialize(avg);
    checkpoint::save(avg, dir / "a.tsf");
    check(testutil::slurp(dir / "a.tsf") == bytes, "saved bytes differ from serialize()");
    check(checkpoint::serialize(checkpoint::load(dir / "a.tsf")) == bytes,
          "TSF round-trip is not byte-identical");
    return "max |diff| " + fmt("%.3g", worst) + ", idempotent, round-trip byte-identical";
  });

  criterion("lora-merge", [] {
    std::mt19937_64 rng(17);
    std::normal_distribution<float> v(0.0f, 1.0f);
    auto fill = [&](std::size_t n) {
      std::vector<float> x(n);
      for (auto& e : x) e = v(rng);
      return x;
    };
    const std::size_t d = 4, k = 3, r = 2;
    double worst = 0;
    for (int trial = 0; trial < 50; ++trial) {
      checkpoint::TensorStore base;
      base.add("w", {d, k}, fill(d * k));
      base.add("bias", {k}, fill(k));
      auto a = fill(r * k), b = fill(d * r);
      checkpoint::TensorStore zero;
      zero.add("w.lora_A", {r, k}, a);
      zero.add("w.lora_B", {d, r}, std::vector<float>(d * r, 0.0f));
      auto z = checkpoint::lora_merge(base, checkpoint::adapter_from_store(zero, 8.0));
      check(checkpoint::serialize(z) == checkpoint::serialize(base), "zero-B merge changed bytes");

      checkpoint::TensorStore ad;
      ad.add("w.lora_A", {r, k}, a);
      ad.add("w.lora_B", {d, r}, b);
      // alpha = r (unscaled) and alpha = 1; larger scales push |w| past 8,
      // where one float32 ulp alone exceeds the 1e-6 tolerance
      const double alpha = trial % 2 ? double(r) : 1.0;
      auto merged = checkpoint::lora_merge(base, checkpoint::adapter_from_store(ad, alpha));
      auto ba = oracle::matmul(b, a, d, r, k);
      for (std::size_t i = 0; i < d * k; ++i) {
        double expect = double(base.at("w").data[i]) + alpha / double(r) * ba[i];
        worst = std::max(worst, std::fabs(merged.at("w").data[i] - expect));
        check(merged.at("w").data[i] == static_cast<float>(expect), "merge is not correctly rounded");
      }
      check(merged.at("bias").data == base.at("bias").data, "untargeted tensor changed");
    }
    check(worst <= 1e-6, "merge differs from matmul oracle by " + fmt("%.3g", worst));
    return "zero-B byte-exact; 50 random merges, max |diff| " + fmt("%.3g", worst);
  });

  criterion("rdrop-penalty", [] {
    std::mt19937_64 rng(23);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
      auto pv = random_distribution(rng, 2 + i % 9);
      auto qv = random_distribution(rng, pv.size());
      checkpoint::ProbVector p(pv), qd(qv);
      check(std::fabs(checkpoint::rdrop_penalty(p, p)) <= 1e-9, "penalty(p, p) is not zero");
      double pq = checkpoint::rdrop_penalty(p, qd), qp = checkpoint::rdrop_penalty(qd, p);
      check(pq > 1e-9, "penalty of distinct distributions is not positive");
      check(pq == qp, "penalty is not symmetric");
      worst = std::max(worst, std::fabs(pq - oracle::symmetric_kl(pv, qv)));
      check(std::fabs(checkpoint::rdrop_loss(p, qd) - 5.0 * pq) <= 1e-12, "loss != 5 * penalty");
    }
    check(worst <= 1e-12, "penalty differs from formula by " + fmt("%.3g", worst));
    return "100 pairs, max |diff| " + fmt("%.3g", worst) + ", symmetric, zero iff p=q";
  });

  criterion("prompt-goldens", [] {
    testutil::TempDir dir;
    const std::string g = GOLDEN_DIR;
    const std::string doc = testutil::sh_quote(g + "/toy_doc.jsonl");
    const std::vector<std::pair<std::string, std::string>> runs = {
        {"--mode stream --k 3", "stream_k3.txt"},
        {"--mode context --before 2 --after 2", "context_b2a2.txt"},
        {"--mode fewshot --k 5 --demos " + testutil::sh_quote(g + "/toy_demos.jsonl"),
         "fewshot_k5.txt"}};
    for (const auto& [args, golden] : runs) {
      auto out = dir / golden;
      auto r = testutil::run(cli("prompts " + args + " --format text --doc " + doc + " --out " + q(out)));
      check(r.status == 0, golden + ": exit " + std::to_string(r.status) + ": " + r.out);
      check(testutil::slurp(out) == testutil::slurp(g + "/" + golden), golden + " differs from golden");
    }
    return "stream, context and 5-shot renders byte-identical";
  });

  criterion("bridge-protocol", [] {
    using namespace bridge;
    std::mt19937_64 rng(31);
    const std::string alphabet = "ab\t\n\\ n t\\\\x";
    std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1), len(0, 12);
    auto rand_field = [&] {
      std::string s;
      for (auto n = len(rng); n > 0; --n) s += alphabet[pick(rng)];
      return s;
    };
    for (int i = 0; i < 2000; ++i) {
      ScoreRequest r{rand_field(), rand_field(), rand_field()};
      auto line = encode_request(r);
      check(std::count(line.begin(), line.end(), '\n') == 1 && line.back() == '\n',
            "encoded request spans lines");
      auto back = decode_request(std::string_view(line).substr(0, line.size() - 1));
      check(back.src == r.src && back.mt == r.mt && back.ref == r.ref, "escaping round-trip failed");
    }
    std::vector<ScoreRequest> reqs;
    for (int i = 0; i < 200; ++i) reqs.push_back({"s\t" + std::to_string(i), std::to_string(i), "r\n"});
    for (std::size_t bs : {1u, 7u, 64u}) {
      BridgeConfig cfg;
      cfg.command = {FAKE_SCORER_PATH, "echo-index"};
      cfg.batch_size = bs;
      auto scores = score_batch(reqs, cfg);
      check(scores.size() == reqs.size(), "lost responses at batch size " + std::to_string(bs));
      for (std::size_t i = 0; i < scores.size(); ++i)
        check(scores[i] == double(i), "order broken at batch size " + std::to_string(bs));
    }
    // escaped fields reach the scorer intact: length counts decoded bytes
    BridgeConfig len_cfg;
    len_cfg.command = {FAKE_SCORER_PATH, "length"};
    check(score_batch(std::vector<ScoreRequest>{{"a\tb", "x\ny\\", "\\"}}, len_cfg)[0] == 30401,
          "fields altered on the wire");

    BridgeConfig garbage;
    garbage.command = {FAKE_SCORER_PATH, "garbage"};
    bool protocol = false;
    try {
      score_batch(reqs, garbage);
    } catch (const BridgeError& e) {
      protocol = e.reason() == BridgeError::Reason::Protocol;
    }
    check(protocol, "malformed response not reported as a protocol error");

    testutil::TempDir dir;
    BridgeConfig crash;
    crash.command = {FAKE_SCORER_PATH, "crash-once", "3", (dir / "marker").string()};
    crash.batch_size = 7;
    bool crashed = false;
    try {
      score_batch(reqs, crash);
    } catch (const BridgeError& e) {
      crashed = e.reason() == BridgeError::Reason::Crash;
    }
    check(crashed, "crash without restart not reported");
    std::filesystem::remove(dir / "marker");
    crash.restart_on_failure = true;
    std::vector<ScoreRequest> words;
    for (int i = 0; i < 20; ++i) words.push_back({"", std::string(2 * (i % 5) + 1, 'a'), ""});
    for (auto& w : words) {  // i%5+1 whitespace tokens
      std::string t;
      for (std::size_t c = 0; c < w.mt.size(); c += 2) t += t.empty() ? "a" : " a";
      w.mt = t;
    }
    BridgeClient client(crash);
    auto scores = client.score(words);
    check(client.restarts() == 1, "expected exactly one restart");
    for (std::size_t i = 0; i < words.size(); ++i)
      check(std::fabs(scores[i] - 0.1 * double(i % 5 + 1)) < 1e-12, "wrong score after recovery");
    return "2000 escape round-trips; order kept at batch 1/7/64; protocol error and crash recovery exercised";
  });

  criterion("end-to-end-pipeline", [] {
    testutil::TempDir dir;
    std::mt19937_64 rng(2024);
    std::string src;
    std::vector<std::vector<std::string>> cands(3);
    for (int i = 0; i < 20; ++i) src += testutil::random_sentence(rng, 8, 1) + "\n";
    testutil::write(dir / "src.txt", src);
    std::string cand_args;
    for (int f = 0; f < 3; ++f) {
      std::string body;
      for (int i = 0; i < 20; ++i) {
        cands[f].push_back(testutil::random_sentence(rng, 8, 1));
        body += cands[f].back() + "\n";
      }
      auto p = dir / ("cand" + std::to_string(f) + ".txt");
      testutil::write(p, body);
      cand_args += " " + q(p);
    }
    std::string corpus[2];
    int slot = 0;
    for (int workers : {1, 8}) {
      auto tag = std::to_string(workers);
      auto mbr_out = dir / ("mbr" + tag + ".txt");
      auto r1 = testutil::run(cli("--workers " + tag + " mbr --src " + q(dir / "src.txt") +
                                  " --cand" + cand_args + " --out " + q(mbr_out)));
      check(r1.status == 0, "mbr exit " + std::to_string(r1.status) + ": " + r1.out);
      auto prefix = dir / ("st" + tag);
      auto r2 = testutil::run(cli("build-st --src " + q(dir / "src.txt") + " --hyp " + q(mbr_out) +
                                  " --out-prefix " + q(prefix)));
      check(r2.status == 0, "build-st exit " + std::to_string(r2.status) + ": " + r2.out);
      auto s = text::split_lines(testutil::slurp(prefix.string() + ".src"));
      auto t = text::split_lines(testutil::slurp(prefix.string() + ".tgt"));
      check(s.size() == t.size() && s.size() <= 20, "corpus is not aligned or too large");
      auto src_lines = text::split_lines(src);
      for (std::size_t i = 0; i < t.size(); ++i) {
        bool found = false;
        for (const auto& c : cands)
          for (std::size_t j = 0; j < c.size(); ++j) found |= c[j] == t[i] && src_lines[j] == s[i];
        check(found, "target line " + std::to_string(i) + " is not a candidate for its source");
      }
      corpus[slot++] = testutil::slurp(mbr_out) + testutil::slurp(prefix.string() + ".src") +
                       testutil::slurp(prefix.string() + ".tgt");
    }
    check(corpus[0] == corpus[1], "--workers 1 and --workers 8 outputs differ");
    return "3x20 candidates -> mbr -> build-st, exit 0, identical at 1 and 8 workers";
  });

  std::printf("%s: %d criterion failure(s)\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
