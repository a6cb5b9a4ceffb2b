// SPDX-License-Identifier: Apache-2.0
// End-to-end acceptance run on the default SCM, seeds {0, 1, 2}. Prints one
// PASS/FAIL line per criterion; exits nonzero when any criterion fails.
//
//   acceptance [work_dir]
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpm/app.hpp"
#include "cpm/attribution.hpp"
#include "cpm/evalsuite.hpp"
#include "cpm/io.hpp"
#include "support/gradient_suite.hpp"

using namespace cpm;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Thresholds.
constexpr double kGradRelErr = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr int kGradSeeds = 20;
constexpr double kPartitionBackward = 1e-9;
constexpr double kPartitionIg = 1e-6;
constexpr int kIgSteps = 200;
constexpr double kIgCompleteness = 0.01;
constexpr std::size_t kIgInputs = 50;
constexpr double kPipelineSeconds = 300.0;
constexpr double kPairQualitySlack = 0.02;
constexpr double kF1Gap = 0.05;
constexpr double kSelfSlack = 0.02;
constexpr double kProbeSlack = 0.05;
constexpr std::size_t kAxiomPairs = 10000;
constexpr double kGroupOracle = 1e-12;
const std::vector<std::uint64_t> kSeeds = {0, 1, 2};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void progress(const std::string& msg) {
  std::fprintf(stderr, "[acceptance] %s\n", msg.c_str());
  std::fflush(stderr);
}

struct Report {
  std::map<std::pair<std::string, std::string>, double> mean;  // (explainer, metric)
  std::map<std::string, double> f1;

  static Report load(const fs::path& dir) {
    const auto j = json::parse(read_file(dir / "report.json"));
    Report r;
    for (const auto& row : j["rows"]) {
      r.mean[{row["explainer"].get<std::string>(), row["metric"].get<std::string>()}] = row["mean"].get<double>();
    }
    for (const auto& [k, v] : j["macro_f1"].items()) r.f1[k] = v.get<double>();
    return r;
  }
  double at(const std::string& e, const std::string& m) const { return mean.at({e, m}); }
};

struct SeedRun {
  std::uint64_t seed = 0;
  double pipeline_seconds = 0;
  Report main;           // every explainer, HumanLike-trained proxies
  double hi_sampled_l2 = 0;
  double hi_no_iit_l2 = 0;
  double random_source_l2 = 0;
  double probe_source_l2 = 0;
  std::vector<std::pair<double, double>> debias;  // (before, after) for the debiased concept
};

SeedRun run_seed(std::uint64_t seed, const fs::path& root) {
  SeedRun out;
  out.seed = seed;
  RunConfig cfg;
  cfg.override_seed(seed);
  const fs::path dir = root / ("seed" + std::to_string(seed));
  fs::remove_all(dir);
  const fs::path data = dir / "data", bb = dir / "blackbox", in = dir / "cpm_in", hi = dir / "cpm_hi";

  const auto t0 = Clock::now();
  cmd_generate(cfg, data);
  cmd_train_blackbox(cfg, data, bb);
  cmd_train_cpm(TrainKind::CpmIn, cfg, data, std::nullopt, bb / "blackbox.json", in);
  cmd_train_cpm(TrainKind::CpmHi, cfg, data, std::nullopt, bb / "blackbox.json", hi);
  EvaluateInputs ev{data, bb / "blackbox.json", in / "cpm_in.json", hi / "cpm_hi.json", std::nullopt, std::nullopt};
  cmd_evaluate(cfg, ev, dir / "eval");
  out.pipeline_seconds = seconds_since(t0);
  out.main = Report::load(dir / "eval");
  progress("seed " + std::to_string(seed) + ": pipeline " + std::to_string(out.pipeline_seconds) + " s");

  const auto hi_only = [&](RunConfig c, const fs::path& ckpt, const std::string& name) {
    c.explainers = {"cpm_hi"};
    EvaluateInputs e{data, bb / "blackbox.json", std::nullopt, ckpt, std::nullopt, std::nullopt};
    cmd_evaluate(c, e, dir / name);
    return Report::load(dir / name).at("cpm_hi", "l2");
  };

  // Sampled (non-human) counterfactual pairs for training.
  RunConfig sampled = cfg;
  sampled.pair_strategy = PairStrategy::Sampled;
  cmd_generate(sampled, dir / "data_sampled");
  cmd_train_cpm(TrainKind::CpmHi, cfg, data, dir / "data_sampled" / "pairs.jsonl", bb / "blackbox.json",
                dir / "cpm_hi_sampled");
  out.hi_sampled_l2 = hi_only(cfg, dir / "cpm_hi_sampled" / "cpm_hi.json", "eval_sampled");

  // Objective ablation without the interchange term.
  RunConfig no_iit = cfg;
  no_iit.weights.w_hi = 0.0;
  cmd_train_cpm(TrainKind::CpmHi, no_iit, data, std::nullopt, bb / "blackbox.json", dir / "cpm_hi_no_iit");
  out.hi_no_iit_l2 = hi_only(cfg, dir / "cpm_hi_no_iit" / "cpm_hi.json", "eval_no_iit");

  // Source strategies at estimate time.
  RunConfig random_src = cfg;
  random_src.source_strategy = SourceStrategy::Random;
  out.random_source_l2 = hi_only(random_src, hi / "cpm_hi.json", "eval_random_source");
  RunConfig probe_src = cfg;
  probe_src.source_strategy = SourceStrategy::ProbePredicted;
  out.probe_source_l2 = hi_only(probe_src, hi / "cpm_hi.json", "eval_probe_source");

  cmd_debias(cfg, hi / "cpm_hi.json", data, dir / "debias");
  const auto deb = json::parse(read_file(dir / "debias" / "debias.json"));
  for (const auto& r : deb["reports"]) {
    const auto c = r["concept"].get<std::size_t>();
    out.debias.emplace_back(r["before"][c].get<double>(), r["after"][c].get<double>());
  }
  progress("seed " + std::to_string(seed) + ": ablations done");
  return out;
}

struct Line {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

Encoder load(const fs::path& p) { return checkpoint_from_json(read_file(p)); }

std::vector<double> grad_embedding(const Encoder& m, const Example& x, const std::vector<double>& w,
                                   std::optional<GradMask> mask) {
  Tape t;
  const auto b = m.bind(t);
  Var out = t.dot(m.forward(t, b, x.tokens).probs, w);
  if (mask) {
    t.backward_masked(out, *mask);
  } else {
    t.backward(out);
  }
  return t.grad(b.vars[m.embedding_index()]);
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "cpm_acceptance";
  fs::create_directories(root);
  std::vector<Line> lines;

  // 1. Gradient suite.
  {
    const auto t0 = Clock::now();
    const auto r = oracle::run_gradient_suite(kGradSeeds);
    const double secs = seconds_since(t0);
    double worst = 0, worst_abs = 0;
    bool covered = true;
    for (std::size_t i = 0; i < r.max_rel.size(); ++i) {
      worst = std::max(worst, r.max_rel[i]);
      worst_abs = std::max(worst_abs, r.max_abs[i]);
      covered = covered && r.checked[i] > 0;
    }
    lines.push_back({1, "gradient suite", worst < kGradRelErr && secs < kGradSeconds && covered,
                     fmt("max rel err %.2e (abs diffs <= 1e-8 count as exact; max abs %.2e) over %.0f seeds, %.1f s",
                         worst, worst_abs, kGradSeeds, secs)});
    progress("gradient suite done");
  }

  std::vector<SeedRun> runs;
  for (auto s : kSeeds) runs.push_back(run_seed(s, root));

  const RunConfig base_cfg;
  const ScmConfig& scm = base_cfg.scm;

  // 2. Interchange identities on the trained proxies and null pairs.
  {
    bool ok = true;
    std::size_t checked = 0, nulls = 0;
    for (auto s : kSeeds) {
      const fs::path dir = root / ("seed" + std::to_string(s));
      const Encoder hi = load(dir / "cpm_hi" / "cpm_hi.json");
      const Encoder bb = load(dir / "blackbox" / "blackbox.json");
      const auto test = dataset_from_jsonl(read_file(dir / "data" / "test.jsonl"));
      for (std::size_t i = 0; i < 50; ++i) {
        const auto& x = test[i];
        const auto& src = test[test.size() - 1 - i];
        Tape plain;
        const auto pb = hi.bind(plain);
        const Tensor expected = plain.value(hi.forward(plain, pb, x.tokens).logits);
        for (int c = 0; c < hi.config().concepts; ++c) {
          Tape t;
          const auto b = hi.bind(t);
          const Var self = interchange_forward(t, EncoderLogits{hi, b}, std::span<const TokenId>(x.tokens),
                                               std::span<const TokenId>(x.tokens), site_for(c, hi.config()));
          ok = ok && t.value(self) == expected;
          ++checked;
        }
        Tape t;
        const auto b = hi.bind(t);
        const Var none = interchange_forward(t, EncoderLogits{hi, b}, std::span<const TokenId>(x.tokens),
                                             std::span<const TokenId>(src.tokens),
                                             InterventionSite{hi.config().intervention_layer, {5, 5}});
        ok = ok && t.value(none) == expected;
      }
      const auto train = dataset_from_jsonl(read_file(dir / "data" / "train.jsonl"));
      const auto sampled = pairs_from_jsonl(read_file(dir / "data_sampled" / "pairs.jsonl"), train, scm);
      for (const auto& p : sampled) {
        if (p.kind != PairKind::Null) continue;
        ++nulls;
        for (double v : icace(bb, p).delta) ok = ok && v == 0.0;
        for (double v : icace(hi, p).delta) ok = ok && v == 0.0;
      }
    }
    lines.push_back({2, "interchange identities", ok && nulls > 0,
                     fmt("%.0f self/zero-width interchanges, %.0f null pairs", static_cast<double>(checked),
                         static_cast<double>(nulls))});
  }

  // 3. Mediated-gradient partition on trained proxies.
  {
    double worst_bwd = 0, worst_ig = 0;
    IgConfig ig;
    for (auto s : kSeeds) {
      const fs::path dir = root / ("seed" + std::to_string(s));
      const Encoder hi = load(dir / "cpm_hi" / "cpm_hi.json");
      const auto test = dataset_from_jsonl(read_file(dir / "data" / "test.jsonl"));
      const auto& cfg = hi.config();
      std::vector<double> w(kClasses, 0.0);
      for (int c : ig.target_classes) w[static_cast<std::size_t>(c)] = 1.0;
      for (std::size_t i = 0; i < 10; ++i) {
        const auto& x = test[i * 7];
        const auto full = grad_embedding(hi, x, w, std::nullopt);
        std::vector<double> summed(full.size(), 0.0);
        for (int c = 0; c < cfg.concepts; ++c) {
          const auto g = grad_embedding(hi, x, w, GradMask{cfg.intervention_layer, site_for(c, cfg).range});
          for (std::size_t j = 0; j < g.size(); ++j) summed[j] += g[j];
        }
        const auto r = grad_embedding(hi, x, w, GradMask{cfg.intervention_layer, residual_range(cfg)});
        for (std::size_t j = 0; j < r.size(); ++j) {
          worst_bwd = std::max(worst_bwd, std::abs(summed[j] + r[j] - full[j]));
        }
        const auto table = attribution_table(hi, x, ig);
        const auto res = residual_ig(hi, x.tokens, ig);
        const auto fig = full_ig(hi, x.tokens, ig);
        for (std::size_t t = 0; t < x.tokens.size(); ++t) {
          double sum = res.raw[t];
          for (const auto& row : table.rows) sum += row.raw[t];
          worst_ig = std::max(worst_ig, std::abs(sum - fig.raw[t]));
        }
      }
    }
    lines.push_back({3, "mediated-gradient partition", worst_bwd < kPartitionBackward && worst_ig < kPartitionIg,
                     fmt("max |backward sum - full| %.2e, max |IG rows sum - full| %.2e", worst_bwd, worst_ig)});
  }

  // 4. IG completeness on trained-model inputs.
  {
    const fs::path dir = root / "seed0";
    const Encoder hi = load(dir / "cpm_hi" / "cpm_hi.json");
    const auto test = dataset_from_jsonl(read_file(dir / "data" / "test.jsonl"));
    IgConfig ig;
    ig.steps = kIgSteps;
    CounterRng rng(0, "acceptance/ig-inputs");
    std::size_t ok = 0;
    double worst = 0;
    for (std::size_t i = 0; i < kIgInputs; ++i) {
      const auto& x = test[rng.below(test.size())];
      const std::vector<TokenId> pad(x.tokens.size(), VocabLayout::pad());
      const double gap = target_mass(hi, x.tokens, ig) - target_mass(hi, pad, ig);
      const double err = std::abs(full_ig(hi, x.tokens, ig).score - gap);
      worst = std::max(worst, err / std::abs(gap));
      ok += err <= kIgCompleteness * std::abs(gap);
    }
    lines.push_back({4, "IG completeness", ok == kIgInputs,
                     fmt("%.0f/%.0f inputs within 1%%, worst relative error %.4f", static_cast<double>(ok),
                         static_cast<double>(kIgInputs), worst)});
  }

  // 5. Benchmark direction and pipeline runtime.
  {
    bool ok = true;
    std::string detail;
    for (const auto& r : runs) {
      for (const char* m : {"l2", "cosine"}) {
        const double hi = r.main.at("cpm_hi", m), in = r.main.at("cpm_in", m);
        const double rnd = r.main.at("random", m), sl = r.main.at("slearner", m);
        const bool pass = hi < rnd && in < rnd && hi <= sl;
        ok = ok && pass;
        char buf[200];
        std::snprintf(buf, sizeof buf, "s%llu %s: HI %.4f IN %.4f Rnd %.4f SL %.4f%s; ",
                      static_cast<unsigned long long>(r.seed), m, hi, in, rnd, sl, pass ? "" : " (x)");
        detail += buf;
      }
      ok = ok && r.pipeline_seconds < kPipelineSeconds;
      detail += fmt("pipeline %.0f s; ", r.pipeline_seconds);
    }
    lines.push_back({5, "benchmark direction", ok, detail});
  }

  // 6. HumanLike vs Sampled training pairs.
  {
    double human = 0, sampled = 0;
    for (const auto& r : runs) {
      human += r.main.at("cpm_hi", "l2") / static_cast<double>(runs.size());
      sampled += r.hi_sampled_l2 / static_cast<double>(runs.size());
    }
    lines.push_back({6, "counterfactual quality ordering", human <= sampled + kPairQualitySlack,
                     fmt("mean L2 HumanLike %.4f, Sampled %.4f", human, sampled)});
  }

  // 7. Factual fidelity.
  {
    bool ok = true;
    std::string detail;
    for (const auto& r : runs) {
      const double bb = r.main.f1.at("blackbox"), in = r.main.f1.at("cpm_in"), hi = r.main.f1.at("cpm_hi");
      ok = ok && std::abs(in - bb) <= kF1Gap && std::abs(hi - bb) <= kF1Gap;
      char buf[160];
      std::snprintf(buf, sizeof buf, "s%llu: N %.4f IN %.4f HI %.4f; ", static_cast<unsigned long long>(r.seed), bb,
                    in, hi);
      detail += buf;
    }
    lines.push_back({7, "factual fidelity", ok, detail});
  }

  // 8. Self-explanation.
  {
    double self = 0, explain = 0;
    for (const auto& r : runs) {
      self += r.main.at("cpm_hi_self", "l2") / static_cast<double>(runs.size());
      explain += r.main.at("cpm_hi", "l2") / static_cast<double>(runs.size());
    }
    lines.push_back({8, "self-explanation", self <= explain + kSelfSlack,
                     fmt("mean L2 self %.4f, explaining N %.4f", self, explain)});
  }

  // 9. Source strategies.
  {
    bool ok = true;
    std::string detail;
    for (const auto& r : runs) {
      const double gold = r.main.at("cpm_hi", "l2");
      ok = ok && gold < r.random_source_l2 && std::abs(r.probe_source_l2 - gold) <= kProbeSlack;
      char buf[160];
      std::snprintf(buf, sizeof buf, "s%llu: gold %.4f random %.4f probe %.4f; ",
                    static_cast<unsigned long long>(r.seed), gold, r.random_source_l2, r.probe_source_l2);
      detail += buf;
    }
    lines.push_back({9, "source-strategy ablation", ok, detail});
  }

  // 10. Objective ablation.
  {
    bool ok = true;
    std::string detail;
    for (const auto& r : runs) {
      const double full = r.main.at("cpm_hi", "l2");
      ok = ok && r.hi_no_iit_l2 > full;
      char buf[160];
      std::snprintf(buf, sizeof buf, "s%llu: full %.4f w_hi=0 %.4f; ", static_cast<unsigned long long>(r.seed), full,
                    r.hi_no_iit_l2);
      detail += buf;
    }
    lines.push_back({10, "objective ablation", ok, detail});
  }

  // 11. Debiasing.
  {
    bool ok = true;
    std::string detail;
    for (const auto& r : runs) {
      detail += "s" + std::to_string(r.seed) + ":";
      for (const auto& [before, after] : r.debias) {
        ok = ok && after < before;
        detail += fmt(" %.3f->%.3f", before, after);
      }
      detail += "; ";
    }
    lines.push_back({11, "debiasing direction", ok, detail});
  }

  // 12. Determinism and oracles.
  {
    const fs::path dir = root / "seed0";
    RunConfig cfg;
    cfg.override_seed(0);
    EvaluateInputs ev{dir / "data",         dir / "blackbox" / "blackbox.json", dir / "cpm_in" / "cpm_in.json",
                      dir / "cpm_hi" / "cpm_hi.json", std::nullopt,                  std::nullopt};
    cmd_evaluate(cfg, ev, dir / "eval_rerun");
    bool same = true;
    for (const char* f : {"report.json", "report.txt", "estimates.jsonl"}) {
      same = same && read_file(dir / "eval" / f) == read_file(dir / "eval_rerun" / f);
    }

    // Group tables against a brute-force group-by-mean.
    const Encoder bb = load(dir / "blackbox" / "blackbox.json");
    const auto train = dataset_from_jsonl(read_file(dir / "data" / "train.jsonl"));
    const auto pairs = pairs_from_jsonl(read_file(dir / "data" / "pairs.jsonl"), train, scm);
    double worst = 0;
    for (auto score : {GroupScore::ModelOutputs, GroupScore::GoldLabels}) {
      const auto table = fit_group_table(pairs, score, &bb, false, Exec::Parallel);
      std::map<std::pair<int, int>, std::pair<std::array<double, kClasses>, double>> brute;
      for (const auto& p : pairs) {
        auto& [sum, n] = brute[{p.edit.concept_id, to_int(p.edit.target)}];
        const auto after = bb.predict(p.counterfactual.tokens).probs, before = bb.predict(p.base.tokens).probs;
        for (int c = 0; c < kClasses; ++c) {
          sum[c] += score == GroupScore::ModelOutputs ? after[c] - before[c]
                                                      : (p.counterfactual.label == c) - (p.base.label == c);
        }
        n += 1;
      }
      if (brute.size() != table.entries().size()) worst = 1.0;
      for (const auto& [key, entry] : table.entries()) {
        const auto& [sum, n] = brute.at({key.concept_id, to_int(key.target)});
        for (int c = 0; c < kClasses; ++c) worst = std::max(worst, std::abs(entry.mean.delta[c] - sum[c] / n));
      }
    }

    // Metric axioms.
    CounterRng rng(12, "acceptance/axioms");
    std::size_t violations = 0;
    for (std::size_t i = 0; i < kAxiomPairs; ++i) {
      EffectVector a, b, c;
      for (double& v : a.delta) v = rng.normal(0, 0.3);
      for (double& v : b.delta) v = rng.normal(0, 0.3);
      for (double& v : c.delta) v = rng.normal(0, 0.3);
      for (auto m : kAllMetrics) {
        const double ab = dist(m, a, b);
        violations += !(ab >= 0) || ab != dist(m, b, a) || dist(m, a, a) > 1e-12;
      }
      for (auto m : {DistMetric::L2, DistMetric::NormDiff}) {
        violations += dist(m, a, c) > dist(m, a, b) + dist(m, b, c) + 1e-12;
      }
      violations += dist(DistMetric::Cosine, a, b) > 2.0 + 1e-12;
    }
    lines.push_back({12, "determinism and oracles", same && worst < kGroupOracle && violations == 0,
                     fmt("rerun identical: %.0f, group-table max dev %.2e, axiom violations %.0f / %.0f pairs",
                         same ? 1.0 : 0.0, worst, static_cast<double>(violations),
                         static_cast<double>(kAxiomPairs))});
  }

  int failed = 0;
  for (const auto& l : lines) {
    std::printf("%s  %2d  %-32s %s\n", l.pass ? "PASS" : "FAIL", l.id, l.name.c_str(), l.detail.c_str());
    failed += !l.pass;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(lines.size()) - failed, lines.size());
  return failed == 0 ? 0 : 1;
}
