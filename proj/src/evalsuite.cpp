// SPDX-License-Identifier: Apache-2.0
#include "cpm/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>

#include <nlohmann/json.hpp>

#include "cpm/error.hpp"

namespace cpm {

const char* to_string(DistMetric m) {
  switch (m) {
    case DistMetric::L2: return "l2";
    case DistMetric::Cosine: return "cosine";
    case DistMetric::NormDiff: return "normdiff";
  }
  return "?";
}

DistMetric metric_from_string(const std::string& s) {
  if (s == "l2") return DistMetric::L2;
  if (s == "cosine") return DistMetric::Cosine;
  if (s == "normdiff") return DistMetric::NormDiff;
  throw ConfigError("unknown metric '" + s + "' (expected l2, cosine or normdiff)");
}

double dist(DistMetric metric, const EffectVector& a, const EffectVector& b) {
  switch (metric) {
    case DistMetric::L2: {
      double s = 0.0;
      for (std::size_t c = 0; c < kClasses; ++c) {
        const double d = a.delta[c] - b.delta[c];
        s += d * d;
      }
      return std::sqrt(s);
    }
    case DistMetric::Cosine: {
      const double na = a.norm(), nb = b.norm();
      const bool za = na < kZeroNorm, zb = nb < kZeroNorm;
      if (za || zb) return za && zb ? 0.0 : 1.0;
      double dot = 0.0;
      for (std::size_t c = 0; c < kClasses; ++c) dot += a.delta[c] * b.delta[c];
      return std::clamp(1.0 - dot / (na * nb), 0.0, 2.0);
    }
    case DistMetric::NormDiff: return std::abs(a.norm() - b.norm());
  }
  return 0.0;
}

EffectVector icace(const Encoder& model, const CounterfactualPair& pair) {
  return EffectVector::difference(model.predict(pair.counterfactual.tokens).probs, model.predict(pair.base.tokens).probs);
}

namespace {

ErrorSummary summarize(std::span<const std::optional<std::array<double, 3>>> per_pair) {
  ErrorSummary s;
  for (const auto& d : per_pair) {
    if (!d) {
      ++s.n_skipped;
      continue;
    }
    ++s.n_evaluated;
    for (std::size_t m = 0; m < 3; ++m) s.mean[m] += (*d)[m];
  }
  if (s.n_evaluated) {
    for (double& v : s.mean) v /= static_cast<double>(s.n_evaluated);
  }
  return s;
}

std::array<double, 3> all_distances(const EffectVector& truth, const EffectVector& est) {
  return {dist(DistMetric::L2, truth, est), dist(DistMetric::Cosine, truth, est), dist(DistMetric::NormDiff, truth, est)};
}

}  // namespace

std::vector<EffectVector> true_effects(const Encoder& model, std::span<const CounterfactualPair> pairs, Exec exec) {
  return map_indexed<EffectVector>(exec, pairs.size(), [&](std::size_t i) { return icace(model, pairs[i]); });
}

ExplainerRun run_explainer(const Explainer& explainer, std::span<const EffectVector> truth,
                           std::span<const CounterfactualPair> pairs, Exec exec) {
  if (pairs.empty()) throw UsageError("icace_error: empty pair set");
  if (truth.size() != pairs.size()) throw UsageError("icace_error: one true effect per pair required");
  ExplainerRun run;
  run.estimates = map_indexed<std::optional<EffectVector>>(exec, pairs.size(), [&](std::size_t i) {
    const auto& p = pairs[i];
    try {
      return std::optional(explainer.estimate(p.base, p.edit, i));
    } catch (const NotFoundError&) {
      return std::optional<EffectVector>{};
    }
  });
  std::vector<std::optional<std::array<double, 3>>> per_pair;
  per_pair.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    per_pair.push_back(run.estimates[i] ? std::optional(all_distances(truth[i], *run.estimates[i])) : std::nullopt);
  }
  run.summary = summarize(per_pair);
  return run;
}

ErrorSummary icace_errors(const Explainer& explainer, const Encoder& model, std::span<const CounterfactualPair> pairs,
                          Exec exec) {
  if (pairs.empty()) throw UsageError("icace_error: empty pair set");
  return run_explainer(explainer, true_effects(model, pairs, exec), pairs, exec).summary;
}

double icace_error(const Explainer& explainer, const Encoder& model, std::span<const CounterfactualPair> pairs,
                   DistMetric metric, Exec exec) {
  return icace_errors(explainer, model, pairs, exec)[metric];
}

double macro_f1(std::span<const int> predicted, std::span<const int> gold, int classes) {
  if (predicted.size() != gold.size()) throw UsageError("macro_f1: prediction and label counts differ");
  if (gold.empty()) throw UsageError("macro_f1: empty dataset");
  const auto C = static_cast<std::size_t>(classes);
  std::vector<std::size_t> tp(C, 0), fp(C, 0), fn(C, 0);
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const auto p = static_cast<std::size_t>(predicted[i]);
    const auto g = static_cast<std::size_t>(gold[i]);
    if (p >= C || g >= C) throw UsageError("macro_f1: class index out of range");
    if (p == g) {
      ++tp[p];
    } else {
      ++fp[p];
      ++fn[g];
    }
  }
  double total = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    const double denom = static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
    total += tp[c] ? 2.0 * static_cast<double>(tp[c]) / denom : 0.0;
  }
  return total / static_cast<double>(C);
}

double macro_f1(const Encoder& model, std::span<const Example> dataset, Exec exec) {
  auto predicted = map_indexed<int>(exec, dataset.size(),
                                    [&](std::size_t i) { return model.predict(dataset[i].tokens).argmax(); });
  std::vector<int> gold;
  for (const auto& ex : dataset) gold.push_back(ex.label);
  return macro_f1(predicted, gold);
}

ErrorSummary self_explain_report(const Encoder& proxy, ProxyKind kind, std::span<const CounterfactualPair> pairs,
                                 const SourcePool& pool, SourceStrategy strategy, std::uint64_t seed,
                                 const VocabLayout& layout, Exec exec) {
  if (kind == ProxyKind::Hi) {
    CpmHiExplainer explainer(proxy, proxy, pool, strategy, seed);
    return icace_errors(explainer, proxy, pairs, exec);
  }
  CpmInExplainer explainer(proxy, proxy, layout);
  return icace_errors(explainer, proxy, pairs, exec);
}

double cramers_v(std::span<const std::size_t> table, std::size_t rows, std::size_t cols) {
  if (table.size() != rows * cols) throw UsageError("cramers_v: table size mismatch");
  std::vector<double> rs(rows, 0.0), cs(cols, 0.0);
  double n = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const auto v = static_cast<double>(table[r * cols + c]);
      rs[r] += v;
      cs[c] += v;
      n += v;
    }
  }
  const auto nonzero = [](const std::vector<double>& v) {
    return static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](double x) { return x > 0; }));
  };
  const std::size_t r_eff = nonzero(rs), c_eff = nonzero(cs);
  if (r_eff < 2 || c_eff < 2 || n <= 0) return 0.0;
  double chi2 = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (rs[r] == 0) continue;
    for (std::size_t c = 0; c < cols; ++c) {
      if (cs[c] == 0) continue;
      const double expected = rs[r] * cs[c] / n;
      const double d = static_cast<double>(table[r * cols + c]) - expected;
      chi2 += d * d / expected;
    }
  }
  const double denom = n * static_cast<double>(std::min(r_eff, c_eff) - 1);
  return std::min(1.0, std::sqrt(chi2 / denom));
}

std::vector<double> debias_correlation(const std::function<int(std::size_t)>& predict_class,
                                       std::span<const Example> dataset, int concepts, Exec exec) {
  if (dataset.empty()) throw UsageError("debias_correlation: empty dataset");
  auto predicted = map_indexed<int>(exec, dataset.size(), predict_class);
  std::vector<double> out;
  for (int i = 0; i < concepts; ++i) {
    std::vector<std::size_t> table(kClasses * 3, 0);
    for (std::size_t e = 0; e < dataset.size(); ++e) {
      const auto v = static_cast<std::size_t>(value_index(dataset[e].concepts[static_cast<std::size_t>(i)]));
      ++table[static_cast<std::size_t>(predicted[e]) * 3 + v];
    }
    out.push_back(cramers_v(table, kClasses, 3));
  }
  return out;
}

DebiasReport debias_concept(const Encoder& proxy, int concept_id, std::span<const Example> dataset,
                            const SourcePool& pool, std::uint64_t seed, Exec exec) {
  const int k = proxy.config().concepts;
  DebiasReport report;
  report.concept_id = concept_id;
  report.before = debias_correlation([&](std::size_t e) { return proxy.predict(dataset[e].tokens).argmax(); },
                                     dataset, k, exec);
  const InterventionDescriptor to_unknown{concept_id, ConceptValue::Unknown};
  report.after = debias_correlation(
      [&](std::size_t e) {
        auto rng = estimate_stream(seed, e);
        const Example& source = pool.sample(SourceStrategy::GoldLabel, to_unknown, rng);
        auto p = interchange_probs(proxy, dataset[e].tokens, source.tokens, concept_id);
        return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
      },
      dataset, k, exec);
  return report;
}

void BenchReport::add(const std::string& explainer, std::span<const ErrorSummary> per_seed,
                      std::span<const std::uint64_t> seeds, std::span<const DistMetric> metrics) {
  for (auto m : metrics) {
    BenchRow row;
    row.explainer = explainer;
    row.metric = m;
    row.seeds.assign(seeds.begin(), seeds.end());
    double s = 0.0;
    for (const auto& e : per_seed) {
      s += e[m];
      row.n_pairs += e.n_evaluated + e.n_skipped;
      row.n_skipped += e.n_skipped;
    }
    row.mean = s / static_cast<double>(per_seed.size());
    double var = 0.0;
    for (const auto& e : per_seed) var += (e[m] - row.mean) * (e[m] - row.mean);
    row.std = std::sqrt(var / static_cast<double>(per_seed.size()));
    rows.push_back(std::move(row));
  }
}

std::string BenchReport::to_json() const {
  nlohmann::ordered_json j;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json o;
    o["explainer"] = r.explainer;
    o["metric"] = to_string(r.metric);
    o["mean"] = r.mean;
    o["std"] = r.std;
    o["n_pairs"] = r.n_pairs;
    o["n_skipped"] = r.n_skipped;
    o["seeds"] = r.seeds;
    j["rows"].push_back(std::move(o));
  }
  j["macro_f1"] = nlohmann::ordered_json::object();
  for (const auto& [name, v] : macro_f1) j["macro_f1"][name] = v;
  return j.dump(2) + "\n";
}

std::string BenchReport::to_text() const {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-22s %-9s %10s %10s %8s %9s\n", "explainer", "metric", "mean", "std", "n_pairs",
                "n_skipped");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-22s %-9s %10.4f %10.4f %8zu %9zu\n", r.explainer.c_str(), to_string(r.metric),
                  r.mean, r.std, r.n_pairs, r.n_skipped);
    out += buf;
  }
  if (!macro_f1.empty()) {
    out += "\nmodel                  macro_f1\n";
    for (const auto& [name, v] : macro_f1) {
      std::snprintf(buf, sizeof buf, "%-22s %8.4f\n", name.c_str(), v);
      out += buf;
    }
  }
  return out;
}

}  // namespace cpm
