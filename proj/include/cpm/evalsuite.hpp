// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cpm/encoder.hpp"
#include "cpm/explainers.hpp"
#include "cpm/parallel.hpp"

namespace cpm {

enum class DistMetric { L2, Cosine, NormDiff };
inline constexpr std::array<DistMetric, 3> kAllMetrics = {DistMetric::L2, DistMetric::Cosine, DistMetric::NormDiff};
const char* to_string(DistMetric m);
DistMetric metric_from_string(const std::string& s);

/// Norm below which an effect vector counts as zero for the cosine rule.
inline constexpr double kZeroNorm = 1e-12;

/// L2 = |a - b|; Cosine = 1 - cos(a, b), with 0 when both vectors are
/// (near-)zero and 1 when exactly one is; NormDiff = | |a| - |b| |.
double dist(DistMetric metric, const EffectVector& a, const EffectVector& b);

/// model(counterfactual) - model(base) on probabilities.
EffectVector icace(const Encoder& model, const CounterfactualPair& pair);

struct ErrorSummary {
  std::array<double, 3> mean{};  // indexed like kAllMetrics
  std::size_t n_evaluated = 0;
  std::size_t n_skipped = 0;

  double operator[](DistMetric m) const { return mean[static_cast<std::size_t>(m)]; }
};

/// Mean distance between icace(model, p) and explainer.estimate(p.base, p.edit)
/// over pairs, for every metric at once. Pairs the explainer cannot answer
/// (NotFoundError) are skipped and counted. The pair index is the estimate's
/// pair key.
ErrorSummary icace_errors(const Explainer& explainer, const Encoder& model, std::span<const CounterfactualPair> pairs,
                          Exec exec = Exec::Serial);
/// True effects of every pair under `model`.
std::vector<EffectVector> true_effects(const Encoder& model, std::span<const CounterfactualPair> pairs,
                                       Exec exec = Exec::Serial);

struct ExplainerRun {
  ErrorSummary summary;
  std::vector<std::optional<EffectVector>> estimates;  // nullopt where skipped
};

/// As icace_errors, against precomputed true effects, keeping the estimates.
ExplainerRun run_explainer(const Explainer& explainer, std::span<const EffectVector> truth,
                           std::span<const CounterfactualPair> pairs, Exec exec = Exec::Serial);

double icace_error(const Explainer& explainer, const Encoder& model, std::span<const CounterfactualPair> pairs,
                   DistMetric metric, Exec exec = Exec::Serial);

/// Unweighted mean of per-class F1 over `classes` classes; a class with no
/// true positives (including one absent from both sides) scores 0.
double macro_f1(std::span<const int> predicted, std::span<const int> gold, int classes = kClasses);
double macro_f1(const Encoder& model, std::span<const Example> dataset, Exec exec = Exec::Serial);

/// ICaCE-Error with the proxy standing in for the black box on both sides.
/// Supports CPM_HI (interchange) and CPM_IN (token) proxies.
enum class ProxyKind { In, Hi };
ErrorSummary self_explain_report(const Encoder& proxy, ProxyKind kind, std::span<const CounterfactualPair> pairs,
                                 const SourcePool& pool, SourceStrategy strategy, std::uint64_t seed,
                                 const VocabLayout& layout, Exec exec = Exec::Serial);

/// Cramer's V over a contingency table (rows x cols, row-major). Empty rows
/// and columns are dropped; a table with fewer than two non-empty rows or
/// columns scores 0.
double cramers_v(std::span<const std::size_t> table, std::size_t rows, std::size_t cols);

/// Per-concept Cramer's V between predicted class and gold concept label.
std::vector<double> debias_correlation(const std::function<int(std::size_t)>& predict_class,
                                       std::span<const Example> dataset, int concepts, Exec exec = Exec::Serial);

struct DebiasReport {
  int concept_id = 0;
  std::vector<double> before;  // V per concept, proxy factual predictions
  std::vector<double> after;   // V per concept, interchange with an Unknown source
};

/// Debiases `concept_id` by interchanging its site with a training source whose
/// gold label for that concept is Unknown.
DebiasReport debias_concept(const Encoder& proxy, int concept_id, std::span<const Example> dataset,
                            const SourcePool& pool, std::uint64_t seed, Exec exec = Exec::Serial);

struct BenchRow {
  std::string explainer;
  DistMetric metric = DistMetric::L2;
  double mean = 0.0;
  double std = 0.0;
  std::size_t n_pairs = 0;
  std::size_t n_skipped = 0;
  std::vector<std::uint64_t> seeds;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::vector<std::pair<std::string, double>> macro_f1;  // per model

  /// Aggregates per-seed summaries of one explainer (mean and population std).
  void add(const std::string& explainer, std::span<const ErrorSummary> per_seed,
           std::span<const std::uint64_t> seeds, std::span<const DistMetric> metrics);
  std::string to_json() const;
  std::string to_text() const;
};

}  // namespace cpm
