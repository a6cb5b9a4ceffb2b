// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cpm/encoder.hpp"
#include "cpm/parallel.hpp"
#include "cpm/rng.hpp"
#include "cpm/scm.hpp"

namespace cpm {

/// Difference of two output-probability vectors.
struct EffectVector {
  std::array<double, kClasses> delta{};

  static EffectVector difference(const Probs& after, const Probs& before);
  double norm() const;
  double sum() const;
  friend bool operator==(const EffectVector&, const EffectVector&) = default;
};

enum class SourceStrategy { GoldLabel, Random, ProbePredicted };
const char* to_string(SourceStrategy s);
SourceStrategy source_strategy_from_string(const std::string& s);

/// Training examples indexed by (concept, value) for interchange sources.
class SourcePool {
 public:
  SourcePool(std::span<const Example> pool, int concepts);

  /// Indexes the pool by the proxy's probe predictions (argmax per concept).
  void index_probe_predictions(const Encoder& proxy, Exec exec = Exec::Serial);
  bool has_probe_index() const { return !by_probe_.empty(); }

  /// Candidates for a source carrying `value` at `concept` under `strategy`
  /// (Random ignores concept and value).
  std::span<const std::size_t> candidates(SourceStrategy strategy, int concept_id, ConceptValue value) const;
  const Example& operator[](std::size_t i) const { return pool_[i]; }
  std::size_t size() const { return pool_.size(); }

  /// Uniform draw from candidates(); throws NotFoundError naming the edit.
  const Example& sample(SourceStrategy strategy, const InterventionDescriptor& edit, CounterRng& rng) const;

 private:
  std::span<const Example> pool_;
  int concepts_;
  std::vector<std::size_t> all_;
  std::vector<std::vector<std::size_t>> by_gold_;   // [concept * 3 + value_index]
  std::vector<std::vector<std::size_t>> by_probe_;  // same layout
};

/// Estimator interface. `pair_key` seeds the per-pair random stream so that
/// serial and parallel evaluation agree. Throws NotFoundError when the
/// estimator has no answer for (x, edit).
class Explainer {
 public:
  virtual ~Explainer() = default;
  virtual std::string name() const = 0;
  virtual EffectVector estimate(const Example& x, const InterventionDescriptor& edit,
                                std::uint64_t pair_key) const = 0;
};

// Counterfactual-proxy estimators.

EffectVector estimate_cpm_in(const Encoder& proxy, const Encoder& reference, const Example& x,
                             const InterventionDescriptor& edit, const VocabLayout& layout);

EffectVector estimate_cpm_hi(const Encoder& proxy, const Encoder& reference, const Example& x,
                             const InterventionDescriptor& edit, SourceStrategy strategy,
                             const SourcePool& pool, CounterRng& rng);

/// Interchange prediction of the proxy on x with concept's site taken from source.
Probs interchange_probs(const Encoder& proxy, std::span<const TokenId> base, std::span<const TokenId> source,
                        int concept_id);

class CpmInExplainer final : public Explainer {
 public:
  CpmInExplainer(const Encoder& proxy, const Encoder& reference, VocabLayout layout, std::string name = "CPM_IN")
      : proxy_(proxy), reference_(reference), layout_(layout), name_(std::move(name)) {}
  std::string name() const override { return name_; }
  EffectVector estimate(const Example& x, const InterventionDescriptor& edit, std::uint64_t) const override {
    return estimate_cpm_in(proxy_, reference_, x, edit, layout_);
  }

 private:
  const Encoder& proxy_;
  const Encoder& reference_;
  VocabLayout layout_;
  std::string name_;
};

class CpmHiExplainer final : public Explainer {
 public:
  CpmHiExplainer(const Encoder& proxy, const Encoder& reference, const SourcePool& pool, SourceStrategy strategy,
                 std::uint64_t seed, std::string name = "CPM_HI")
      : proxy_(proxy), reference_(reference), pool_(pool), strategy_(strategy), seed_(seed), name_(std::move(name)) {}
  std::string name() const override { return name_; }
  EffectVector estimate(const Example& x, const InterventionDescriptor& edit, std::uint64_t pair_key) const override;

 private:
  const Encoder& proxy_;
  const Encoder& reference_;
  const SourcePool& pool_;
  SourceStrategy strategy_;
  std::uint64_t seed_;
  std::string name_;
};

// S-Learner.

/// Concept predictor B: embed -> mean-pool -> affine + ReLU -> k x 3 logits.
class ConceptPredictor {
 public:
  struct Config {
    int embed_dim = 16;
    int hidden_width = 32;
    int epochs = 20;
    int batch_size = 32;
    double learning_rate = 5e-3;
  };

  ConceptPredictor(int vocab_size, int concepts, const Config& cfg, std::uint64_t seed);
  void fit(std::span<const Example> data, std::uint64_t seed, Exec exec = Exec::Serial);
  std::vector<ConceptValue> predict(std::span<const TokenId> tokens) const;
  double accuracy(std::span<const Example> data) const;

 private:
  std::vector<Var> bind(Tape& tape) const;
  Var logits(Tape& tape, const std::vector<Var>& p, std::span<const TokenId> tokens) const;

  int concepts_;
  Config cfg_;
  ParamSet params_;
};

/// Multinomial logistic regression over one-hot concept features, fitted by
/// L-BFGS on mean smoothed cross-entropy + (l2 / 2) * ||params||^2.
struct LogisticRegression {
  int features = 0;
  Tensor weight;  // [features, 5]
  Tensor bias;    // [5]

  Probs logits(std::span<const double> x) const;
  Probs predict(std::span<const double> x) const;
};

struct LrProblem {
  std::vector<std::vector<double>> rows;
  std::vector<Probs> teacher_logits;
  double temperature = 2.0;
  double l2 = 0.0;  // 0 selects 1 / rows
};

/// Objective value and gradient (weights row-major then bias).
double lr_objective(const LrProblem& problem, std::span<const double> params, std::span<double> grad);
LogisticRegression fit_logistic_regression(const LrProblem& problem, int features);

/// 3k one-hot encoding, concept-major, (Negative, Unknown, Positive).
std::vector<double> one_hot_concepts(std::span<const ConceptValue> concepts);

struct SLearnerModel {
  std::shared_ptr<const ConceptPredictor> predictor;
  LogisticRegression regression;
  int concepts = 0;
};

struct SLearnerConfig {
  ConceptPredictor::Config predictor;
  double temperature = 2.0;
  std::uint64_t seed = 0;
};

/// Fits B on gold concepts of train_data, then LR against the black box.
/// When pairs are given, their counterfactual sides are added as extra rows.
SLearnerModel fit_slearner(const Encoder& blackbox, std::span<const Example> train_data,
                           std::span<const CounterfactualPair> pairs, const SLearnerConfig& cfg,
                           Exec exec = Exec::Serial);

EffectVector estimate_slearner(const SLearnerModel& model, const Example& x, const InterventionDescriptor& edit);

class SLearnerExplainer final : public Explainer {
 public:
  explicit SLearnerExplainer(const SLearnerModel& model) : model_(model) {}
  std::string name() const override { return "S-Learner"; }
  EffectVector estimate(const Example& x, const InterventionDescriptor& edit, std::uint64_t) const override {
    return estimate_slearner(model_, x, edit);
  }

 private:
  const SLearnerModel& model_;
};

// Group-mean tables (CaCE / ATE).

struct GroupKey {
  int concept_id = 0;
  ConceptValue target = ConceptValue::Unknown;
  std::optional<ConceptValue> base_value;  // set only for fine keys
  auto operator<=>(const GroupKey&) const = default;
};

struct GroupEntry {
  EffectVector mean;
  std::size_t count = 0;
};

enum class GroupScore { ModelOutputs, GoldLabels };

class GroupTable {
 public:
  GroupTable() = default;
  GroupTable(std::map<GroupKey, GroupEntry> entries, bool fine_keys)
      : entries_(std::move(entries)), fine_keys_(fine_keys) {}

  const std::map<GroupKey, GroupEntry>& entries() const { return entries_; }
  bool fine_keys() const { return fine_keys_; }
  GroupKey key_for(const Example& x, const InterventionDescriptor& edit) const;
  /// Throws NotFoundError for keys with no support.
  const GroupEntry& lookup(const Example& x, const InterventionDescriptor& edit) const;

 private:
  std::map<GroupKey, GroupEntry> entries_;
  bool fine_keys_ = false;
};

/// Per edit key, mean of score(counterfactual) - score(base). `blackbox` is
/// required for ModelOutputs (CaCE) and ignored for GoldLabels (ATE).
GroupTable fit_group_table(std::span<const CounterfactualPair> pairs, GroupScore score, const Encoder* blackbox,
                           bool fine_keys = false, Exec exec = Exec::Serial);

enum class BaselineKind { Approx, Random, CaCE, ATE };
const char* to_string(BaselineKind kind);

struct BaselineContext {
  const Encoder* reference = nullptr;        // Approx / Random
  std::span<const Example> pool;             // Approx / Random
  const GroupTable* table = nullptr;         // CaCE / ATE
};

EffectVector estimate_baseline(BaselineKind kind, const BaselineContext& ctx, const Example& x,
                               const InterventionDescriptor& edit, CounterRng& rng);

class BaselineExplainer final : public Explainer {
 public:
  BaselineExplainer(BaselineKind kind, BaselineContext ctx, std::uint64_t seed)
      : kind_(kind), ctx_(ctx), seed_(seed) {}
  std::string name() const override { return to_string(kind_); }
  EffectVector estimate(const Example& x, const InterventionDescriptor& edit, std::uint64_t pair_key) const override;

 private:
  BaselineKind kind_;
  BaselineContext ctx_;
  std::uint64_t seed_;
};

/// Per-pair stream used by every sampling estimator.
CounterRng estimate_stream(std::uint64_t seed, std::uint64_t pair_key);

}  // namespace cpm
