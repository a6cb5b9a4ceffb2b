// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cpm/rng.hpp"

namespace cpm {

using TokenId = std::int32_t;

enum class ConceptValue : std::int8_t { Negative = -1, Unknown = 0, Positive = 1 };

inline constexpr std::array<ConceptValue, 3> kConceptValues = {
    ConceptValue::Negative, ConceptValue::Unknown, ConceptValue::Positive};

/// Position of a value in (Negative, Unknown, Positive) order; also the
/// class index used by concept probes.
constexpr int value_index(ConceptValue v) { return static_cast<int>(v) + 1; }
constexpr ConceptValue value_from_index(int i) { return static_cast<ConceptValue>(i - 1); }
constexpr int to_int(ConceptValue v) { return static_cast<int>(v); }
ConceptValue concept_value_from_int(int v);  // throws SchemaError outside {-1,0,1}

struct ScmConfig {
  int k = 4;
  int vocab_noise = 32;
  int tokens_per_concept_value = 3;
  int seq_len = 16;
  /// One (Negative, Unknown, Positive) categorical per concept; empty means
  /// uniform for every concept.
  std::vector<std::array<double, 3>> concept_priors;
  double label_noise = 0.05;
  double emit_prob = 0.9;
  double p_style = 0.15;
  double null_rate = 0.1;

  void validate() const;
  std::array<double, 3> prior(int concept_id) const;
};

/// Fixed vocabulary layout:
///   0                      PAD
///   1 .. 3kt               concept tokens, concept-major then value-major
///   next vocab_noise ids   style (noise) tokens
///   next 3k ids            intervention tokens, concept-major then value-major
struct VocabLayout {
  int k = 0;
  int tokens_per_value = 0;
  int noise = 0;

  static VocabLayout from(const ScmConfig& cfg) {
    return {cfg.k, cfg.tokens_per_concept_value, cfg.vocab_noise};
  }

  static constexpr TokenId pad() { return 0; }
  TokenId concept_token(int concept_id, ConceptValue v, int variant) const {
    return 1 + (concept_id * 3 + value_index(v)) * tokens_per_value + variant;
  }
  TokenId noise_begin() const { return 1 + 3 * k * tokens_per_value; }
  TokenId noise_token(int j) const { return noise_begin() + j; }
  TokenId intervention_begin() const { return noise_begin() + noise; }
  TokenId intervention_token(int concept_id, ConceptValue v) const {
    return intervention_begin() + concept_id * 3 + value_index(v);
  }
  int size() const { return intervention_begin() + 3 * k; }

  bool is_concept_token(TokenId t) const { return t >= 1 && t < noise_begin(); }
  bool is_noise_token(TokenId t) const { return t >= noise_begin() && t < intervention_begin(); }
  /// Concept index a concept token belongs to; -1 for other tokens.
  int concept_of(TokenId t) const {
    return is_concept_token(t) ? (t - 1) / (3 * tokens_per_value) : -1;
  }
};

struct Example {
  std::string id;
  std::vector<TokenId> tokens;
  std::vector<ConceptValue> concepts;
  int label = 0;
  std::uint64_t u_seed = 0;
  std::uint64_t v_seed = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

struct InterventionDescriptor {
  int concept_id = 0;
  ConceptValue target = ConceptValue::Unknown;
  friend bool operator==(InterventionDescriptor, InterventionDescriptor) = default;
};

enum class PairKind { TrueCF, HumanLike, Sampled, Null };
const char* to_string(PairKind kind);
PairKind pair_kind_from_string(std::string_view s);

struct CounterfactualPair {
  Example base;
  Example counterfactual;
  InterventionDescriptor edit;
  PairKind kind = PairKind::TrueCF;
};

enum class PairStrategy { HumanLike, Sampled };

/// Ordinal bucket of a concept sum s in [-k, k]: thresholds at -k/2, -k/6,
/// k/6, k/2 (for k = 4: s<=-2 -> 0, -1 -> 1, 0 -> 2, 1 -> 3, s>=2 -> 4).
int bucket_label(int sum, int k);

/// Concept values drawn from the exogenous seed u.
std::vector<ConceptValue> draw_concepts(const ScmConfig& cfg, std::uint64_t u_seed);

/// The structural model: tokens and label as a pure function of (u, v,
/// concepts). Each concept owns one slot of the v-driven permutation; the
/// slot holds one of the concept's indicative tokens when the concept is not
/// Unknown and its u-driven emission flag is set, and a style token
/// otherwise. All remaining slots hold v-driven style tokens.
Example realize(const ScmConfig& cfg, std::uint64_t u_seed, std::uint64_t v_seed,
                std::span<const ConceptValue> concepts, std::string id);

/// Re-runs the structural model from an example's stored seeds and concepts.
Example regenerate(const ScmConfig& cfg, const Example& ex);

std::vector<Example> generate_dataset(const ScmConfig& cfg, std::size_t n, std::uint64_t seed,
                                      std::string_view id_prefix = "x");

Example true_counterfactual(const Example& base, const InterventionDescriptor& edit,
                            const ScmConfig& cfg);

Example humanlike_counterfactual(const Example& base, const InterventionDescriptor& edit,
                                 const ScmConfig& cfg, std::uint64_t noise_seed);

/// Resamples each style token with probability cfg.p_style to a different
/// style token; appends "~h<noise_seed>" to the id when anything changed.
Example restyle(const Example& ex, const ScmConfig& cfg, std::uint64_t noise_seed);

/// Rebuilds an example from its id: factual ids are looked up, "root@code"
/// ids are regenerated with the coded concepts and "~h<seed>" suffixes
/// re-apply the style perturbation. Throws NotFoundError for an unknown
/// root and SchemaError for malformed ids.
Example resolve_example(std::string_view id, const std::unordered_map<std::string, const Example*>& factual,
                        const ScmConfig& cfg);

/// Pool members agreeing with `base` off edit.concept and carrying
/// edit.target at edit.concept, in pool order.
std::vector<std::size_t> matching_candidates(const Example& base, const InterventionDescriptor& edit,
                                             std::span<const Example> pool);

std::optional<Example> sample_counterfactual(const Example& base, const InterventionDescriptor& edit,
                                             std::span<const Example> pool, CounterRng& rng);

/// Training pairs. Each edit (concept, target != current) of each example
/// yields a pair and its mirror; the Sampled strategy skips edits with no
/// match and adds Null pairs, one per (example, concept) with probability
/// cfg.null_rate.
std::vector<CounterfactualPair> build_pairs(std::span<const Example> dataset, PairStrategy strategy,
                                            const ScmConfig& cfg, std::uint64_t seed);

/// Evaluation pairs: every example with every edit to a different value,
/// against its true counterfactual (one orientation).
std::vector<CounterfactualPair> true_pairs(std::span<const Example> dataset, const ScmConfig& cfg);

/// Edits with a target different from the example's current value.
std::vector<InterventionDescriptor> alternative_edits(const Example& ex);

/// Part of an id before the first '@' (ids of regenerated examples).
std::string_view root_id(std::string_view id);

}  // namespace cpm
