// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "cpm/params.hpp"
#include "cpm/scm.hpp"
#include "cpm/tape.hpp"

namespace cpm {

inline constexpr int kClasses = 5;
using Probs = std::array<double, kClasses>;

struct EncoderConfig {
  int vocab_size = 0;
  int embed_dim = 32;
  int hidden_layers = 3;
  int hidden_width = 64;
  int classes = kClasses;
  int intervention_layer = 2;
  int site_width = 16;
  int concepts = 4;
  int probe_width = 16;

  void validate() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// Site of concept `concept_id`: [concept_id * w_c, (concept_id + 1) * w_c) at the
/// intervention layer. Throws UsageError for an out-of-range concept.
InterventionSite site_for(int concept_id, const EncoderConfig& cfg);

/// Unassigned tail [k * w_c, w) of the intervention layer.
IndexRange residual_range(const EncoderConfig& cfg);

/// Appends the dedicated token for `edit`.
std::vector<TokenId> append_intervention_token(std::span<const TokenId> tokens,
                                               const InterventionDescriptor& edit,
                                               const VocabLayout& layout);

/// Bag-of-embeddings classifier:
///   embed -> mean-pool -> L x (affine + ReLU) -> affine -> softmax
/// Optionally carries one probe per concept (site slice -> ReLU hidden -> 3).
class Encoder {
 public:
  struct Bound {
    std::vector<Var> vars;  // parallel to params()
  };

  struct Output {
    Var logits;
    Var probs;
    Var pooled;
    std::vector<Var> hidden;  // activation after each hidden layer, post-hook
  };

  struct Prediction {
    Probs logits{};
    Probs probs{};
    int argmax() const;
  };

  Encoder(EncoderConfig cfg, ParamSet params);

  /// He-initialized hidden layers, unit-normal embeddings.
  static Encoder random(const EncoderConfig& cfg, std::uint64_t seed);
  static Encoder zeros(const EncoderConfig& cfg);

  const EncoderConfig& config() const { return cfg_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

  bool has_probes() const { return probe_begin_ < params_.size(); }
  void add_probes(std::uint64_t seed);
  /// Redraws the intervention-token embedding rows from normal(0, stddev).
  void reset_intervention_rows(const VocabLayout& layout, std::uint64_t seed, double stddev = 0.02);

  std::size_t embedding_index() const { return 0; }

  Bound bind(Tape& tape) const;

  Output forward(Tape& tape, const Bound& p, std::span<const TokenId> tokens,
                 const LayerHook& hook = {}) const;
  /// Forward from an explicit [n, embed_dim] row matrix (used for IG).
  Output forward_rows(Tape& tape, const Bound& p, Var rows, const LayerHook& hook = {}) const;

  /// Concept probe logits (3 classes) for a site slice.
  Var probe_logits(Tape& tape, const Bound& p, int concept_id, Var slice) const;

  Prediction predict(std::span<const TokenId> tokens) const;
  /// Logits of each concept probe on the tokens' own site slices.
  std::vector<std::array<double, 3>> probe_predict(std::span<const TokenId> tokens) const;

  /// Adds tape gradients of bound parameters into `grads` (same layout).
  void accumulate_grads(const Tape& tape, const Bound& p, ParamSet& grads) const;

  friend bool operator==(const Encoder&, const Encoder&) = default;

 private:
  void index_layout();

  EncoderConfig cfg_;
  ParamSet params_;
  std::size_t output_index_ = 0;
  std::size_t probe_begin_ = 0;
};

/// Forward callable with the (tape, tokens, hook) -> logits signature used by
/// interchange_forward.
struct EncoderLogits {
  const Encoder& model;
  const Encoder::Bound& bound;
  Var operator()(Tape& tape, std::span<const TokenId> tokens, const LayerHook& hook) const {
    return model.forward(tape, bound, tokens, hook).logits;
  }
};

}  // namespace cpm
