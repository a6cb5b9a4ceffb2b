// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>

#include "cpm/encoder.hpp"
#include "cpm/scm.hpp"
#include "cpm/tape.hpp"

namespace cpm {

struct LossWeights {
  double w_mimic = 1.0;
  double w_in = 3.0;
  double w_hi = 3.0;
  double w_multi = 1.0;
  double temperature = 2.0;

  void validate() const;
};

/// Distillation cross-entropy: -sum softmax(teacher/T) * log softmax(student/T).
/// The teacher enters as a constant.
Var smoothed_ce(Tape& tape, std::span<const double> teacher_logits, Var student_logits, double temperature);
double smoothed_ce(std::span<const double> teacher_logits, std::span<const double> student_logits,
                   double temperature);

// Per-example tape builders. Teacher logits come from the frozen black box.

Var record_mimic(Tape& tape, const Encoder& proxy, const Encoder::Bound& bound, const Probs& teacher_logits,
                 std::span<const TokenId> tokens, double temperature);

Var record_in(Tape& tape, const Encoder& proxy, const Encoder::Bound& bound, const Probs& teacher_cf_logits,
              std::span<const TokenId> base_tokens, const InterventionDescriptor& edit,
              const VocabLayout& layout, double temperature);

Var record_hi(Tape& tape, const Encoder& proxy, const Encoder::Bound& bound, const Probs& teacher_cf_logits,
              std::span<const TokenId> base_tokens, std::span<const TokenId> source_tokens, int concept_id,
              double temperature);

/// Summed probe cross-entropy over all concepts, reading the site slices of
/// `layer` (the intervention-layer activation of a forward already on tape).
Var record_multi(Tape& tape, const Encoder& proxy, const Encoder::Bound& bound, Var layer,
                 std::span<const ConceptValue> concepts);

// Value-level losses.

double loss_mimic(const Encoder& blackbox, const Encoder& proxy, std::span<const Example> batch,
                  double temperature);
double loss_in(const Encoder& blackbox, const Encoder& proxy, const CounterfactualPair& pair,
               const VocabLayout& layout, double temperature);
/// Throws UsageError unless source carries the pair's edit target.
double loss_hi(const Encoder& blackbox, const Encoder& proxy, const CounterfactualPair& pair,
               const Example& source, double temperature);
double loss_multi(const Encoder& proxy, std::span<const Example> batch);

}  // namespace cpm
