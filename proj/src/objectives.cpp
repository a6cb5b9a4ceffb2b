// SPDX-License-Identifier: Apache-2.0
#include "cpm/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "cpm/error.hpp"

namespace cpm {

namespace {

std::vector<double> softened(std::span<const double> logits, double temperature) {
  std::vector<double> p(logits.size());
  double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / temperature);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

}  // namespace

void LossWeights::validate() const {
  if (w_mimic < 0 || w_in < 0 || w_hi < 0 || w_multi < 0) throw ConfigError("loss weights must be >= 0");
  if (!(temperature > 0)) throw ConfigError("train.temperature must be > 0");
}

Var smoothed_ce(Tape& tape, std::span<const double> teacher_logits, Var student_logits, double temperature) {
  if (!(temperature > 0)) throw ConfigError("temperature must be > 0");
  const auto target = softened(teacher_logits, temperature);
  Var logp = tape.log_softmax(tape.scale(student_logits, 1.0 / temperature));
  return tape.scale(tape.dot(logp, target), -1.0);
}

double smoothed_ce(std::span<const double> teacher_logits, std::span<const double> student_logits,
                   double temperature) {
  Tape tape;
  Var s = tape.leaf(Tensor::vector(student_logits));
  return tape.value(smoothed_ce(tape, teacher_logits, s, temperature))[0];
}

Var record_mimic(Tape& tape, const Encoder& proxy, const Encoder::Bound& bound, const Probs& teacher_logits,
                 std::span<const TokenId> tokens, double temperature) {
  auto out = proxy.forward(tape, bound, tokens);
  return smoothed_ce(tape, teacher_logits, out.logits, temperature);
}

Var record_in(Tape& tape, const Encoder& proxy, const Encoder::Bound& bound, const Probs& teacher_cf_logits,
              std::span<const TokenId> base_tokens, const InterventionDescriptor& edit,
              const VocabLayout& layout, double temperature) {
  auto tokens = append_intervention_token(base_tokens, edit, layout);
  auto out = proxy.forward(tape, bound, tokens);
  return smoothed_ce(tape, teacher_cf_logits, out.logits, temperature);
}

Var record_hi(Tape& tape, const Encoder& proxy, const Encoder::Bound& bound, const Probs& teacher_cf_logits,
              std::span<const TokenId> base_tokens, std::span<const TokenId> source_tokens, int concept_id,
              double temperature) {
  const auto site = site_for(concept_id, proxy.config());
  Var logits = interchange_forward(tape, EncoderLogits{proxy, bound}, base_tokens, source_tokens, site);
  return smoothed_ce(tape, teacher_cf_logits, logits, temperature);
}

Var record_multi(Tape& tape, const Encoder& proxy, const Encoder::Bound& bound, Var layer,
                 std::span<const ConceptValue> concepts) {
  const auto& cfg = proxy.config();
  if (concepts.size() != static_cast<std::size_t>(cfg.concepts)) {
    throw UsageError("record_multi: expected one label per concept");
  }
  Var total;
  for (int i = 0; i < cfg.concepts; ++i) {
    Var slice = tape.slice(layer, site_for(i, cfg).range);
    Var logp = tape.log_softmax(proxy.probe_logits(tape, bound, i, slice));
    std::array<double, 3> onehot{};
    onehot[static_cast<std::size_t>(value_index(concepts[static_cast<std::size_t>(i)]))] = -1.0;
    Var ce = tape.dot(logp, onehot);
    total = total.valid() ? tape.add(total, ce) : ce;
  }
  return total;
}

double loss_mimic(const Encoder& blackbox, const Encoder& proxy, std::span<const Example> batch,
                  double temperature) {
  if (batch.empty()) throw UsageError("loss_mimic: empty batch");
  double total = 0.0;
  for (const auto& ex : batch) {
    auto t = blackbox.predict(ex.tokens);
    auto s = proxy.predict(ex.tokens);
    total += smoothed_ce(t.logits, s.logits, temperature);
  }
  return total / static_cast<double>(batch.size());
}

double loss_in(const Encoder& blackbox, const Encoder& proxy, const CounterfactualPair& pair,
               const VocabLayout& layout, double temperature) {
  auto teacher = blackbox.predict(pair.counterfactual.tokens);
  auto student = proxy.predict(append_intervention_token(pair.base.tokens, pair.edit, layout));
  return smoothed_ce(teacher.logits, student.logits, temperature);
}

double loss_hi(const Encoder& blackbox, const Encoder& proxy, const CounterfactualPair& pair,
               const Example& source, double temperature) {
  const auto ci = static_cast<std::size_t>(pair.edit.concept_id);
  if (ci >= source.concepts.size() || source.concepts[ci] != pair.edit.target) {
    throw UsageError("loss_hi: source " + source.id + " does not carry the edited concept value");
  }
  auto teacher = blackbox.predict(pair.counterfactual.tokens);
  Tape tape;
  auto bound = proxy.bind(tape);
  Var loss = record_hi(tape, proxy, bound, teacher.logits, pair.base.tokens, source.tokens, pair.edit.concept_id,
                       temperature);
  return tape.value(loss)[0];
}

double loss_multi(const Encoder& proxy, std::span<const Example> batch) {
  if (batch.empty()) throw UsageError("loss_multi: empty batch");
  double total = 0.0;
  for (const auto& ex : batch) {
    Tape tape;
    auto bound = proxy.bind(tape);
    auto out = proxy.forward(tape, bound, ex.tokens);
    Var layer = out.hidden[static_cast<std::size_t>(proxy.config().intervention_layer - 1)];
    total += tape.value(record_multi(tape, proxy, bound, layer, ex.concepts))[0];
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace cpm
