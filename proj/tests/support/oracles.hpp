// SPDX-License-Identifier: Apache-2.0
// Independent reference computations shared by the unit tests and the
// acceptance binary.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cpm/encoder.hpp"
#include "cpm/objectives.hpp"
#include "cpm/rng.hpp"
#include "cpm/scm.hpp"
#include "cpm/tape.hpp"

namespace cpm::oracle {

/// Elementwise comparison used by every finite-difference check: relative
/// error against the larger magnitude, with an absolute floor for entries
/// that are zero up to roundoff on both sides.
inline double rel_err(double analytic, double numeric, double floor = 1e-8) {
  const double diff = std::abs(analytic - numeric);
  if (diff <= floor) return 0.0;
  return diff / std::max(std::abs(analytic), std::abs(numeric));
}

struct FdReport {
  double max_rel = 0.0;
  double max_abs = 0.0;  // unfloored |analytic - numeric|
  std::size_t checked = 0;
};

/// Records a scalar loss of `model` on a fresh tape.
using LossFn = std::function<Var(Tape&, const Encoder&, const Encoder::Bound&)>;

inline double loss_value(const Encoder& model, const LossFn& loss) {
  Tape tape;
  const auto bound = model.bind(tape);
  return tape.value(loss(tape, model, bound))[0];
}

/// Central differences (step h) against the tape gradient for every
/// parameter entry whose analytic or numeric derivative is nonzero, plus
/// `zero_samples` entries where both vanish.
inline FdReport fd_check_params(Encoder model, const LossFn& loss, double h = 1e-5) {
  Tape tape;
  const auto bound = model.bind(tape);
  tape.backward(loss(tape, model, bound));
  FdReport rep;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const auto g = tape.grad(bound.vars[i]);
    auto& data = model.params()[i].data;
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double saved = data[j];
      data[j] = saved + h;
      const double up = loss_value(model, loss);
      data[j] = saved - h;
      const double down = loss_value(model, loss);
      data[j] = saved;
      const double numeric = (up - down) / (2 * h);
      if (g[j] == 0.0 && numeric == 0.0) continue;
      rep.max_rel = std::max(rep.max_rel, rel_err(g[j], numeric));
      rep.max_abs = std::max(rep.max_abs, std::abs(g[j] - numeric));
      ++rep.checked;
    }
  }
  return rep;
}

/// Small architecture for gradient checks: 2 concepts, tiny widths.
inline ScmConfig tiny_scm() {
  ScmConfig c;
  c.k = 2;
  c.vocab_noise = 6;
  c.tokens_per_concept_value = 2;
  c.seq_len = 6;
  return c;
}

inline EncoderConfig tiny_encoder(const ScmConfig& scm) {
  EncoderConfig e;
  e.vocab_size = VocabLayout::from(scm).size();
  e.embed_dim = 5;
  e.hidden_layers = 2;
  e.hidden_width = 8;
  e.intervention_layer = 1;
  e.site_width = 3;
  e.concepts = scm.k;
  e.probe_width = 4;
  return e;
}

/// Random model with parameters perturbed away from initialization so every
/// layer (including zero-initialized biases) carries generic values.
inline Encoder random_model(const EncoderConfig& cfg, std::uint64_t seed, bool probes) {
  Encoder m = Encoder::random(cfg, seed);
  if (probes) m.add_probes(seed + 1);
  CounterRng rng(seed, "oracle/jitter");
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    for (double& v : m.params()[i].data) v += rng.normal(0.0, 0.3);
  }
  return m;
}

inline std::vector<double> logits_of(const Encoder& m, std::span<const TokenId> tokens) {
  const auto p = m.predict(tokens);
  return {p.logits.begin(), p.logits.end()};
}

/// Macro-F1 from an explicit confusion matrix.
inline double macro_f1(std::span<const int> predicted, std::span<const int> gold, int classes) {
  std::vector<std::vector<long>> cm(classes, std::vector<long>(classes, 0));
  for (std::size_t i = 0; i < gold.size(); ++i) ++cm[gold[i]][predicted[i]];
  double total = 0.0;
  for (int c = 0; c < classes; ++c) {
    long tp = cm[c][c], fp = 0, fn = 0;
    for (int o = 0; o < classes; ++o) {
      if (o == c) continue;
      fp += cm[o][c];
      fn += cm[c][o];
    }
    const double precision = tp + fp > 0 ? double(tp) / double(tp + fp) : 0.0;
    const double recall = tp + fn > 0 ? double(tp) / double(tp + fn) : 0.0;
    total += precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  }
  return total / classes;
}

/// Bucket rule in closed form: distance from the middle class is the number
/// of thresholds (|s| >= k/6 for s != 0, |s| >= k/2) the magnitude reaches.
inline int bucket(int s, int k) {
  const int m = std::abs(s);
  const int level = (m > 0 && 6 * m >= k ? 1 : 0) + (2 * m >= k ? 1 : 0);
  return 2 + (s < 0 ? -level : level);
}

}  // namespace cpm::oracle
