// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cpm/encoder.hpp"
#include "cpm/objectives.hpp"
#include "cpm/parallel.hpp"
#include "cpm/scm.hpp"

namespace cpm {

enum class TrainKind { Blackbox, CpmIn, CpmHi };
const char* to_string(TrainKind kind);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 1e-3;
  int eval_interval_steps = 50;
  int patience = 20;
  std::uint64_t seed = 0;
  /// Cap on dev pairs scored at each evaluation (0 = all).
  std::size_t eval_pairs = 0;
  /// Cap on optimizer steps (0 = epochs * steps_per_epoch). The learning
  /// rate decays linearly to 0 over the effective budget.
  long max_steps = 0;
  Exec exec = Exec::Serial;

  void validate() const;
};

struct EvalRecord {
  long step = 0;
  double l2 = 0.0;
  double cosine = 0.0;
  double normdiff = 0.0;
  double macro_f1 = 0.0;
};

struct EpochLog {
  std::vector<EvalRecord> records;
  std::string to_csv() const;  // header: step,l2,cosine,normdiff,macro_f1
};

struct TrainInputs {
  std::span<const Example> train;
  std::span<const Example> dev;
  std::span<const CounterfactualPair> pairs;      // CPM kinds: training pairs
  std::span<const CounterfactualPair> dev_pairs;  // CPM kinds: true-counterfactual dev pairs
  const Encoder* blackbox = nullptr;              // CPM kinds: frozen teacher
  VocabLayout layout;
};

struct TrainResult {
  Encoder model;
  EpochLog log;
  long steps = 0;
  long best_step = 0;
};

/// Proxy initialized from the black box: intervention-token rows redrawn from
/// normal(0, 0.02); CPM_HI proxies also get concept probes.
Encoder make_proxy(const Encoder& blackbox, TrainKind kind, const VocabLayout& layout, std::uint64_t seed);

/// Minibatch Adam with linear learning-rate decay and early stopping. Every
/// eval_interval_steps (and after the final step) the model is scored on dev:
/// Macro-F1 for the black box, Cosine ICaCE-Error for proxies. The best
/// checkpoint is kept; training stops after `patience` evaluations without
/// improvement. `init` is required for Blackbox and ignored otherwise.
TrainResult train(TrainKind kind, const TrainInputs& inputs, const LossWeights& weights, const TrainConfig& cfg,
                  const Encoder* init = nullptr);

}  // namespace cpm
