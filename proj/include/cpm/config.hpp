// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cpm/attribution.hpp"
#include "cpm/encoder.hpp"
#include "cpm/evalsuite.hpp"
#include "cpm/explainers.hpp"
#include "cpm/objectives.hpp"
#include "cpm/scm.hpp"
#include "cpm/train.hpp"

namespace cpm {

/// Everything a run needs. Serialized as one flat JSON object whose keys are
/// namespaced ("scm.k", "train.w_hi", ...); every key is optional and falls
/// back to the default below, unknown keys are rejected.
struct RunConfig {
  // scm.*
  ScmConfig scm;
  std::size_t n_train = 2000;
  std::size_t n_dev = 500;
  std::size_t n_test = 500;
  std::uint64_t data_seed = 0;
  PairStrategy pair_strategy = PairStrategy::HumanLike;

  // model.*
  EncoderConfig model;  // vocab_size and concepts follow scm
  std::uint64_t model_seed = 0;

  // train.*
  TrainConfig blackbox_train;
  TrainConfig cpm_train;
  LossWeights weights;

  // eval.*
  SourceStrategy source_strategy = SourceStrategy::GoldLabel;
  std::uint64_t eval_seed = 0;
  std::vector<std::string> explainers;  // empty = every explainer the inputs allow
  std::vector<DistMetric> metrics{kAllMetrics.begin(), kAllMetrics.end()};
  bool fine_group_keys = false;
  bool eval_parallel = true;
  SLearnerConfig slearner;
  std::vector<int> debias_concepts;  // empty = all

  // ig.*
  IgConfig ig;
  std::size_t ig_examples = 100;  // 0 = every example in the input file

  RunConfig();

  /// Parses a flat JSON document; ConfigError for unknown keys, wrong types
  /// or invalid values. The result is validated.
  static RunConfig from_json(std::string_view text);
  /// Resolved document with every key, in a fixed order.
  std::string to_json() const;
  void validate() const;
  /// Sets every seed (data, model, training, evaluation).
  void override_seed(std::uint64_t seed);
  /// Model config with vocabulary and concept count filled from scm.
  EncoderConfig encoder_config() const;
  VocabLayout layout() const { return VocabLayout::from(scm); }
};

/// Names accepted by eval.explainers / --explainers.
const std::vector<std::string>& known_explainers();

/// Train, dev and test splits with seeds derived from the data seed.
struct DataSplits {
  std::vector<Example> train;
  std::vector<Example> dev;
  std::vector<Example> test;
};
DataSplits generate_splits(const RunConfig& cfg);

}  // namespace cpm
