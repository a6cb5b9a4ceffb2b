// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "cpm/encoder.hpp"

namespace cpm {

struct IgConfig {
  int steps = 50;
  std::vector<int> target_classes = {3, 4};

  void validate() const;
};

inline constexpr int kFullRow = -1;
inline constexpr int kResidualRow = -2;

struct AttributionRow {
  int concept_id = kFullRow;  // concept index, kFullRow or kResidualRow
  double target_score = 0.0;  // target-class probability mass at x
  double score = 0.0;         // sum of unnormalized token attributions
  std::vector<double> raw;           // unnormalized, one per token
  std::vector<double> token_scores;  // normalized to [-1, 1]
};

/// z-score across tokens, then rescale so max |score| == 1. Rows with zero
/// spread map to all zeros.
std::vector<double> normalize_scores(std::span<const double> raw);

/// Integrated gradients in embedding space from the all-PAD baseline, with
/// the backward pass restricted to `keep` at the intervention layer.
/// Midpoint rule over cfg.steps points; attribution per token is
/// sum_d (e - e')_d * mean_grad_d.
AttributionRow masked_ig(const Encoder& proxy, std::span<const TokenId> tokens, IndexRange keep,
                         const IgConfig& cfg);

AttributionRow mediated_ig(const Encoder& proxy, std::span<const TokenId> tokens, int concept_id,
                           const IgConfig& cfg);
AttributionRow full_ig(const Encoder& proxy, std::span<const TokenId> tokens, const IgConfig& cfg);
AttributionRow residual_ig(const Encoder& proxy, std::span<const TokenId> tokens, const IgConfig& cfg);

/// Target-class mass of the proxy on a token sequence.
double target_mass(const Encoder& proxy, std::span<const TokenId> tokens, const IgConfig& cfg);

struct AttributionTable {
  std::string example_id;
  std::vector<TokenId> tokens;
  int predicted_class = 0;
  std::vector<AttributionRow> rows;  // one per concept, in concept order

  /// One JSON object per row: {example_id, predicted_class, concept, score, token_scores}.
  std::string to_jsonl() const;
  /// Aligned, ANSI-free rendering: one line per concept with the summed raw
  /// score and the per-token normalized scores.
  std::string to_text() const;
};

AttributionTable attribution_table(const Encoder& proxy, const Example& x, const IgConfig& cfg);

}  // namespace cpm
