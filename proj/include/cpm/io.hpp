// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cpm/encoder.hpp"
#include "cpm/explainers.hpp"
#include "cpm/scm.hpp"

namespace cpm {

/// Whole-file read; IoError when the file is missing or unreadable.
std::string read_file(const std::filesystem::path& path);
/// Writes via a sibling temporary file and rename, so readers never observe
/// a partial file. Creates parent directories.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

/// 64-bit FNV-1a of the bytes, as 16 lowercase hex digits.
std::string digest_hex(std::string_view bytes);

// Datasets: one JSON object per line {id, tokens, concepts, label, u_seed, v_seed}.
std::string dataset_to_jsonl(std::span<const Example> data);
/// Throws SchemaError (with the line number) for malformed records.
std::vector<Example> dataset_from_jsonl(std::string_view text, const std::string& source = "dataset");
/// Checks records against the generator configuration (concept count, token range, label range).
void validate_dataset(std::span<const Example> data, const ScmConfig& cfg, const std::string& source = "dataset");

// Pairs: one JSON object per line {base_id, cf_id, concept, target, kind}.
std::string pairs_to_jsonl(std::span<const CounterfactualPair> pairs);
/// Rebuilds both sides of every pair from `factual` (see resolve_example).
std::vector<CounterfactualPair> pairs_from_jsonl(std::string_view text, std::span<const Example> factual,
                                                 const ScmConfig& cfg, const std::string& source = "pairs");

// Checkpoints: {"format", "version", "config", "arrays": [{name, shape, data}]}.
inline constexpr int kCheckpointVersion = 1;
std::string checkpoint_to_json(const Encoder& model);
Encoder checkpoint_from_json(std::string_view text, const std::string& source = "checkpoint");

struct EstimateRecord {
  std::size_t pair_id = 0;
  std::string explainer;
  InterventionDescriptor edit;
  EffectVector delta;
};
std::string estimates_to_jsonl(std::span<const EstimateRecord> records);

}  // namespace cpm
