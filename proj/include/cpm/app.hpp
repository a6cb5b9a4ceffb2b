// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cpm/config.hpp"
#include "cpm/train.hpp"

namespace cpm {

namespace fs = std::filesystem;

/// What a command read and wrote. Written as manifest.json next to the
/// outputs; everything except duration_seconds is a function of the inputs.
struct RunManifest {
  std::string command;
  std::string config_hash;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<std::pair<std::string, std::string>> inputs;   // (path, digest)
  std::vector<std::pair<std::string, std::string>> outputs;  // (file name, digest)
  double duration_seconds = 0.0;

  std::string to_json() const;
};

/// File names used by generate and expected by the other commands.
namespace files {
inline constexpr const char* kTrain = "train.jsonl";
inline constexpr const char* kDev = "dev.jsonl";
inline constexpr const char* kTest = "test.jsonl";
inline constexpr const char* kPairs = "pairs.jsonl";
inline constexpr const char* kDevPairs = "dev_pairs.jsonl";
inline constexpr const char* kTestPairs = "test_pairs.jsonl";
inline constexpr const char* kConfig = "config.json";
inline constexpr const char* kManifest = "manifest.json";
}  // namespace files

struct EvaluateInputs {
  fs::path data_dir;                  // train.jsonl, pairs.jsonl
  fs::path blackbox;
  std::optional<fs::path> cpm_in;
  std::optional<fs::path> cpm_hi;
  std::optional<fs::path> pairs;      // default: data_dir/test_pairs.jsonl
  std::optional<fs::path> examples;   // factual examples the pairs refer to; default data_dir/test.jsonl
};

// Every command validates the config and its inputs before doing any work,
// echoes the resolved config and writes its manifest last.
RunManifest cmd_generate(const RunConfig& cfg, const fs::path& out_dir);
RunManifest cmd_train_blackbox(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir);
RunManifest cmd_train_cpm(TrainKind kind, const RunConfig& cfg, const fs::path& data_dir,
                          const std::optional<fs::path>& pairs, const fs::path& blackbox, const fs::path& out_dir);
RunManifest cmd_evaluate(const RunConfig& cfg, const EvaluateInputs& inputs, const fs::path& out_dir);
/// Attributions for the first ig.examples examples of `examples`.
RunManifest cmd_attribute(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& examples,
                          const fs::path& out_dir);
/// Sources come from data_dir/train.jsonl; correlations are measured on data_dir/test.jsonl.
RunManifest cmd_debias(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data_dir,
                       const fs::path& out_dir);

}  // namespace cpm
