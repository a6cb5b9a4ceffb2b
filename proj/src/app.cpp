// SPDX-License-Identifier: Apache-2.0
#include "cpm/app.hpp"

#include <algorithm>
#include <chrono>

#include <nlohmann/json.hpp>

#include "cpm/attribution.hpp"
#include "cpm/error.hpp"
#include "cpm/evalsuite.hpp"
#include "cpm/explainers.hpp"
#include "cpm/io.hpp"
#include "cpm/parallel.hpp"

namespace cpm {

using ojson = nlohmann::ordered_json;

std::string RunManifest::to_json() const {
  ojson j;
  j["command"] = command;
  j["config_hash"] = config_hash;
  j["seeds"] = ojson::object();
  for (const auto& [k, v] : seeds) j["seeds"][k] = v;
  j["inputs"] = ojson::array();
  for (const auto& [p, d] : inputs) j["inputs"].push_back({{"path", p}, {"digest", d}});
  j["outputs"] = ojson::array();
  for (const auto& [p, d] : outputs) j["outputs"].push_back({{"file", p}, {"digest", d}});
  j["duration_seconds"] = duration_seconds;
  return j.dump(2) + "\n";
}

namespace {

// Tracks inputs and outputs of one command and finishes with the manifest.
class Run {
 public:
  Run(std::string command, const RunConfig& cfg, fs::path out_dir)
      : out_(std::move(out_dir)), start_(std::chrono::steady_clock::now()) {
    cfg.validate();
    manifest_.command = std::move(command);
    const std::string resolved = cfg.to_json();
    manifest_.config_hash = digest_hex(resolved);
    manifest_.seeds = {{"scm", cfg.data_seed},
                       {"model", cfg.model_seed},
                       {"train", cfg.cpm_train.seed},
                       {"blackbox_train", cfg.blackbox_train.seed},
                       {"eval", cfg.eval_seed},
                       {"slearner", cfg.slearner.seed}};
    config_text_ = resolved;
  }

  std::string read(const fs::path& path) {
    std::string text = read_file(path);
    manifest_.inputs.emplace_back(path.string(), digest_hex(text));
    return text;
  }

  std::string digest_of(const fs::path& path) const {
    for (const auto& [p, d] : manifest_.inputs) {
      if (p == path.string()) return d;
    }
    return {};
  }

  void write(const std::string& name, std::string_view content) {
    write_file_atomic(out_ / name, content);
    manifest_.outputs.emplace_back(name, digest_hex(content));
  }

  RunManifest finish() {
    write(files::kConfig, config_text_);
    manifest_.duration_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write_file_atomic(out_ / files::kManifest, manifest_.to_json());
    return manifest_;
  }

 private:
  fs::path out_;
  std::chrono::steady_clock::time_point start_;
  RunManifest manifest_;
  std::string config_text_;
};

std::vector<Example> load_dataset(Run& run, const fs::path& path, const RunConfig& cfg) {
  auto data = dataset_from_jsonl(run.read(path), path.string());
  validate_dataset(data, cfg.scm, path.string());
  return data;
}

std::vector<CounterfactualPair> load_pairs(Run& run, const fs::path& path, std::span<const Example> factual,
                                           const RunConfig& cfg) {
  return pairs_from_jsonl(run.read(path), factual, cfg.scm, path.string());
}

Encoder load_checkpoint(Run& run, const fs::path& path, const RunConfig& cfg) {
  Encoder model = checkpoint_from_json(run.read(path), path.string());
  const auto& mc = model.config();
  const auto want = cfg.encoder_config();
  if (mc.vocab_size != want.vocab_size || mc.concepts != want.concepts) {
    throw ConfigError(path.string() + ": checkpoint vocabulary/concepts (" + std::to_string(mc.vocab_size) + "/" +
                      std::to_string(mc.concepts) + ") do not match the config (" +
                      std::to_string(want.vocab_size) + "/" + std::to_string(want.concepts) + ")");
  }
  return model;
}

Exec exec_of(bool parallel) { return parallel ? Exec::Parallel : Exec::Serial; }

}  // namespace

RunManifest cmd_generate(const RunConfig& cfg, const fs::path& out_dir) {
  Run run("generate", cfg, out_dir);
  const DataSplits splits = generate_splits(cfg);
  const auto pairs = build_pairs(splits.train, cfg.pair_strategy, cfg.scm, CounterRng(cfg.data_seed, "pairs").at(0));
  run.write(files::kTrain, dataset_to_jsonl(splits.train));
  run.write(files::kDev, dataset_to_jsonl(splits.dev));
  run.write(files::kTest, dataset_to_jsonl(splits.test));
  run.write(files::kPairs, pairs_to_jsonl(pairs));
  run.write(files::kDevPairs, pairs_to_jsonl(true_pairs(splits.dev, cfg.scm)));
  run.write(files::kTestPairs, pairs_to_jsonl(true_pairs(splits.test, cfg.scm)));
  return run.finish();
}

RunManifest cmd_train_blackbox(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir) {
  Run run("train-blackbox", cfg, out_dir);
  const auto train_data = load_dataset(run, data_dir / files::kTrain, cfg);
  const auto dev_data = load_dataset(run, data_dir / files::kDev, cfg);
  const Encoder init = Encoder::random(cfg.encoder_config(), cfg.model_seed);
  TrainInputs in;
  in.train = train_data;
  in.dev = dev_data;
  in.layout = cfg.layout();
  const TrainResult result = train(TrainKind::Blackbox, in, {}, cfg.blackbox_train, &init);
  run.write("blackbox.json", checkpoint_to_json(result.model));
  run.write("blackbox_log.csv", result.log.to_csv());
  return run.finish();
}

RunManifest cmd_train_cpm(TrainKind kind, const RunConfig& cfg, const fs::path& data_dir,
                          const std::optional<fs::path>& pairs, const fs::path& blackbox, const fs::path& out_dir) {
  if (kind == TrainKind::Blackbox) throw UsageError("train-cpm needs kind 'in' or 'hi'");
  const std::string stem = kind == TrainKind::CpmIn ? "cpm_in" : "cpm_hi";
  Run run("train-cpm-" + std::string(kind == TrainKind::CpmIn ? "in" : "hi"), cfg, out_dir);
  const auto train_data = load_dataset(run, data_dir / files::kTrain, cfg);
  const auto dev_data = load_dataset(run, data_dir / files::kDev, cfg);
  const auto train_pairs = load_pairs(run, pairs.value_or(data_dir / files::kPairs), train_data, cfg);
  const auto dev_pairs = load_pairs(run, data_dir / files::kDevPairs, dev_data, cfg);
  const Encoder bb = load_checkpoint(run, blackbox, cfg);
  if (kind == TrainKind::CpmHi && bb.config().site_width * cfg.scm.k > bb.config().hidden_width) {
    throw ConfigError("model.site_width * scm.k exceeds model.hidden_width");
  }
  TrainInputs in;
  in.train = train_data;
  in.dev = dev_data;
  in.pairs = train_pairs;
  in.dev_pairs = dev_pairs;
  in.blackbox = &bb;
  in.layout = cfg.layout();
  const TrainResult result = train(kind, in, cfg.weights, cfg.cpm_train);
  run.write(stem + ".json", checkpoint_to_json(result.model));
  run.write(stem + "_log.csv", result.log.to_csv());
  return run.finish();
}

RunManifest cmd_evaluate(const RunConfig& cfg, const EvaluateInputs& inputs, const fs::path& out_dir) {
  Run run("evaluate", cfg, out_dir);
  const Exec exec = exec_of(cfg.eval_parallel);

  std::vector<std::string> wanted = cfg.explainers;
  if (wanted.empty()) {
    for (const auto& name : known_explainers()) {
      const bool needs_in = name.starts_with("cpm_in");
      const bool needs_hi = name.starts_with("cpm_hi");
      if ((needs_in && !inputs.cpm_in) || (needs_hi && !inputs.cpm_hi)) continue;
      wanted.push_back(name);
    }
  }
  const auto wants = [&](std::string_view n) { return std::find(wanted.begin(), wanted.end(), n) != wanted.end(); };
  if ((wants("cpm_in") || wants("cpm_in_self")) && !inputs.cpm_in) {
    throw UsageError("explainer cpm_in needs a CPM_IN checkpoint (--cpm-in)");
  }
  if ((wants("cpm_hi") || wants("cpm_hi_self")) && !inputs.cpm_hi) {
    throw UsageError("explainer cpm_hi needs a CPM_HI checkpoint (--cpm-hi)");
  }

  const auto train_data = load_dataset(run, inputs.data_dir / files::kTrain, cfg);
  const auto examples = load_dataset(run, inputs.examples.value_or(inputs.data_dir / files::kTest), cfg);
  const auto pairs = load_pairs(run, inputs.pairs.value_or(inputs.data_dir / files::kTestPairs), examples, cfg);
  std::vector<CounterfactualPair> train_pairs;
  if (wants("cace") || wants("ate")) {
    train_pairs = load_pairs(run, inputs.data_dir / files::kPairs, train_data, cfg);
  }
  const Encoder bb = load_checkpoint(run, inputs.blackbox, cfg);
  std::optional<Encoder> cpm_in, cpm_hi;
  if (inputs.cpm_in) cpm_in = load_checkpoint(run, *inputs.cpm_in, cfg);
  if (inputs.cpm_hi) cpm_hi = load_checkpoint(run, *inputs.cpm_hi, cfg);

  SourcePool pool(train_data, cfg.scm.k);
  if (cpm_hi && cfg.source_strategy == SourceStrategy::ProbePredicted) pool.index_probe_predictions(*cpm_hi, exec);

  const VocabLayout layout = cfg.layout();
  const auto truth = true_effects(bb, pairs, exec);
  const std::uint64_t seed = cfg.eval_seed;
  const std::vector<std::uint64_t> seeds{seed};

  BenchReport report;
  std::vector<EstimateRecord> records;
  const auto record = [&](const std::string& name, const Explainer& explainer) {
    ExplainerRun r = run_explainer(explainer, truth, pairs, exec);
    report.add(name, std::span(&r.summary, 1), seeds, cfg.metrics);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (r.estimates[i]) records.push_back({i, name, pairs[i].edit, *r.estimates[i]});
    }
  };

  std::optional<SLearnerModel> slearner;
  std::optional<GroupTable> cace_table, ate_table;
  for (const auto& name : wanted) {
    if (name == "cpm_in") {
      record(name, CpmInExplainer(*cpm_in, bb, layout));
    } else if (name == "cpm_hi") {
      record(name, CpmHiExplainer(*cpm_hi, bb, pool, cfg.source_strategy, seed));
    } else if (name == "cpm_in_self") {
      const auto s = self_explain_report(*cpm_in, ProxyKind::In, pairs, pool, cfg.source_strategy, seed, layout, exec);
      report.add(name, std::span(&s, 1), seeds, cfg.metrics);
    } else if (name == "cpm_hi_self") {
      const auto s = self_explain_report(*cpm_hi, ProxyKind::Hi, pairs, pool, cfg.source_strategy, seed, layout, exec);
      report.add(name, std::span(&s, 1), seeds, cfg.metrics);
    } else if (name == "slearner") {
      SLearnerConfig sc = cfg.slearner;
      sc.seed = seed;
      slearner = fit_slearner(bb, train_data, {}, sc, exec);
      record(name, SLearnerExplainer(*slearner));
    } else if (name == "approx" || name == "random") {
      BaselineContext ctx;
      ctx.reference = &bb;
      ctx.pool = train_data;
      record(name, BaselineExplainer(name == "approx" ? BaselineKind::Approx : BaselineKind::Random, ctx, seed));
    } else if (name == "cace") {
      cace_table = fit_group_table(train_pairs, GroupScore::ModelOutputs, &bb, cfg.fine_group_keys, exec);
      BaselineContext ctx;
      ctx.table = &*cace_table;
      record(name, BaselineExplainer(BaselineKind::CaCE, ctx, seed));
    } else if (name == "ate") {
      ate_table = fit_group_table(train_pairs, GroupScore::GoldLabels, nullptr, cfg.fine_group_keys, exec);
      BaselineContext ctx;
      ctx.table = &*ate_table;
      record(name, BaselineExplainer(BaselineKind::ATE, ctx, seed));
    }
  }

  report.macro_f1.emplace_back("blackbox", macro_f1(bb, examples, exec));
  if (cpm_in) report.macro_f1.emplace_back("cpm_in", macro_f1(*cpm_in, examples, exec));
  if (cpm_hi) report.macro_f1.emplace_back("cpm_hi", macro_f1(*cpm_hi, examples, exec));

  ojson j = ojson::parse(report.to_json());
  ojson used = ojson::object();
  used["blackbox"] = run.digest_of(inputs.blackbox);
  if (inputs.cpm_in) used["cpm_in"] = run.digest_of(*inputs.cpm_in);
  if (inputs.cpm_hi) used["cpm_hi"] = run.digest_of(*inputs.cpm_hi);
  j["checkpoints"] = used;
  j["source_strategy"] = to_string(cfg.source_strategy);
  run.write("report.json", j.dump(2) + "\n");
  run.write("report.txt", report.to_text());
  run.write("estimates.jsonl", estimates_to_jsonl(records));
  return run.finish();
}

RunManifest cmd_attribute(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& examples,
                          const fs::path& out_dir) {
  Run run("attribute", cfg, out_dir);
  const Encoder proxy = load_checkpoint(run, checkpoint, cfg);
  if (!proxy.has_probes()) throw ConfigError(checkpoint.string() + ": attribution needs a CPM_HI checkpoint");
  const auto data = load_dataset(run, examples, cfg);
  const std::size_t n = cfg.ig_examples == 0 ? data.size() : std::min(cfg.ig_examples, data.size());
  const auto tables = map_indexed<AttributionTable>(exec_of(cfg.eval_parallel), n, [&](std::size_t i) {
    return attribution_table(proxy, data[i], cfg.ig);
  });
  std::string jsonl, text;
  for (const auto& t : tables) {
    jsonl += t.to_jsonl();
    text += t.to_text();
    text += "\n";
  }
  run.write("attributions.jsonl", jsonl);
  run.write("attributions.txt", text);
  return run.finish();
}

RunManifest cmd_debias(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data_dir,
                       const fs::path& out_dir) {
  Run run("debias", cfg, out_dir);
  const Encoder proxy = load_checkpoint(run, checkpoint, cfg);
  if (!proxy.has_probes()) throw ConfigError(checkpoint.string() + ": debiasing needs a CPM_HI checkpoint");
  const auto train_data = load_dataset(run, data_dir / files::kTrain, cfg);
  const auto test_data = load_dataset(run, data_dir / files::kTest, cfg);
  SourcePool pool(train_data, cfg.scm.k);
  std::vector<int> concepts = cfg.debias_concepts;
  if (concepts.empty()) {
    for (int c = 0; c < cfg.scm.k; ++c) concepts.push_back(c);
  }
  ojson j;
  j["checkpoint"] = run.digest_of(checkpoint);
  j["statistic"] = "cramers_v";
  j["reports"] = ojson::array();
  for (int c : concepts) {
    const DebiasReport r = debias_concept(proxy, c, test_data, pool, cfg.eval_seed, exec_of(cfg.eval_parallel));
    j["reports"].push_back({{"concept", r.concept_id}, {"before", r.before}, {"after", r.after}});
  }
  run.write("debias.json", j.dump(2) + "\n");
  return run.finish();
}

}  // namespace cpm
