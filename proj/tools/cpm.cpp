// SPDX-License-Identifier: Apache-2.0
// Command-line front end: generate, train-blackbox, train-cpm, evaluate,
// attribute, debias. Exit codes: 0 ok, 1 internal, 2 config/usage, 3 missing
// or unreadable file, 4 schema/input, 5 not found.
#include <cstdio>
#include <exception>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "cpm/app.hpp"
#include "cpm/error.hpp"
#include "cpm/io.hpp"

namespace {

using namespace cpm;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Usage: return 2;
    case ErrorKind::Io: return 3;
    case ErrorKind::Schema:
    case ErrorKind::Input: return 4;
    case ErrorKind::NotFound: return 5;
  }
  return 1;
}

int fail(const char* category, const std::string& message, int code) {
  std::string line = message;
  for (char& c : line) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  std::fprintf(stderr, "error: %s: %s\n", category, line.c_str());
  return code;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string data;
  std::string kind;
  std::string pairs;
  std::string blackbox;
  std::string cpm_in;
  std::string cpm_hi;
  std::string checkpoint;
  std::string examples;
  std::string explainers;
  std::string metric;
};

std::optional<fs::path> opt_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

RunConfig resolve_config(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::from_json(read_file(o.config));
  if (o.seed) cfg.override_seed(*o.seed);
  if (!o.explainers.empty()) cfg.explainers = split_list(o.explainers);
  if (!o.metric.empty()) {
    if (o.metric == "all") {
      cfg.metrics.assign(kAllMetrics.begin(), kAllMetrics.end());
    } else {
      cfg.metrics = {metric_from_string(o.metric)};
    }
  }
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal proxy model pipeline on a synthetic structural causal model"};
  app.require_subcommand(1);
  Options o;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Flat JSON config (namespaced keys); defaults when omitted");
    sub->add_option("--out", o.out, "Output directory")->required();
    sub->add_option("--seed", o.seed, "Overrides every seed in the config");
  };

  auto* gen = app.add_subcommand("generate", "Generate train/dev/test data and counterfactual pairs");
  common(gen);

  auto* tbb = app.add_subcommand("train-blackbox", "Train the black-box classifier");
  common(tbb);
  tbb->add_option("--data", o.data, "Directory written by generate")->required();

  auto* tcpm = app.add_subcommand("train-cpm", "Train a causal proxy model of the black box");
  common(tcpm);
  tcpm->add_option("--kind", o.kind, "Proxy kind")->required()->check(CLI::IsMember({"in", "hi"}));
  tcpm->add_option("--data", o.data, "Directory written by generate")->required();
  tcpm->add_option("--blackbox", o.blackbox, "Black-box checkpoint")->required();
  tcpm->add_option("--pairs", o.pairs, "Training pairs (default: <data>/pairs.jsonl)");

  auto* ev = app.add_subcommand("evaluate", "Benchmark explainers on counterfactual pairs");
  common(ev);
  ev->add_option("--data", o.data, "Directory written by generate")->required();
  ev->add_option("--blackbox", o.blackbox, "Black-box checkpoint")->required();
  ev->add_option("--cpm-in", o.cpm_in, "CPM_IN checkpoint");
  ev->add_option("--cpm-hi", o.cpm_hi, "CPM_HI checkpoint");
  ev->add_option("--pairs", o.pairs, "Evaluation pairs (default: <data>/test_pairs.jsonl)");
  ev->add_option("--examples", o.examples, "Factual examples the pairs refer to (default: <data>/test.jsonl)");
  ev->add_option("--explainers", o.explainers, "Comma list of explainers (default: all available)");
  ev->add_option("--metric", o.metric, "Metric to report")->check(CLI::IsMember({"l2", "cosine", "normdiff", "all"}));

  auto* attr = app.add_subcommand("attribute", "Concept-mediated integrated-gradients attributions");
  common(attr);
  attr->add_option("--checkpoint", o.checkpoint, "CPM_HI checkpoint")->required();
  attr->add_option("--examples", o.examples, "Examples to attribute (JSONL)")->required();

  auto* deb = app.add_subcommand("debias", "Cramer's V before and after unknown-source debiasing");
  common(deb);
  deb->add_option("--checkpoint", o.checkpoint, "CPM_HI checkpoint")->required();
  deb->add_option("--data", o.data, "Directory written by generate")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    const RunConfig cfg = resolve_config(o);
    const fs::path out = o.out;
    if (gen->parsed()) {
      cmd_generate(cfg, out);
    } else if (tbb->parsed()) {
      cmd_train_blackbox(cfg, o.data, out);
    } else if (tcpm->parsed()) {
      cmd_train_cpm(o.kind == "in" ? TrainKind::CpmIn : TrainKind::CpmHi, cfg, o.data, opt_path(o.pairs), o.blackbox,
                    out);
    } else if (ev->parsed()) {
      EvaluateInputs in;
      in.data_dir = o.data;
      in.blackbox = o.blackbox;
      in.cpm_in = opt_path(o.cpm_in);
      in.cpm_hi = opt_path(o.cpm_hi);
      in.pairs = opt_path(o.pairs);
      in.examples = opt_path(o.examples);
      cmd_evaluate(cfg, in, out);
    } else if (attr->parsed()) {
      cmd_attribute(cfg, o.checkpoint, o.examples, out);
    } else if (deb->parsed()) {
      cmd_debias(cfg, o.checkpoint, o.data, out);
    }
  } catch (const Error& e) {
    return fail(to_string(e.kind()), e.what(), exit_code(e.kind()));
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 0;
}
