// SPDX-License-Identifier: Apache-2.0
#include "cpm/config.hpp"

#include <algorithm>
#include <functional>
#include <set>

#include <nlohmann/json.hpp>

#include "cpm/error.hpp"

namespace cpm {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

struct Key {
  std::string name;
  std::function<void(const RunConfig&, ojson&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

[[noreturn]] void bad_type(const std::string& key, const char* expected) {
  throw ConfigError("key '" + key + "' must be " + expected);
}

template <class T>
T as(const std::string& key, const json& v) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) bad_type(key, "a boolean");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) bad_type(key, "a string");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) bad_type(key, "a number");
  } else if constexpr (std::is_unsigned_v<T>) {
    if (!v.is_number_unsigned()) bad_type(key, "a non-negative integer");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) bad_type(key, "an integer");
  }
  return v.get<T>();
}

template <class T, class Owner>
Key field(std::string name, Owner RunConfig::*owner, T Owner::*member) {
  return {name, [=](const RunConfig& c, ojson& j) { j[name] = c.*owner.*member; },
          [=](RunConfig& c, const json& v) { c.*owner.*member = as<T>(name, v); }};
}

template <class T>
Key direct(std::string name, T RunConfig::*member) {
  return {name, [=](const RunConfig& c, ojson& j) { j[name] = c.*member; },
          [=](RunConfig& c, const json& v) { c.*member = as<T>(name, v); }};
}

Key exec_key(std::string name, TrainConfig RunConfig::*owner) {
  return {name, [=](const RunConfig& c, ojson& j) { j[name] = (c.*owner).exec == Exec::Parallel; },
          [=](RunConfig& c, const json& v) { (c.*owner).exec = as<bool>(name, v) ? Exec::Parallel : Exec::Serial; }};
}

std::vector<int> int_list(const std::string& key, const json& v) {
  if (!v.is_array()) bad_type(key, "an array of integers");
  std::vector<int> out;
  for (const auto& e : v) out.push_back(as<int>(key, e));
  return out;
}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    // scm.*
    k.push_back(field("scm.k", &RunConfig::scm, &ScmConfig::k));
    k.push_back(field("scm.vocab_noise", &RunConfig::scm, &ScmConfig::vocab_noise));
    k.push_back(field("scm.tokens_per_concept_value", &RunConfig::scm, &ScmConfig::tokens_per_concept_value));
    k.push_back(field("scm.seq_len", &RunConfig::scm, &ScmConfig::seq_len));
    k.push_back({"scm.concept_priors",
                 [](const RunConfig& c, ojson& j) {
                   ojson a = ojson::array();
                   for (const auto& p : c.scm.concept_priors) a.push_back(std::vector<double>(p.begin(), p.end()));
                   j["scm.concept_priors"] = a;
                 },
                 [](RunConfig& c, const json& v) {
                   if (!v.is_array()) bad_type("scm.concept_priors", "an array of [p_neg, p_unknown, p_pos] triples");
                   c.scm.concept_priors.clear();
                   for (const auto& e : v) {
                     if (!e.is_array() || e.size() != 3) {
                       bad_type("scm.concept_priors", "an array of [p_neg, p_unknown, p_pos] triples");
                     }
                     std::array<double, 3> p{};
                     for (std::size_t i = 0; i < 3; ++i) p[i] = as<double>("scm.concept_priors", e[i]);
                     c.scm.concept_priors.push_back(p);
                   }
                 }});
    k.push_back(field("scm.label_noise", &RunConfig::scm, &ScmConfig::label_noise));
    k.push_back(field("scm.emit_prob", &RunConfig::scm, &ScmConfig::emit_prob));
    k.push_back(field("scm.p_style", &RunConfig::scm, &ScmConfig::p_style));
    k.push_back(field("scm.null_rate", &RunConfig::scm, &ScmConfig::null_rate));
    k.push_back(direct("scm.n_train", &RunConfig::n_train));
    k.push_back(direct("scm.n_dev", &RunConfig::n_dev));
    k.push_back(direct("scm.n_test", &RunConfig::n_test));
    k.push_back(direct("scm.seed", &RunConfig::data_seed));
    k.push_back({"scm.pair_strategy",
                 [](const RunConfig& c, ojson& j) {
                   j["scm.pair_strategy"] = c.pair_strategy == PairStrategy::HumanLike ? "humanlike" : "sampled";
                 },
                 [](RunConfig& c, const json& v) {
                   const auto s = as<std::string>("scm.pair_strategy", v);
                   if (s == "humanlike") {
                     c.pair_strategy = PairStrategy::HumanLike;
                   } else if (s == "sampled") {
                     c.pair_strategy = PairStrategy::Sampled;
                   } else {
                     throw ConfigError("scm.pair_strategy must be 'humanlike' or 'sampled'");
                   }
                 }});
    // model.*
    k.push_back(field("model.embed_dim", &RunConfig::model, &EncoderConfig::embed_dim));
    k.push_back(field("model.hidden_layers", &RunConfig::model, &EncoderConfig::hidden_layers));
    k.push_back(field("model.hidden_width", &RunConfig::model, &EncoderConfig::hidden_width));
    k.push_back(field("model.intervention_layer", &RunConfig::model, &EncoderConfig::intervention_layer));
    k.push_back(field("model.site_width", &RunConfig::model, &EncoderConfig::site_width));
    k.push_back(field("model.probe_width", &RunConfig::model, &EncoderConfig::probe_width));
    k.push_back(direct("model.seed", &RunConfig::model_seed));
    // train.*: proxy training, then the black-box overrides.
    k.push_back(field("train.epochs", &RunConfig::cpm_train, &TrainConfig::epochs));
    k.push_back(field("train.batch_size", &RunConfig::cpm_train, &TrainConfig::batch_size));
    k.push_back(field("train.learning_rate", &RunConfig::cpm_train, &TrainConfig::learning_rate));
    k.push_back(field("train.eval_interval_steps", &RunConfig::cpm_train, &TrainConfig::eval_interval_steps));
    k.push_back(field("train.patience", &RunConfig::cpm_train, &TrainConfig::patience));
    k.push_back(field("train.max_steps", &RunConfig::cpm_train, &TrainConfig::max_steps));
    k.push_back(field("train.eval_pairs", &RunConfig::cpm_train, &TrainConfig::eval_pairs));
    k.push_back(field("train.seed", &RunConfig::cpm_train, &TrainConfig::seed));
    k.push_back(exec_key("train.parallel", &RunConfig::cpm_train));
    k.push_back(field("train.w_mimic", &RunConfig::weights, &LossWeights::w_mimic));
    k.push_back(field("train.w_in", &RunConfig::weights, &LossWeights::w_in));
    k.push_back(field("train.w_hi", &RunConfig::weights, &LossWeights::w_hi));
    k.push_back(field("train.w_multi", &RunConfig::weights, &LossWeights::w_multi));
    k.push_back(field("train.temperature", &RunConfig::weights, &LossWeights::temperature));
    k.push_back(field("train.blackbox_epochs", &RunConfig::blackbox_train, &TrainConfig::epochs));
    k.push_back(field("train.blackbox_batch_size", &RunConfig::blackbox_train, &TrainConfig::batch_size));
    k.push_back(field("train.blackbox_learning_rate", &RunConfig::blackbox_train, &TrainConfig::learning_rate));
    k.push_back(
        field("train.blackbox_eval_interval_steps", &RunConfig::blackbox_train, &TrainConfig::eval_interval_steps));
    k.push_back(field("train.blackbox_patience", &RunConfig::blackbox_train, &TrainConfig::patience));
    k.push_back(field("train.blackbox_max_steps", &RunConfig::blackbox_train, &TrainConfig::max_steps));
    // eval.*
    k.push_back({"eval.source_strategy",
                 [](const RunConfig& c, ojson& j) { j["eval.source_strategy"] = to_string(c.source_strategy); },
                 [](RunConfig& c, const json& v) {
                   c.source_strategy = source_strategy_from_string(as<std::string>("eval.source_strategy", v));
                 }});
    k.push_back(direct("eval.seed", &RunConfig::eval_seed));
    k.push_back({"eval.explainers", [](const RunConfig& c, ojson& j) { j["eval.explainers"] = c.explainers; },
                 [](RunConfig& c, const json& v) {
                   if (!v.is_array()) bad_type("eval.explainers", "an array of explainer names");
                   c.explainers.clear();
                   for (const auto& e : v) c.explainers.push_back(as<std::string>("eval.explainers", e));
                 }});
    k.push_back({"eval.metrics",
                 [](const RunConfig& c, ojson& j) {
                   ojson a = ojson::array();
                   for (auto m : c.metrics) a.push_back(to_string(m));
                   j["eval.metrics"] = a;
                 },
                 [](RunConfig& c, const json& v) {
                   if (!v.is_array()) bad_type("eval.metrics", "an array of metric names");
                   c.metrics.clear();
                   for (const auto& e : v) c.metrics.push_back(metric_from_string(as<std::string>("eval.metrics", e)));
                 }});
    k.push_back(direct("eval.fine_group_keys", &RunConfig::fine_group_keys));
    k.push_back(direct("eval.parallel", &RunConfig::eval_parallel));
    k.push_back(field("eval.slearner_temperature", &RunConfig::slearner, &SLearnerConfig::temperature));
    k.push_back({"eval.slearner_epochs",
                 [](const RunConfig& c, ojson& j) { j["eval.slearner_epochs"] = c.slearner.predictor.epochs; },
                 [](RunConfig& c, const json& v) { c.slearner.predictor.epochs = as<int>("eval.slearner_epochs", v); }});
    k.push_back({"eval.slearner_learning_rate",
                 [](const RunConfig& c, ojson& j) {
                   j["eval.slearner_learning_rate"] = c.slearner.predictor.learning_rate;
                 },
                 [](RunConfig& c, const json& v) {
                   c.slearner.predictor.learning_rate = as<double>("eval.slearner_learning_rate", v);
                 }});
    k.push_back({"eval.debias_concepts", [](const RunConfig& c, ojson& j) { j["eval.debias_concepts"] = c.debias_concepts; },
                 [](RunConfig& c, const json& v) { c.debias_concepts = int_list("eval.debias_concepts", v); }});
    // ig.*
    k.push_back(field("ig.steps", &RunConfig::ig, &IgConfig::steps));
    k.push_back({"ig.target_classes", [](const RunConfig& c, ojson& j) { j["ig.target_classes"] = c.ig.target_classes; },
                 [](RunConfig& c, const json& v) { c.ig.target_classes = int_list("ig.target_classes", v); }});
    k.push_back(direct("ig.examples", &RunConfig::ig_examples));
    return k;
  }();
  return table;
}

}  // namespace

RunConfig::RunConfig() {
  blackbox_train.learning_rate = 3e-3;
  blackbox_train.eval_interval_steps = 63;
  cpm_train.eval_interval_steps = 500;
  cpm_train.eval_pairs = 500;
  cpm_train.max_steps = 10000;
  cpm_train.exec = Exec::Parallel;
  blackbox_train.exec = Exec::Parallel;
}

const std::vector<std::string>& known_explainers() {
  static const std::vector<std::string> names = {"cpm_in",  "cpm_hi", "cpm_in_self", "cpm_hi_self", "slearner",
                                                 "approx", "random", "cace",        "ate"};
  return names;
}

RunConfig RunConfig::from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON (") + e.what() + ")");
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object of namespaced keys");
  RunConfig cfg;
  for (const auto& [name, value] : j.items()) {
    auto it = std::find_if(keys().begin(), keys().end(), [&](const Key& k) { return k.name == name; });
    if (it == keys().end()) throw ConfigError("unknown config key '" + name + "'");
    try {
      it->set(cfg, value);
    } catch (const json::exception& e) {
      throw ConfigError("key '" + name + "': " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

std::string RunConfig::to_json() const {
  ojson j = ojson::object();
  for (const auto& k : keys()) k.get(*this, j);
  return j.dump(2) + "\n";
}

void RunConfig::override_seed(std::uint64_t seed) {
  data_seed = seed;
  model_seed = seed;
  cpm_train.seed = seed;
  blackbox_train.seed = seed;
  eval_seed = seed;
  slearner.seed = seed;
}

EncoderConfig RunConfig::encoder_config() const {
  EncoderConfig c = model;
  c.vocab_size = layout().size();
  c.concepts = scm.k;
  return c;
}

void RunConfig::validate() const {
  scm.validate();
  if (n_train < 1) throw ConfigError("scm.n_train must be >= 1");
  if (n_dev < 1) throw ConfigError("scm.n_dev must be >= 1");
  if (n_test < 1) throw ConfigError("scm.n_test must be >= 1");
  encoder_config().validate();
  blackbox_train.validate();
  cpm_train.validate();
  weights.validate();
  ig.validate();
  if (slearner.predictor.epochs < 1) throw ConfigError("eval.slearner_epochs must be >= 1");
  if (!(slearner.predictor.learning_rate > 0)) throw ConfigError("eval.slearner_learning_rate must be > 0");
  if (!(slearner.temperature > 0)) throw ConfigError("eval.slearner_temperature must be > 0");
  std::set<std::string> seen;
  for (const auto& e : explainers) {
    const auto& known = known_explainers();
    if (std::find(known.begin(), known.end(), e) == known.end()) throw ConfigError("unknown explainer '" + e + "'");
    if (!seen.insert(e).second) throw ConfigError("explainer '" + e + "' listed twice");
  }
  if (metrics.empty()) throw ConfigError("eval.metrics must not be empty");
  for (int c : debias_concepts) {
    if (c < 0 || c >= scm.k) throw ConfigError("eval.debias_concepts: concept " + std::to_string(c) + " out of range");
  }
}

DataSplits generate_splits(const RunConfig& cfg) {
  const CounterRng split(cfg.data_seed, "splits");
  return {generate_dataset(cfg.scm, cfg.n_train, split.at(0), "train"),
          generate_dataset(cfg.scm, cfg.n_dev, split.at(1), "dev"),
          generate_dataset(cfg.scm, cfg.n_test, split.at(2), "test")};
}

}  // namespace cpm
