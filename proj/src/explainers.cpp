// SPDX-License-Identifier: Apache-2.0
#include "cpm/explainers.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include "cpm/error.hpp"
#include "cpm/objectives.hpp"

namespace cpm {

namespace {

std::string edit_string(const InterventionDescriptor& edit) {
  return "C" + std::to_string(edit.concept_id) + " <- " + std::to_string(to_int(edit.target));
}

std::size_t slot(int concept_id, ConceptValue v) {
  return static_cast<std::size_t>(concept_id * 3 + value_index(v));
}

Probs softmax_of(const Probs& z, double temperature) {
  Probs p{};
  double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    p[c] = std::exp((z[c] - mx) / temperature);
    s += p[c];
  }
  for (double& v : p) v /= s;
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// EffectVector, sources

EffectVector EffectVector::difference(const Probs& after, const Probs& before) {
  EffectVector e;
  for (std::size_t c = 0; c < after.size(); ++c) e.delta[c] = after[c] - before[c];
  return e;
}

double EffectVector::norm() const {
  double s = 0.0;
  for (double v : delta) s += v * v;
  return std::sqrt(s);
}

double EffectVector::sum() const { return std::accumulate(delta.begin(), delta.end(), 0.0); }

const char* to_string(SourceStrategy s) {
  switch (s) {
    case SourceStrategy::GoldLabel: return "gold";
    case SourceStrategy::Random: return "random";
    case SourceStrategy::ProbePredicted: return "probe";
  }
  return "?";
}

SourceStrategy source_strategy_from_string(const std::string& s) {
  if (s == "gold") return SourceStrategy::GoldLabel;
  if (s == "random") return SourceStrategy::Random;
  if (s == "probe") return SourceStrategy::ProbePredicted;
  throw ConfigError("unknown source strategy '" + s + "' (expected gold, random or probe)");
}

CounterRng estimate_stream(std::uint64_t seed, std::uint64_t pair_key) {
  return CounterRng(seed, "estimate").split(pair_key);
}

SourcePool::SourcePool(std::span<const Example> pool, int concepts)
    : pool_(pool), concepts_(concepts), by_gold_(static_cast<std::size_t>(concepts) * 3) {
  all_.resize(pool.size());
  std::iota(all_.begin(), all_.end(), std::size_t{0});
  for (std::size_t p = 0; p < pool.size(); ++p) {
    for (int i = 0; i < concepts; ++i) {
      by_gold_[slot(i, pool[p].concepts[static_cast<std::size_t>(i)])].push_back(p);
    }
  }
}

void SourcePool::index_probe_predictions(const Encoder& proxy, Exec exec) {
  auto preds = map_indexed<std::vector<std::array<double, 3>>>(
      exec, pool_.size(), [&](std::size_t p) { return proxy.probe_predict(pool_[p].tokens); });
  by_probe_.assign(static_cast<std::size_t>(concepts_) * 3, {});
  for (std::size_t p = 0; p < pool_.size(); ++p) {
    for (int i = 0; i < concepts_; ++i) {
      const auto& l = preds[p][static_cast<std::size_t>(i)];
      const int cls = static_cast<int>(std::max_element(l.begin(), l.end()) - l.begin());
      by_probe_[slot(i, value_from_index(cls))].push_back(p);
    }
  }
}

std::span<const std::size_t> SourcePool::candidates(SourceStrategy strategy, int concept_id, ConceptValue value) const {
  if (concept_id < 0 || concept_id >= concepts_) throw UsageError("source pool: concept out of range");
  switch (strategy) {
    case SourceStrategy::Random: return all_;
    case SourceStrategy::GoldLabel: return by_gold_[slot(concept_id, value)];
    case SourceStrategy::ProbePredicted:
      if (by_probe_.empty()) throw UsageError("source pool has no probe-prediction index");
      return by_probe_[slot(concept_id, value)];
  }
  return {};
}

const Example& SourcePool::sample(SourceStrategy strategy, const InterventionDescriptor& edit,
                                  CounterRng& rng) const {
  auto c = candidates(strategy, edit.concept_id, edit.target);
  if (c.empty()) {
    throw NotFoundError("no " + std::string(to_string(strategy)) + " source for edit " + edit_string(edit));
  }
  return pool_[c[rng.below(c.size())]];
}

// ---------------------------------------------------------------------------
// CPM estimators

EffectVector estimate_cpm_in(const Encoder& proxy, const Encoder& reference, const Example& x,
                             const InterventionDescriptor& edit, const VocabLayout& layout) {
  auto cf = proxy.predict(append_intervention_token(x.tokens, edit, layout));
  auto factual = reference.predict(x.tokens);
  return EffectVector::difference(cf.probs, factual.probs);
}

Probs interchange_probs(const Encoder& proxy, std::span<const TokenId> base, std::span<const TokenId> source,
                        int concept_id) {
  Tape tape;
  auto bound = proxy.bind(tape);
  Var logits = interchange_forward(tape, EncoderLogits{proxy, bound}, base, source, site_for(concept_id, proxy.config()));
  Var probs = tape.softmax(logits);
  Probs out{};
  std::copy(tape.value(probs).data.begin(), tape.value(probs).data.end(), out.begin());
  return out;
}

EffectVector estimate_cpm_hi(const Encoder& proxy, const Encoder& reference, const Example& x,
                             const InterventionDescriptor& edit, SourceStrategy strategy, const SourcePool& pool,
                             CounterRng& rng) {
  const Example& source = pool.sample(strategy, edit, rng);
  auto cf = interchange_probs(proxy, x.tokens, source.tokens, edit.concept_id);
  auto factual = reference.predict(x.tokens);
  return EffectVector::difference(cf, factual.probs);
}

EffectVector CpmHiExplainer::estimate(const Example& x, const InterventionDescriptor& edit,
                                      std::uint64_t pair_key) const {
  auto rng = estimate_stream(seed_, pair_key);
  return estimate_cpm_hi(proxy_, reference_, x, edit, strategy_, pool_, rng);
}

// ---------------------------------------------------------------------------
// Concept predictor

ConceptPredictor::ConceptPredictor(int vocab_size, int concepts, const Config& cfg, std::uint64_t seed)
    : concepts_(concepts), cfg_(cfg) {
  const auto V = static_cast<std::size_t>(vocab_size);
  const auto d = static_cast<std::size_t>(cfg.embed_dim);
  const auto w = static_cast<std::size_t>(cfg.hidden_width);
  const auto out = static_cast<std::size_t>(concepts) * 3;
  CounterRng rng(seed, "concept-predictor/init");
  auto normal = [&](Tensor t, double sd) {
    for (double& v : t.data) v = rng.normal(0.0, sd);
    return t;
  };
  params_.add("embedding", normal(Tensor::matrix(V, d), 1.0));
  params_.add("hidden.weight", normal(Tensor::matrix(d, w), std::sqrt(2.0 / static_cast<double>(d))));
  params_.add("hidden.bias", Tensor({w}));
  params_.add("out.weight", normal(Tensor::matrix(w, out), std::sqrt(1.0 / static_cast<double>(w))));
  params_.add("out.bias", Tensor({out}));
}

std::vector<Var> ConceptPredictor::bind(Tape& tape) const {
  std::vector<Var> vars;
  for (std::size_t i = 0; i < params_.size(); ++i) vars.push_back(tape.parameter(params_[i]));
  return vars;
}

Var ConceptPredictor::logits(Tape& tape, const std::vector<Var>& p, std::span<const TokenId> tokens) const {
  Var pooled = tape.mean_rows(tape.embedding(p[0], tokens));
  Var h = tape.relu(tape.add_bias(tape.matvec(pooled, p[1]), p[2]));
  return tape.add_bias(tape.matvec(h, p[3]), p[4]);
}

void ConceptPredictor::fit(std::span<const Example> data, std::uint64_t seed, Exec exec) {
  if (data.empty()) throw UsageError("concept predictor: empty training data");
  Adam adam(params_);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = static_cast<std::size_t>(std::max(cfg_.batch_size, 1));
  const std::size_t steps_per_epoch = (data.size() + bs - 1) / bs;
  const double total = static_cast<double>(steps_per_epoch) * cfg_.epochs;
  long step = 0;
  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    CounterRng rng(seed, "concept-predictor/epoch");
    rng = rng.split(static_cast<std::uint64_t>(epoch));
    shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t begin = s * bs, end = std::min(begin + bs, data.size());
      ParamSet grads = params_.zeros_like();
      accumulate_gradients(exec, end - begin, grads, [&](std::size_t i, ParamSet& g) {
        const Example& ex = data[order[begin + i]];
        Tape tape;
        auto p = bind(tape);
        Var z = logits(tape, p, ex.tokens);
        Var total_loss;
        for (int c = 0; c < concepts_; ++c) {
          Var logp = tape.log_softmax(tape.slice(z, {static_cast<std::size_t>(c) * 3, static_cast<std::size_t>(c) * 3 + 3}));
          std::array<double, 3> w{};
          w[static_cast<std::size_t>(value_index(ex.concepts[static_cast<std::size_t>(c)]))] = -1.0;
          Var ce = tape.dot(logp, w);
          total_loss = total_loss.valid() ? tape.add(total_loss, ce) : ce;
        }
        tape.backward(total_loss);
        for (std::size_t k = 0; k < p.size(); ++k) {
          auto gv = tape.grad_view(p[k]);
          for (std::size_t j = 0; j < gv.size(); ++j) g[k].data[j] += gv[j];
        }
        return tape.value(total_loss)[0];
      });
      for (std::size_t k = 0; k < grads.size(); ++k) {
        for (double& v : grads[k].data) v /= static_cast<double>(end - begin);
      }
      const double lr = cfg_.learning_rate * (1.0 - static_cast<double>(step) / total);
      adam.step(params_, grads, lr);
      ++step;
    }
  }
}

std::vector<ConceptValue> ConceptPredictor::predict(std::span<const TokenId> tokens) const {
  Tape tape;
  auto p = bind(tape);
  const auto& z = tape.value(logits(tape, p, tokens)).data;
  std::vector<ConceptValue> out;
  for (int c = 0; c < concepts_; ++c) {
    auto first = z.begin() + c * 3;
    out.push_back(value_from_index(static_cast<int>(std::max_element(first, first + 3) - first)));
  }
  return out;
}

double ConceptPredictor::accuracy(std::span<const Example> data) const {
  std::size_t hit = 0, total = 0;
  for (const auto& ex : data) {
    auto pred = predict(ex.tokens);
    for (std::size_t c = 0; c < pred.size(); ++c) {
      hit += pred[c] == ex.concepts[c];
      ++total;
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

// ---------------------------------------------------------------------------
// Logistic regression

std::vector<double> one_hot_concepts(std::span<const ConceptValue> concepts) {
  std::vector<double> x(concepts.size() * 3, 0.0);
  for (std::size_t i = 0; i < concepts.size(); ++i) x[slot(static_cast<int>(i), concepts[i])] = 1.0;
  return x;
}

Probs LogisticRegression::logits(std::span<const double> x) const {
  Probs z{};
  for (std::size_t c = 0; c < z.size(); ++c) z[c] = bias[c];
  for (std::size_t f = 0; f < x.size(); ++f) {
    if (x[f] == 0.0) continue;
    for (std::size_t c = 0; c < z.size(); ++c) z[c] += x[f] * weight.at(f, c);
  }
  return z;
}

Probs LogisticRegression::predict(std::span<const double> x) const { return softmax_of(logits(x), 1.0); }

double lr_objective(const LrProblem& problem, std::span<const double> params, std::span<double> grad) {
  const std::size_t n = problem.rows.size();
  const std::size_t F = n ? problem.rows[0].size() : 0;
  const double T = problem.temperature;
  const double l2 = problem.l2 > 0 ? problem.l2 : 1.0 / static_cast<double>(n);
  std::fill(grad.begin(), grad.end(), 0.0);
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& x = problem.rows[r];
    Probs z{};
    for (std::size_t c = 0; c < kClasses; ++c) z[c] = params[F * kClasses + c];
    for (std::size_t f = 0; f < F; ++f) {
      if (x[f] == 0.0) continue;
      for (std::size_t c = 0; c < kClasses; ++c) z[c] += x[f] * params[f * kClasses + c];
    }
    const Probs q = softmax_of(problem.teacher_logits[r], T);
    const Probs p = softmax_of(z, T);
    for (std::size_t c = 0; c < kClasses; ++c) {
      loss -= inv_n * q[c] * std::log(p[c]);
      const double dz = inv_n * (p[c] - q[c]) / T;
      grad[F * kClasses + c] += dz;
      for (std::size_t f = 0; f < F; ++f) {
        if (x[f] != 0.0) grad[f * kClasses + c] += dz * x[f];
      }
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    loss += 0.5 * l2 * params[i] * params[i];
    grad[i] += l2 * params[i];
  }
  return loss;
}

LogisticRegression fit_logistic_regression(const LrProblem& problem, int features) {
  if (problem.rows.empty()) throw UsageError("logistic regression: no rows");
  const auto F = static_cast<std::size_t>(features);

  // Rows with identical features collapse into one weighted row: the loss is
  // linear in the softened teacher distribution.
  std::map<std::vector<double>, std::pair<std::size_t, Probs>> groups;
  for (std::size_t r = 0; r < problem.rows.size(); ++r) {
    auto& g = groups[problem.rows[r]];
    ++g.first;
    const Probs q = softmax_of(problem.teacher_logits[r], problem.temperature);
    for (std::size_t c = 0; c < kClasses; ++c) g.second[c] += q[c];
  }
  const double n = static_cast<double>(problem.rows.size());
  const double l2 = problem.l2 > 0 ? problem.l2 : 1.0 / n;
  std::vector<std::vector<double>> xs;
  std::vector<double> weights;
  std::vector<Probs> targets;
  for (auto& [x, g] : groups) {
    xs.push_back(x);
    weights.push_back(static_cast<double>(g.first) / n);
    Probs q = g.second;
    for (double& v : q) v /= static_cast<double>(g.first);
    targets.push_back(q);
  }
  const double T = problem.temperature;
  const std::size_t dim = (F + 1) * kClasses;
  auto objective = [&](const std::vector<double>& w, std::vector<double>& g) {
    std::fill(g.begin(), g.end(), 0.0);
    double loss = 0.0;
    for (std::size_t r = 0; r < xs.size(); ++r) {
      Probs z{};
      for (std::size_t c = 0; c < kClasses; ++c) z[c] = w[F * kClasses + c];
      for (std::size_t f = 0; f < F; ++f) {
        if (xs[r][f] == 0.0) continue;
        for (std::size_t c = 0; c < kClasses; ++c) z[c] += xs[r][f] * w[f * kClasses + c];
      }
      const Probs p = softmax_of(z, T);
      for (std::size_t c = 0; c < kClasses; ++c) {
        loss -= weights[r] * targets[r][c] * std::log(p[c]);
        const double dz = weights[r] * (p[c] - targets[r][c]) / T;
        g[F * kClasses + c] += dz;
        for (std::size_t f = 0; f < F; ++f) {
          if (xs[r][f] != 0.0) g[f * kClasses + c] += dz * xs[r][f];
        }
      }
    }
    for (std::size_t i = 0; i < dim; ++i) {
      loss += 0.5 * l2 * w[i] * w[i];
      g[i] += l2 * w[i];
    }
    return loss;
  };

  // L-BFGS, memory 10, Armijo backtracking.
  std::vector<double> w(dim, 0.0), g(dim), w_new(dim), g_new(dim), dir(dim);
  double f = objective(w, g);
  std::deque<std::pair<std::vector<double>, std::vector<double>>> memory;
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  for (int iter = 0; iter < 5000; ++iter) {
    double gmax = 0.0;
    for (double v : g) gmax = std::max(gmax, std::abs(v));
    if (gmax < 1e-11) break;
    dir = g;
    std::vector<double> alpha(memory.size());
    for (std::size_t m = memory.size(); m-- > 0;) {
      const auto& [s, y] = memory[m];
      alpha[m] = dot(s, dir) / dot(y, s);
      for (std::size_t i = 0; i < dim; ++i) dir[i] -= alpha[m] * y[i];
    }
    if (!memory.empty()) {
      const auto& [s, y] = memory.back();
      const double gamma = dot(s, y) / dot(y, y);
      for (double& v : dir) v *= gamma;
    }
    for (std::size_t m = 0; m < memory.size(); ++m) {
      const auto& [s, y] = memory[m];
      const double beta = dot(y, dir) / dot(y, s);
      for (std::size_t i = 0; i < dim; ++i) dir[i] += s[i] * (alpha[m] - beta);
    }
    for (double& v : dir) v = -v;
    double slope = dot(g, dir);
    if (slope >= 0) {
      for (std::size_t i = 0; i < dim; ++i) dir[i] = -g[i];
      slope = dot(g, dir);
      memory.clear();
    }
    double step = 1.0;
    double f_new = 0.0;
    for (int ls = 0; ls < 60; ++ls) {
      for (std::size_t i = 0; i < dim; ++i) w_new[i] = w[i] + step * dir[i];
      f_new = objective(w_new, g_new);
      if (f_new <= f + 1e-4 * step * slope) break;
      step *= 0.5;
    }
    std::vector<double> s(dim), y(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      s[i] = w_new[i] - w[i];
      y[i] = g_new[i] - g[i];
    }
    if (dot(s, y) > 1e-20) {
      memory.emplace_back(std::move(s), std::move(y));
      if (memory.size() > 10) memory.pop_front();
    }
    if (f - f_new < 1e-16 * std::max(1.0, std::abs(f)) && step < 1e-12) break;
    w.swap(w_new);
    g.swap(g_new);
    f = f_new;
  }

  LogisticRegression lr;
  lr.features = features;
  lr.weight = Tensor::matrix(F, kClasses);
  lr.bias = Tensor({static_cast<std::size_t>(kClasses)});
  std::copy(w.begin(), w.begin() + static_cast<long>(F * kClasses), lr.weight.data.begin());
  std::copy(w.begin() + static_cast<long>(F * kClasses), w.end(), lr.bias.data.begin());
  return lr;
}

SLearnerModel fit_slearner(const Encoder& blackbox, std::span<const Example> train_data,
                           std::span<const CounterfactualPair> pairs, const SLearnerConfig& cfg, Exec exec) {
  if (train_data.empty()) throw UsageError("fit_slearner: empty training data");
  const int k = static_cast<int>(train_data.front().concepts.size());
  auto predictor = std::make_shared<ConceptPredictor>(blackbox.config().vocab_size, k, cfg.predictor, cfg.seed);
  predictor->fit(train_data, cfg.seed, exec);

  std::vector<const Example*> inputs;
  for (const auto& ex : train_data) inputs.push_back(&ex);
  for (const auto& p : pairs) inputs.push_back(&p.counterfactual);

  struct Row {
    std::vector<double> x;
    Probs teacher;
  };
  auto rows = map_indexed<Row>(exec, inputs.size(), [&](std::size_t i) {
    return Row{one_hot_concepts(predictor->predict(inputs[i]->tokens)), blackbox.predict(inputs[i]->tokens).logits};
  });
  LrProblem problem;
  problem.temperature = cfg.temperature;
  for (auto& r : rows) {
    problem.rows.push_back(std::move(r.x));
    problem.teacher_logits.push_back(r.teacher);
  }
  SLearnerModel model;
  model.predictor = predictor;
  model.concepts = k;
  model.regression = fit_logistic_regression(problem, 3 * k);
  return model;
}

EffectVector estimate_slearner(const SLearnerModel& model, const Example& x, const InterventionDescriptor& edit) {
  auto predicted = model.predictor->predict(x.tokens);
  if (edit.concept_id < 0 || edit.concept_id >= model.concepts) throw UsageError("S-Learner: concept out of range");
  auto factual = one_hot_concepts(predicted);
  predicted[static_cast<std::size_t>(edit.concept_id)] = edit.target;
  auto intervened = one_hot_concepts(predicted);
  return EffectVector::difference(model.regression.predict(intervened), model.regression.predict(factual));
}

// ---------------------------------------------------------------------------
// Group tables and baselines

GroupKey GroupTable::key_for(const Example& x, const InterventionDescriptor& edit) const {
  GroupKey key{edit.concept_id, edit.target, std::nullopt};
  if (fine_keys_) key.base_value = x.concepts.at(static_cast<std::size_t>(edit.concept_id));
  return key;
}

const GroupEntry& GroupTable::lookup(const Example& x, const InterventionDescriptor& edit) const {
  auto it = entries_.find(key_for(x, edit));
  if (it == entries_.end()) throw NotFoundError("no group-table entry for edit " + edit_string(edit));
  return it->second;
}

GroupTable fit_group_table(std::span<const CounterfactualPair> pairs, GroupScore score, const Encoder* blackbox,
                           bool fine_keys, Exec exec) {
  if (score == GroupScore::ModelOutputs && !blackbox) throw UsageError("CaCE table needs a black-box model");
  auto diffs = map_indexed<EffectVector>(exec, pairs.size(), [&](std::size_t i) {
    const auto& p = pairs[i];
    if (score == GroupScore::ModelOutputs) {
      return EffectVector::difference(blackbox->predict(p.counterfactual.tokens).probs,
                                      blackbox->predict(p.base.tokens).probs);
    }
    Probs a{}, b{};
    a[static_cast<std::size_t>(p.counterfactual.label)] = 1.0;
    b[static_cast<std::size_t>(p.base.label)] = 1.0;
    return EffectVector::difference(a, b);
  });
  GroupTable probe({}, fine_keys);
  std::map<GroupKey, GroupEntry> sums;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto& e = sums[probe.key_for(pairs[i].base, pairs[i].edit)];
    for (std::size_t c = 0; c < kClasses; ++c) e.mean.delta[c] += diffs[i].delta[c];
    ++e.count;
  }
  for (auto& [key, e] : sums) {
    for (double& v : e.mean.delta) v /= static_cast<double>(e.count);
  }
  return GroupTable(std::move(sums), fine_keys);
}

const char* to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::Approx: return "Approx";
    case BaselineKind::Random: return "Random";
    case BaselineKind::CaCE: return "CaCE";
    case BaselineKind::ATE: return "ATE";
  }
  return "?";
}

EffectVector estimate_baseline(BaselineKind kind, const BaselineContext& ctx, const Example& x,
                               const InterventionDescriptor& edit, CounterRng& rng) {
  switch (kind) {
    case BaselineKind::CaCE:
    case BaselineKind::ATE:
      if (!ctx.table) throw UsageError("group-table baseline without a table");
      return ctx.table->lookup(x, edit).mean;
    case BaselineKind::Random:
    case BaselineKind::Approx: {
      if (!ctx.reference || ctx.pool.empty()) throw UsageError("sampling baseline needs a model and a pool");
      const Example* s = nullptr;
      if (kind == BaselineKind::Random) {
        s = &ctx.pool[rng.below(ctx.pool.size())];
      } else {
        auto c = matching_candidates(x, edit, ctx.pool);
        if (c.empty()) throw NotFoundError("no pool example matches the counterfactual profile for edit " + edit_string(edit));
        s = &ctx.pool[c[rng.below(c.size())]];
      }
      return EffectVector::difference(ctx.reference->predict(s->tokens).probs, ctx.reference->predict(x.tokens).probs);
    }
  }
  throw UsageError("unknown baseline");
}

EffectVector BaselineExplainer::estimate(const Example& x, const InterventionDescriptor& edit,
                                         std::uint64_t pair_key) const {
  auto rng = estimate_stream(seed_, pair_key);
  return estimate_baseline(kind_, ctx_, x, edit, rng);
}

}  // namespace cpm
