// SPDX-License-Identifier: Apache-2.0
#include "cpm/train.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>

#include "cpm/error.hpp"
#include "cpm/evalsuite.hpp"
#include "cpm/explainers.hpp"

namespace cpm {

namespace {

constexpr std::uint64_t kEvalSeedSalt = 0xE7A1;

/// Dev scoring state for proxies: black-box outputs are fixed, so the true
/// effects and factual outputs are computed once.
struct ProxyDevEval {
  std::vector<std::size_t> pair_index;
  std::vector<EffectVector> truth;
  std::vector<Probs> factual;

  EvalRecord score(TrainKind kind, const Encoder& proxy, const TrainInputs& in, const SourcePool& pool,
                   std::uint64_t seed, Exec exec) const {
    auto d = map_indexed<std::array<double, 3>>(exec, pair_index.size(), [&](std::size_t j) {
      const auto& p = in.dev_pairs[pair_index[j]];
      Probs cf{};
      if (kind == TrainKind::CpmIn) {
        cf = proxy.predict(append_intervention_token(p.base.tokens, p.edit, in.layout)).probs;
      } else {
        auto rng = estimate_stream(seed, pair_index[j]);
        const Example& s = pool.sample(SourceStrategy::GoldLabel, p.edit, rng);
        cf = interchange_probs(proxy, p.base.tokens, s.tokens, p.edit.concept_id);
      }
      auto est = EffectVector::difference(cf, factual[j]);
      return std::array<double, 3>{dist(DistMetric::L2, truth[j], est), dist(DistMetric::Cosine, truth[j], est),
                                   dist(DistMetric::NormDiff, truth[j], est)};
    });
    EvalRecord r;
    for (const auto& v : d) {
      r.l2 += v[0];
      r.cosine += v[1];
      r.normdiff += v[2];
    }
    const double n = static_cast<double>(std::max<std::size_t>(d.size(), 1));
    r.l2 /= n;
    r.cosine /= n;
    r.normdiff /= n;
    r.macro_f1 = macro_f1(proxy, in.dev, exec);
    return r;
  }
};

std::vector<std::size_t> dev_subset(std::size_t n, std::size_t cap, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (cap == 0 || cap >= n) return idx;
  CounterRng rng(seed, "train/dev-subset");
  shuffle(idx.begin(), idx.end(), rng);
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

const char* to_string(TrainKind kind) {
  switch (kind) {
    case TrainKind::Blackbox: return "blackbox";
    case TrainKind::CpmIn: return "cpm_in";
    case TrainKind::CpmHi: return "cpm_hi";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("train.learning_rate must be > 0");
  if (eval_interval_steps < 1) throw ConfigError("train.eval_interval_steps must be >= 1");
  if (patience < 0) throw ConfigError("train.patience must be >= 0");
  if (max_steps < 0) throw ConfigError("train.max_steps must be >= 0");
}

std::string EpochLog::to_csv() const {
  std::string out = "step,l2,cosine,normdiff,macro_f1\n";
  char buf[160];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%ld,%.17g,%.17g,%.17g,%.17g\n", r.step, r.l2, r.cosine, r.normdiff, r.macro_f1);
    out += buf;
  }
  return out;
}

Encoder make_proxy(const Encoder& blackbox, TrainKind kind, const VocabLayout& layout, std::uint64_t seed) {
  Encoder proxy = blackbox;
  proxy.reset_intervention_rows(layout, seed);
  if (kind == TrainKind::CpmHi) proxy.add_probes(seed);
  return proxy;
}

TrainResult train(TrainKind kind, const TrainInputs& in, const LossWeights& weights, const TrainConfig& cfg,
                  const Encoder* init) {
  cfg.validate();
  weights.validate();
  if (in.train.empty()) throw UsageError("train: empty training data");
  const bool is_proxy = kind != TrainKind::Blackbox;
  if (is_proxy && !in.blackbox) throw UsageError("train: CPM training needs a frozen black-box model");
  if (is_proxy && in.pairs.empty()) throw UsageError("train: CPM training needs counterfactual pairs");
  if (is_proxy && in.dev_pairs.empty()) throw UsageError("train: CPM training needs dev pairs for early stopping");
  if (!is_proxy && !init) throw UsageError("train: black-box training needs an initial model");
  if (!is_proxy && in.dev.empty()) throw UsageError("train: black-box training needs dev data");

  Encoder model = is_proxy ? make_proxy(*in.blackbox, kind, in.layout, cfg.seed) : *init;
  const std::size_t n_items = is_proxy ? in.pairs.size() : in.train.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const long steps_per_epoch = static_cast<long>((n_items + bs - 1) / bs);
  long budget = steps_per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) budget = std::min(budget, cfg.max_steps);

  // Frozen-teacher caches.
  std::vector<Probs> teacher_base, teacher_cf;
  std::optional<SourcePool> pool;
  ProxyDevEval dev_eval;
  const std::uint64_t eval_seed = cfg.seed ^ kEvalSeedSalt;
  if (is_proxy) {
    const Encoder& bb = *in.blackbox;
    teacher_base = map_indexed<Probs>(cfg.exec, in.pairs.size(),
                                      [&](std::size_t i) { return bb.predict(in.pairs[i].base.tokens).logits; });
    teacher_cf = map_indexed<Probs>(cfg.exec, in.pairs.size(), [&](std::size_t i) {
      return bb.predict(in.pairs[i].counterfactual.tokens).logits;
    });
    pool.emplace(in.train, in.layout.k);
    dev_eval.pair_index = dev_subset(in.dev_pairs.size(), cfg.eval_pairs, cfg.seed);
    dev_eval.truth = map_indexed<EffectVector>(cfg.exec, dev_eval.pair_index.size(), [&](std::size_t j) {
      return icace(bb, in.dev_pairs[dev_eval.pair_index[j]]);
    });
    dev_eval.factual = map_indexed<Probs>(cfg.exec, dev_eval.pair_index.size(), [&](std::size_t j) {
      return bb.predict(in.dev_pairs[dev_eval.pair_index[j]].base.tokens).probs;
    });
  }

  Adam adam(model.params());
  TrainResult result{model, {}, 0, 0};
  double best = std::numeric_limits<double>::infinity();  // lower is better
  int bad_evals = 0;
  bool stop = false;

  auto evaluate = [&](long step) {
    EvalRecord r;
    if (is_proxy) {
      r = dev_eval.score(kind, model, in, *pool, eval_seed, cfg.exec);
    } else {
      r.macro_f1 = macro_f1(model, in.dev, cfg.exec);
    }
    r.step = step;
    result.log.records.push_back(r);
    const double score = is_proxy ? r.cosine : -r.macro_f1;
    if (score < best) {
      best = score;
      bad_evals = 0;
      result.model = model;
      result.best_step = step;
    } else {
      ++bad_evals;
    }
    if (bad_evals >= cfg.patience) stop = true;
  };

  std::vector<std::size_t> order(n_items);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const CounterRng order_stream(cfg.seed, "train/order");
  const CounterRng source_stream(cfg.seed, "train/source");
  const double T = weights.temperature;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs && !stop && step < budget; ++epoch) {
    CounterRng rng = order_stream.split(static_cast<std::uint64_t>(epoch));
    shuffle(order.begin(), order.end(), rng);
    for (long s = 0; s < steps_per_epoch && !stop && step < budget; ++s) {
      const std::size_t begin = static_cast<std::size_t>(s) * bs;
      const std::size_t end = std::min(begin + bs, n_items);
      const CounterRng step_sources = source_stream.split(static_cast<std::uint64_t>(step));
      ParamSet grads = model.params().zeros_like();
      accumulate_gradients(cfg.exec, end - begin, grads, [&](std::size_t j, ParamSet& g) {
        const std::size_t item = order[begin + j];
        Tape tape;
        auto bound = model.bind(tape);
        Var loss;
        auto add = [&](Var term, double w) {
          Var scaled = tape.scale(term, w);
          loss = loss.valid() ? tape.add(loss, scaled) : scaled;
        };
        if (!is_proxy) {
          const Example& ex = in.train[item];
          auto out = model.forward(tape, bound, ex.tokens);
          std::array<double, kClasses> onehot{};
          onehot[static_cast<std::size_t>(ex.label)] = -1.0;
          add(tape.dot(tape.log_softmax(out.logits), onehot), 1.0);
        } else {
          const CounterfactualPair& pair = in.pairs[item];
          Var layer;
          if (weights.w_mimic > 0 || (kind == TrainKind::CpmHi && weights.w_multi > 0)) {
            auto out = model.forward(tape, bound, pair.base.tokens);
            layer = out.hidden[static_cast<std::size_t>(model.config().intervention_layer - 1)];
            if (weights.w_mimic > 0) add(smoothed_ce(tape, teacher_base[item], out.logits, T), weights.w_mimic);
          }
          if (kind == TrainKind::CpmIn && weights.w_in > 0) {
            add(record_in(tape, model, bound, teacher_cf[item], pair.base.tokens, pair.edit, in.layout, T),
                weights.w_in);
          }
          if (kind == TrainKind::CpmHi) {
            if (weights.w_hi > 0) {
              CounterRng src_rng = step_sources.split(static_cast<std::uint64_t>(j));
              const Example& source = pool->sample(SourceStrategy::GoldLabel, pair.edit, src_rng);
              add(record_hi(tape, model, bound, teacher_cf[item], pair.base.tokens, source.tokens,
                            pair.edit.concept_id, T),
                  weights.w_hi);
            }
            if (weights.w_multi > 0) add(record_multi(tape, model, bound, layer, pair.base.concepts), weights.w_multi);
          }
        }
        if (!loss.valid()) return 0.0;
        tape.backward(loss);
        model.accumulate_grads(tape, bound, g);
        return tape.value(loss)[0];
      });
      const double inv = 1.0 / static_cast<double>(end - begin);
      for (std::size_t p = 0; p < grads.size(); ++p) {
        for (double& v : grads[p].data) v *= inv;
      }
      const double lr = cfg.learning_rate * (1.0 - static_cast<double>(step) / static_cast<double>(budget));
      adam.step(model.params(), grads, lr);
      ++step;
      if (step % cfg.eval_interval_steps == 0) evaluate(step);
    }
  }
  if (result.log.records.empty() || result.log.records.back().step != step) {
    if (!stop) evaluate(step);
  }
  result.steps = step;
  return result;
}

}  // namespace cpm
