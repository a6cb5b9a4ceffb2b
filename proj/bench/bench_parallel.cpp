// SPDX-License-Identifier: Apache-2.0
// Serial vs OpenMP-parallel kernels on the default SCM and model sizes.
// Arg 0 = Exec::Serial, 1 = Exec::Parallel.
#include <benchmark/benchmark.h>

#include "cpm/evalsuite.hpp"
#include "cpm/explainers.hpp"
#include "cpm/objectives.hpp"
#include "cpm/parallel.hpp"

using namespace cpm;

namespace {

struct World {
  ScmConfig scm;
  VocabLayout layout = VocabLayout::from(scm);
  std::vector<Example> data;
  std::vector<CounterfactualPair> pairs;
  Encoder model = Encoder::zeros(EncoderConfig{.vocab_size = 81});
  Encoder proxy = Encoder::zeros(EncoderConfig{.vocab_size = 81});

  World() {
    EncoderConfig cfg;
    cfg.vocab_size = layout.size();
    data = generate_dataset(scm, 500, 1);
    pairs = build_pairs(data, PairStrategy::HumanLike, scm, 2);
    model = Encoder::random(cfg, 3);
    proxy = model;
    proxy.add_probes(4);
  }
};

const World& world() {
  static const World w;
  return w;
}

Exec exec_of(const benchmark::State& state) { return state.range(0) == 0 ? Exec::Serial : Exec::Parallel; }

void BM_TrueEffects(benchmark::State& state) {
  const auto& w = world();
  for (auto _ : state) benchmark::DoNotOptimize(true_effects(w.model, w.pairs, exec_of(state)));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(w.pairs.size()));
}

void BM_CpmHiErrors(benchmark::State& state) {
  const auto& w = world();
  SourcePool pool(w.data, w.scm.k);
  const CpmHiExplainer e(w.proxy, w.model, pool, SourceStrategy::GoldLabel, 0);
  for (auto _ : state) benchmark::DoNotOptimize(icace_errors(e, w.model, w.pairs, exec_of(state)));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(w.pairs.size()));
}

void BM_MacroF1(benchmark::State& state) {
  const auto& w = world();
  for (auto _ : state) benchmark::DoNotOptimize(macro_f1(w.model, w.data, exec_of(state)));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(w.data.size()));
}

void BM_GroupTable(benchmark::State& state) {
  const auto& w = world();
  for (auto _ : state) {
    benchmark::DoNotOptimize(fit_group_table(w.pairs, GroupScore::ModelOutputs, &w.model, false, exec_of(state)));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(w.pairs.size()));
}

// One 32-example minibatch of HI gradients, the inner loop of proxy training.
void BM_HiGradients(benchmark::State& state) {
  const auto& w = world();
  const std::size_t batch = 32;
  for (auto _ : state) {
    ParamSet grads = w.proxy.params().zeros_like();
    const double loss = accumulate_gradients(exec_of(state), batch, grads, [&](std::size_t i, ParamSet& g) {
      const auto& p = w.pairs[i * 7];
      const auto source = true_counterfactual(w.data[(i * 13) % w.data.size()], p.edit, w.scm);
      Tape t;
      const auto b = w.proxy.bind(t);
      const Var l = record_hi(t, w.proxy, b, w.model.predict(p.counterfactual.tokens).logits, p.base.tokens,
                              source.tokens, p.edit.concept_id, 2.0);
      t.backward(l);
      w.proxy.accumulate_grads(t, b, g);
      return t.value(l)[0];
    });
    benchmark::DoNotOptimize(loss);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(batch));
}

}  // namespace

BENCHMARK(BM_TrueEffects)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_CpmHiErrors)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MacroF1)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GroupTable)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_HiGradients)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
