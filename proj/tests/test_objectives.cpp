// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"

#include "cpm/encoder.hpp"
#include "cpm/error.hpp"
#include "cpm/objectives.hpp"
#include "support/gradient_suite.hpp"
#include "support/oracles.hpp"

using namespace cpm;

namespace {

std::array<double, kClasses> softened(const Probs& logits, double t) {
  std::array<double, kClasses> p{};
  double mx = *std::max_element(logits.begin(), logits.end()), z = 0;
  for (int i = 0; i < kClasses; ++i) z += p[i] = std::exp((logits[i] - mx) / t);
  for (double& v : p) v /= z;
  return p;
}

double entropy(const std::array<double, kClasses>& p) {
  double h = 0;
  for (double v : p) h -= v > 0 ? v * std::log(v) : 0.0;
  return h;
}

}  // namespace

TEST_CASE("encoder basics") {
  const ScmConfig scm;
  const auto layout = VocabLayout::from(scm);
  EncoderConfig cfg;
  cfg.vocab_size = layout.size();
  CHECK(cfg.vocab_size == 81);
  const auto data = generate_dataset(scm, 30, 1);

  const Encoder zero = Encoder::zeros(cfg);
  for (double p : zero.predict(data[0].tokens).probs) CHECK(p == doctest::Approx(0.2).epsilon(1e-15));

  const Encoder m = Encoder::random(cfg, 3);
  for (const auto& ex : data) {
    auto shuffled = ex.tokens;
    std::reverse(shuffled.begin(), shuffled.end());
    std::rotate(shuffled.begin(), shuffled.begin() + 5, shuffled.end());
    const auto a = m.predict(ex.tokens).probs, b = m.predict(shuffled).probs;
    double sum = 0;
    for (int i = 0; i < kClasses; ++i) {
      CHECK(std::abs(a[i] - b[i]) < 1e-12);
      CHECK(a[i] > 0);
      CHECK(a[i] < 1);
      sum += a[i];
    }
    CHECK(std::abs(sum - 1) < 1e-12);
  }
}

TEST_CASE("intervention tokens and sites") {
  const ScmConfig scm;
  const auto layout = VocabLayout::from(scm);
  const std::vector<TokenId> tokens{3, 40, 41};
  const auto appended = append_intervention_token(tokens, {0, ConceptValue::Negative}, layout);
  CHECK(appended.back() == layout.intervention_begin());
  CHECK(std::vector<TokenId>(appended.begin(), appended.end() - 1) == tokens);
  std::set<TokenId> ids;
  for (int c = 0; c < scm.k; ++c) {
    for (auto v : kConceptValues) {
      const auto t = append_intervention_token(tokens, {c, v}, layout).back();
      CHECK(t >= layout.intervention_begin());
      CHECK(t < layout.size());
      ids.insert(t);
    }
  }
  CHECK(ids.size() == static_cast<std::size_t>(3 * scm.k));

  EncoderConfig cfg;
  cfg.vocab_size = layout.size();
  CHECK(site_for(0, cfg) == InterventionSite{cfg.intervention_layer, {0, 16}});
  std::size_t next = 0;
  for (int c = 0; c < 4; ++c) {
    const auto s = site_for(c, cfg);
    CHECK(s.range.begin == next);
    next = s.range.end;
  }
  CHECK(next == 64u);
  CHECK(residual_range(cfg).width() == 0u);
  CHECK_THROWS_AS(site_for(4, cfg), UsageError);
  cfg.site_width = 17;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.site_width = 16;
  cfg.intervention_layer = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("smoothed cross-entropy") {
  CounterRng rng(5, "ce");
  for (int trial = 0; trial < 50; ++trial) {
    Probs teacher{}, student{};
    for (int i = 0; i < kClasses; ++i) {
      teacher[i] = rng.normal(0, 2);
      student[i] = rng.normal(0, 2);
    }
    const double t = 0.5 + trial % 4;
    const auto pt = softened(teacher, t);
    // Self-distillation reaches the entropy floor; anything else is above it.
    CHECK(smoothed_ce(teacher, teacher, t) == doctest::Approx(entropy(pt)).epsilon(1e-12));
    CHECK(smoothed_ce(teacher, student, t) >= entropy(pt) - 1e-12);
    // Gradient wrt student logits is (softmax(s/T) - softmax(t/T)) / T.
    Tape tape;
    Var s = tape.leaf(Tensor::vector(std::span<const double>(student)));
    tape.backward(smoothed_ce(tape, teacher, s, t));
    const auto g = tape.grad(s);
    const auto ps = softened(student, t);
    for (int i = 0; i < kClasses; ++i) CHECK(std::abs(g[i] - (ps[i] - pt[i]) / t) < 1e-12);
  }
  const Probs uniform{};
  const Probs flat{0.3, 0.3, 0.3, 0.3, 0.3};
  CHECK(smoothed_ce(uniform, flat, 2.0) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  CHECK(smoothed_ce(uniform, Probs{1, 0, 0, 0, 0}, 2.0) > std::log(5.0));
  CHECK_THROWS_AS(smoothed_ce(uniform, flat, 0.0), ConfigError);
}

TEST_CASE("gradient suite: every loss matches central differences over 20 seeds") {
  const auto r = oracle::run_gradient_suite(20);
  for (std::size_t i = 0; i < r.max_rel.size(); ++i) {
    CAPTURE(oracle::GradientSuiteResult::kNames[i]);
    CHECK(r.checked[i] > 1000u);
    CHECK(r.max_rel[i] < 1e-4);
  }
}

TEST_CASE("loss semantics") {
  const ScmConfig scm;
  const auto layout = VocabLayout::from(scm);
  EncoderConfig cfg;
  cfg.vocab_size = layout.size();
  const Encoder bb = Encoder::random(cfg, 8);
  Encoder proxy = bb;
  proxy.add_probes(2);
  const auto data = generate_dataset(scm, 20, 4);

  SUBCASE("a proxy equal to the black box sits at the mimic floor") {
    double floor = 0;
    for (const auto& ex : data) floor += entropy(softened(bb.predict(ex.tokens).logits, 2.0));
    CHECK(loss_mimic(bb, proxy, data, 2.0) == doctest::Approx(floor / 20).epsilon(1e-12));
    Tape t;
    const auto b = proxy.bind(t);
    t.backward(record_mimic(t, proxy, b, bb.predict(data[0].tokens).logits, data[0].tokens, 2.0));
    for (double g : t.grad(b.vars[proxy.embedding_index()])) CHECK(std::abs(g) < 1e-12);
  }
  SUBCASE("mimic is invariant to batch order") {
    auto reversed = data;
    std::reverse(reversed.begin(), reversed.end());
    const Encoder other = Encoder::random(cfg, 9);
    CHECK(loss_mimic(bb, other, data, 2.0) == doctest::Approx(loss_mimic(bb, other, reversed, 2.0)).epsilon(1e-14));
  }
  SUBCASE("pair orientations give distinct IN terms") {
    const auto& x = data[0];
    const auto e = alternative_edits(x)[0];
    const auto cf = true_counterfactual(x, e, scm);
    const CounterfactualPair fwd{x, cf, e, PairKind::TrueCF};
    const CounterfactualPair back{cf, x, {e.concept_id, x.concepts[static_cast<std::size_t>(e.concept_id)]},
                                  PairKind::TrueCF};
    if (bb.predict(x.tokens).logits != bb.predict(cf.tokens).logits) {
      CHECK(loss_in(bb, proxy, fwd, layout, 2.0) != loss_in(bb, proxy, back, layout, 2.0));
    }
    // Null pair: the teacher is the black box on the base itself.
    const CounterfactualPair null{x, x, {0, x.concepts[0]}, PairKind::Null};
    const auto student = proxy.predict(append_intervention_token(x.tokens, null.edit, layout));
    CHECK(loss_in(bb, proxy, null, layout, 2.0) == smoothed_ce(bb.predict(x.tokens).logits, student.logits, 2.0));
  }
  SUBCASE("HI with the base as its own source reduces to mimic") {
    const auto& x = data[1];
    const CounterfactualPair null{x, x, {2, x.concepts[2]}, PairKind::Null};
    CHECK(loss_hi(bb, proxy, null, x, 2.0) ==
          smoothed_ce(bb.predict(x.tokens).logits, proxy.predict(x.tokens).logits, 2.0));
    Example wrong = x;
    wrong.concepts[2] = x.concepts[2] == ConceptValue::Positive ? ConceptValue::Negative : ConceptValue::Positive;
    CHECK_THROWS_AS(loss_hi(bb, proxy, null, wrong, 2.0), UsageError);
  }
  SUBCASE("HI depends on the source only through its site activations") {
    // Reordering the source keeps its (mean-pooled) site slice, hence the loss.
    const auto& x = data[2];
    const auto e = alternative_edits(x)[0];
    const auto cf = true_counterfactual(x, e, scm);
    auto source = true_counterfactual(data[3], e, scm);
    auto permuted = source;
    std::reverse(permuted.tokens.begin(), permuted.tokens.end());
    const CounterfactualPair p{x, cf, e, PairKind::TrueCF};
    CHECK(std::abs(loss_hi(bb, proxy, p, source, 2.0) - loss_hi(bb, proxy, p, permuted, 2.0)) < 1e-12);
  }
  SUBCASE("untrained probes sit near chance and their gradient reaches the trunk") {
    double total = 0;
    const auto big = generate_dataset(scm, 300, 6);
    for (std::uint64_t s = 0; s < 5; ++s) {
      Encoder p = Encoder::random(cfg, s);
      p.add_probes(s + 10);
      total += loss_multi(p, big);
    }
    CHECK(total / 5 == doctest::Approx(4 * std::log(3.0)).epsilon(0.1));
    Tape t;
    const auto b = proxy.bind(t);
    const auto fwd = proxy.forward(t, b, data[0].tokens);
    t.backward(record_multi(t, proxy, b, fwd.hidden[static_cast<std::size_t>(cfg.intervention_layer - 1)],
                            data[0].concepts));
    const auto g = t.grad(b.vars[proxy.embedding_index()]);
    CHECK(std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; }));
  }
}
