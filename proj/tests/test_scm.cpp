// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <map>
#include <set>
#include <unordered_map>

#include "doctest.h"

#include "cpm/error.hpp"
#include "cpm/scm.hpp"
#include "support/oracles.hpp"

using namespace cpm;

namespace {

ScmConfig noiseless() {
  ScmConfig c;
  c.label_noise = 0.0;
  return c;
}

int concept_sum(const Example& ex) {
  int s = 0;
  for (auto c : ex.concepts) s += to_int(c);
  return s;
}

void check_pair(const CounterfactualPair& p) {
  const auto i = static_cast<std::size_t>(p.edit.concept_id);
  switch (p.kind) {
    case PairKind::Null:
      CHECK(p.base.id == p.counterfactual.id);
      CHECK(p.base.tokens == p.counterfactual.tokens);
      break;
    case PairKind::Sampled:
      for (std::size_t j = 0; j < p.base.concepts.size(); ++j) {
        if (j != i) CHECK(p.base.concepts[j] == p.counterfactual.concepts[j]);
      }
      [[fallthrough]];
    case PairKind::TrueCF:
    case PairKind::HumanLike:
      CHECK(p.counterfactual.concepts[i] == p.edit.target);
      break;
  }
}

}  // namespace

TEST_CASE("bucket rule agrees with the closed-form oracle") {
  for (int k = 1; k <= 12; ++k) {
    for (int s = -k; s <= k; ++s) {
      CAPTURE(k);
      CAPTURE(s);
      CHECK(bucket_label(s, k) == oracle::bucket(s, k));
      CHECK(bucket_label(-s, k) == 4 - bucket_label(s, k));
      if (s > -k) CHECK(bucket_label(s, k) >= bucket_label(s - 1, k));
    }
  }
  const std::map<int, int> k4 = {{-4, 0}, {-3, 0}, {-2, 0}, {-1, 1}, {0, 2}, {1, 3}, {2, 4}, {3, 4}, {4, 4}};
  for (auto [s, label] : k4) CHECK(bucket_label(s, 4) == label);
}

TEST_CASE("generator labels follow the bucket rule") {
  const auto cfg = noiseless();
  const std::vector<ConceptValue> pos(4, ConceptValue::Positive), unk(4, ConceptValue::Unknown);
  CHECK(realize(cfg, 1, 2, pos, "p").label == 4);
  CHECK(realize(cfg, 1, 2, unk, "u").label == 2);
  // Brute force over every concept assignment and several seeds.
  for (int code = 0; code < 81; ++code) {
    std::vector<ConceptValue> cs(4);
    int rest = code, sum = 0;
    for (auto& c : cs) {
      c = value_from_index(rest % 3);
      rest /= 3;
      sum += to_int(c);
    }
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto ex = realize(cfg, seed, seed + 100, cs, "x");
      CHECK(ex.label == oracle::bucket(sum, 4));
      CHECK(ex.tokens.size() == 16u);
    }
  }
}

TEST_CASE("datasets are deterministic and regenerable") {
  const ScmConfig cfg;
  const auto a = generate_dataset(cfg, 300, 42);
  const auto b = generate_dataset(cfg, 300, 42);
  CHECK(a == b);
  CHECK(a != generate_dataset(cfg, 300, 43));
  const auto layout = VocabLayout::from(cfg);
  std::set<std::string> ids;
  for (const auto& ex : a) {
    CHECK(regenerate(cfg, ex) == ex);
    CHECK(ids.insert(ex.id).second);
    CHECK(ex.label >= 0);
    CHECK(ex.label <= 4);
    for (auto t : ex.tokens) {
      CHECK(t >= 1);
      CHECK(t < layout.intervention_begin());
    }
    // Unknown concepts emit nothing; emitted tokens carry their own concept's value.
    for (auto t : ex.tokens) {
      const int c = layout.concept_of(t);
      if (c < 0) continue;
      const auto v = ex.concepts[static_cast<std::size_t>(c)];
      CHECK(v != ConceptValue::Unknown);
      CHECK(t >= layout.concept_token(c, v, 0));
      CHECK(t < layout.concept_token(c, v, 0) + cfg.tokens_per_concept_value);
    }
  }
  // Label jitter only ever moves one class.
  for (const auto& ex : a) CHECK(std::abs(ex.label - bucket_label(concept_sum(ex), cfg.k)) <= 1);
}

TEST_CASE("concept priors shape the concept marginals") {
  ScmConfig cfg;
  cfg.concept_priors = {{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}, {0.5, 0.0, 0.5}};
  const auto data = generate_dataset(cfg, 400, 3);
  int pos3 = 0;
  for (const auto& ex : data) {
    CHECK(ex.concepts[0] == ConceptValue::Negative);
    CHECK(ex.concepts[1] == ConceptValue::Unknown);
    CHECK(ex.concepts[2] == ConceptValue::Positive);
    CHECK(ex.concepts[3] != ConceptValue::Unknown);
    pos3 += ex.concepts[3] == ConceptValue::Positive;
  }
  CHECK(pos3 > 150);
  CHECK(pos3 < 250);
  ScmConfig bad;
  bad.concept_priors = {{0.5, 0.5, 0.5}};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ScmConfig{};
  bad.seq_len = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ScmConfig{};
  bad.emit_prob = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("true counterfactuals") {
  const auto cfg = noiseless();
  const auto data = generate_dataset(cfg, 100, 5);
  for (const auto& ex : data) {
    for (int i = 0; i < cfg.k; ++i) {
      const auto current = ex.concepts[static_cast<std::size_t>(i)];
      CHECK(true_counterfactual(ex, {i, current}, cfg) == ex);
      for (auto target : kConceptValues) {
        const auto cf = true_counterfactual(ex, {i, target}, cfg);
        // Soundness: only concept i moves; idempotence.
        for (int j = 0; j < cfg.k; ++j) {
          const auto js = static_cast<std::size_t>(j);
          CHECK(cf.concepts[js] == (j == i ? target : ex.concepts[js]));
        }
        CHECK(true_counterfactual(cf, {i, target}, cfg) == cf);
        CHECK(cf.label == oracle::bucket(concept_sum(cf), cfg.k));
        CHECK(cf.v_seed == ex.v_seed);
      }
      if (current == ConceptValue::Negative) {
        const auto cf = true_counterfactual(ex, {i, ConceptValue::Positive}, cfg);
        CHECK(cf.label - ex.label ==
              oracle::bucket(concept_sum(ex) + 2, cfg.k) - oracle::bucket(concept_sum(ex), cfg.k));
      }
    }
    // Edits on different concepts commute.
    for (int i = 0; i < cfg.k; ++i) {
      for (int j = i + 1; j < cfg.k; ++j) {
        const InterventionDescriptor a{i, ConceptValue::Positive}, b{j, ConceptValue::Negative};
        const auto ab = true_counterfactual(true_counterfactual(ex, a, cfg), b, cfg);
        const auto ba = true_counterfactual(true_counterfactual(ex, b, cfg), a, cfg);
        CHECK(ab.tokens == ba.tokens);
        CHECK(ab.concepts == ba.concepts);
        CHECK(ab.label == ba.label);
      }
    }
  }
}

TEST_CASE("humanlike counterfactuals") {
  ScmConfig cfg;
  const auto layout = VocabLayout::from(cfg);
  const auto data = generate_dataset(cfg, 250, 9);
  SUBCASE("p_style = 0 reproduces the true counterfactual") {
    ScmConfig quiet = cfg;
    quiet.p_style = 0.0;
    for (const auto& ex : data) {
      const InterventionDescriptor e{1, ConceptValue::Positive};
      CHECK(humanlike_counterfactual(ex, e, quiet, 77) == true_counterfactual(ex, e, quiet));
    }
  }
  SUBCASE("style perturbation touches only noise tokens at rate p_style") {
    std::size_t changed = 0, noise_positions = 0, pairs = 0;
    for (const auto& ex : data) {
      for (const auto& e : alternative_edits(ex)) {
        if (pairs == 1000) break;
        const auto truth = true_counterfactual(ex, e, cfg);
        const auto h = humanlike_counterfactual(ex, e, cfg, 1000 + pairs);
        ++pairs;
        CHECK(h.concepts == truth.concepts);
        CHECK(h.label == truth.label);
        for (std::size_t p = 0; p < h.tokens.size(); ++p) {
          if (layout.is_concept_token(truth.tokens[p])) {
            CHECK(h.tokens[p] == truth.tokens[p]);
          } else {
            CHECK(layout.is_noise_token(h.tokens[p]));
            ++noise_positions;
            changed += h.tokens[p] != truth.tokens[p];
          }
        }
      }
    }
    CHECK(pairs == 1000);
    const double rate = double(changed) / double(noise_positions);
    CHECK(std::abs(rate - cfg.p_style) < 0.05);
  }
}

TEST_CASE("sampled counterfactuals") {
  const ScmConfig cfg;
  const auto data = generate_dataset(cfg, 300, 21);
  CounterRng rng(1, "t");
  SUBCASE("pool of one: the base itself for a no-op edit") {
    const auto& base = data[0];
    const std::vector<Example> pool{base};
    const auto got = sample_counterfactual(base, {2, base.concepts[2]}, pool, rng);
    REQUIRE(got.has_value());
    CHECK(*got == base);
  }
  SUBCASE("a single match is always returned") {
    const auto& base = data[0];
    auto target = true_counterfactual(base, {0, ConceptValue::Positive}, cfg);
    target.id = "only";
    if (base.concepts[0] == ConceptValue::Positive) target = true_counterfactual(base, {0, ConceptValue::Negative}, cfg);
    const InterventionDescriptor e{0, target.concepts[0]};
    const std::vector<Example> pool{base, target};
    for (int r = 0; r < 20; ++r) CHECK(sample_counterfactual(base, e, pool, rng)->tokens == target.tokens);
    const std::vector<Example> empty{base};
    CHECK_FALSE(sample_counterfactual(base, e, empty, rng).has_value());
  }
  SUBCASE("match set equals a brute-force filter") {
    for (std::size_t b = 0; b < 40; ++b) {
      for (const auto& e : alternative_edits(data[b])) {
        std::vector<std::size_t> expected;
        for (std::size_t j = 0; j < data.size(); ++j) {
          bool ok = data[j].concepts[static_cast<std::size_t>(e.concept_id)] == e.target;
          for (int c = 0; c < cfg.k; ++c) {
            if (c != e.concept_id) ok = ok && data[j].concepts[c] == data[b].concepts[c];
          }
          if (ok) expected.push_back(j);
        }
        CHECK(matching_candidates(data[b], e, data) == expected);
      }
    }
  }
}

TEST_CASE("pair construction") {
  ScmConfig one;
  one.k = 1;
  const auto single = generate_dataset(one, 1, 4);
  const auto hl = build_pairs(single, PairStrategy::HumanLike, one, 1);
  CHECK(hl.size() <= 4u);
  CHECK(hl.size() == 4u);
  for (std::size_t i = 0; i + 1 < hl.size(); i += 2) {
    CHECK(hl[i].base.tokens == hl[i + 1].counterfactual.tokens);
    CHECK(hl[i].counterfactual.tokens == hl[i + 1].base.tokens);
    check_pair(hl[i]);
    check_pair(hl[i + 1]);
  }

  const ScmConfig cfg;
  const auto data = generate_dataset(cfg, 200, 13);
  // Independent enumerator: every alternative edit gives two directed pairs.
  std::size_t humanlike = 0, sampled = 0;
  for (const auto& ex : data) {
    for (int i = 0; i < cfg.k; ++i) {
      for (auto t : kConceptValues) {
        if (t == ex.concepts[static_cast<std::size_t>(i)]) continue;
        humanlike += 2;
        const bool has_match = std::any_of(data.begin(), data.end(), [&](const Example& o) {
          for (int c = 0; c < cfg.k; ++c) {
            const auto want = c == i ? t : ex.concepts[static_cast<std::size_t>(c)];
            if (o.concepts[static_cast<std::size_t>(c)] != want) return false;
          }
          return true;
        });
        if (has_match) sampled += 2;
      }
    }
  }
  const auto h = build_pairs(data, PairStrategy::HumanLike, cfg, 5);
  CHECK(h.size() == humanlike);
  const auto s = build_pairs(data, PairStrategy::Sampled, cfg, 5);
  const auto nulls = static_cast<std::size_t>(
      std::count_if(s.begin(), s.end(), [](const CounterfactualPair& p) { return p.kind == PairKind::Null; }));
  CHECK(s.size() - nulls == sampled);
  // One Bernoulli(null_rate) per (example, concept): mean 80, sd ~8.5.
  CHECK(nulls > 45u);
  CHECK(nulls < 115u);
  for (const auto& p : s) check_pair(p);
  for (const auto& p : h) {
    check_pair(p);
    CHECK(p.kind == PairKind::HumanLike);
  }
  CHECK(build_pairs(data, PairStrategy::Sampled, cfg, 5).size() == s.size());
  for (const auto& p : true_pairs(data, cfg)) {
    check_pair(p);
    CHECK(p.counterfactual == true_counterfactual(p.base, p.edit, cfg));
  }
}

TEST_CASE("counterfactual ids resolve back to their examples") {
  const ScmConfig cfg;
  const auto data = generate_dataset(cfg, 60, 31, "train");
  std::unordered_map<std::string, const Example*> index;
  for (const auto& ex : data) index[ex.id] = &ex;
  for (auto strategy : {PairStrategy::HumanLike, PairStrategy::Sampled}) {
    for (const auto& p : build_pairs(data, strategy, cfg, 2)) {
      CHECK(resolve_example(p.base.id, index, cfg) == p.base);
      CHECK(resolve_example(p.counterfactual.id, index, cfg) == p.counterfactual);
    }
  }
  CHECK_THROWS_AS(resolve_example("nobody", index, cfg), NotFoundError);
  CHECK_THROWS_AS(resolve_example("train-0@++", index, cfg), SchemaError);
  CHECK_THROWS_AS(resolve_example("train-0@+x+-", index, cfg), SchemaError);
  CHECK_THROWS_AS(resolve_example("train-0~hzz", index, cfg), SchemaError);
}
