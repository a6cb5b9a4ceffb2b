// SPDX-License-Identifier: Apache-2.0
#include "cpm/scm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cpm/error.hpp"

namespace cpm {

namespace {

double unit(std::uint64_t bits) { return static_cast<double>(bits >> 11) * 0x1.0p-53; }

std::string concept_code(std::span<const ConceptValue> concepts) {
  std::string s;
  for (auto c : concepts) s += c == ConceptValue::Negative ? '-' : c == ConceptValue::Positive ? '+' : '0';
  return s;
}

std::string regenerated_id(const ScmConfig& cfg, const Example& base, std::span<const ConceptValue> concepts) {
  std::string root(root_id(base.id));
  auto factual = draw_concepts(cfg, base.u_seed);
  if (std::equal(factual.begin(), factual.end(), concepts.begin(), concepts.end())) return root;
  return root + "@" + concept_code(concepts);
}

}  // namespace

ConceptValue concept_value_from_int(int v) {
  if (v < -1 || v > 1) throw SchemaError("concept value " + std::to_string(v) + " not in {-1, 0, 1}");
  return static_cast<ConceptValue>(v);
}

const char* to_string(PairKind kind) {
  switch (kind) {
    case PairKind::TrueCF: return "true";
    case PairKind::HumanLike: return "humanlike";
    case PairKind::Sampled: return "sampled";
    case PairKind::Null: return "null";
  }
  return "?";
}

PairKind pair_kind_from_string(std::string_view s) {
  if (s == "true") return PairKind::TrueCF;
  if (s == "humanlike") return PairKind::HumanLike;
  if (s == "sampled") return PairKind::Sampled;
  if (s == "null") return PairKind::Null;
  throw SchemaError("unknown pair kind '" + std::string(s) + "'");
}

void ScmConfig::validate() const {
  if (k < 1) throw ConfigError("scm.k must be >= 1");
  if (vocab_noise < 1) throw ConfigError("scm.vocab_noise must be >= 1");
  if (tokens_per_concept_value < 1) throw ConfigError("scm.tokens_per_concept_value must be >= 1");
  if (seq_len < k) throw ConfigError("scm.seq_len must be >= scm.k");
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
  };
  prob(label_noise, "scm.label_noise");
  prob(emit_prob, "scm.emit_prob");
  prob(p_style, "scm.p_style");
  prob(null_rate, "scm.null_rate");
  if (!concept_priors.empty()) {
    if (concept_priors.size() != static_cast<std::size_t>(k)) {
      throw ConfigError("scm.concept_priors must list one categorical per concept");
    }
    for (const auto& p : concept_priors) {
      double s = 0.0;
      for (double v : p) {
        prob(v, "scm.concept_priors entries");
        s += v;
      }
      if (std::abs(s - 1.0) > 1e-9) throw ConfigError("scm.concept_priors rows must sum to 1");
    }
  }
}

std::array<double, 3> ScmConfig::prior(int concept_id) const {
  if (concept_priors.empty()) return {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  return concept_priors.at(static_cast<std::size_t>(concept_id));
}

int bucket_label(int sum, int k) {
  if (2 * sum <= -k) return 0;
  if (6 * sum <= -k) return 1;
  if (6 * sum < k) return 2;
  if (2 * sum < k) return 3;
  return 4;
}

std::vector<ConceptValue> draw_concepts(const ScmConfig& cfg, std::uint64_t u_seed) {
  CounterRng rng(u_seed, "concepts");
  std::vector<ConceptValue> out(static_cast<std::size_t>(cfg.k));
  for (int i = 0; i < cfg.k; ++i) {
    const double r = unit(rng.at(static_cast<std::uint64_t>(i)));
    const auto p = cfg.prior(i);
    out[static_cast<std::size_t>(i)] = r < p[0]          ? ConceptValue::Negative
                                       : r < p[0] + p[1] ? ConceptValue::Unknown
                                                         : ConceptValue::Positive;
  }
  return out;
}

Example realize(const ScmConfig& cfg, std::uint64_t u_seed, std::uint64_t v_seed,
                std::span<const ConceptValue> concepts, std::string id) {
  if (concepts.size() != static_cast<std::size_t>(cfg.k)) {
    throw ConfigError("realize: expected " + std::to_string(cfg.k) + " concepts");
  }
  const auto layout = VocabLayout::from(cfg);
  const auto len = static_cast<std::size_t>(cfg.seq_len);

  Example ex;
  ex.id = std::move(id);
  ex.u_seed = u_seed;
  ex.v_seed = v_seed;
  ex.concepts.assign(concepts.begin(), concepts.end());

  // Style layer (V): background tokens for every position and a slot per concept.
  CounterRng noise_rng(v_seed, "noise");
  ex.tokens.resize(len);
  for (std::size_t p = 0; p < len; ++p) {
    ex.tokens[p] = layout.noise_token(static_cast<int>(noise_rng.below(static_cast<std::uint64_t>(cfg.vocab_noise))));
  }
  std::vector<std::size_t> slots(len);
  std::iota(slots.begin(), slots.end(), std::size_t{0});
  CounterRng perm_rng(v_seed, "slots");
  shuffle(slots.begin(), slots.end(), perm_rng);
  CounterRng variant_rng(v_seed, "variant");

  // Concept layer (U): emission flags and label jitter.
  CounterRng emit_rng(u_seed, "emit");
  int sum = 0;
  for (int i = 0; i < cfg.k; ++i) {
    const auto c = concepts[static_cast<std::size_t>(i)];
    sum += to_int(c);
    const bool emits = unit(emit_rng.at(static_cast<std::uint64_t>(i))) < cfg.emit_prob;
    const auto variant = static_cast<int>(
        (static_cast<u128>(variant_rng.at(static_cast<std::uint64_t>(i))) *
         static_cast<std::uint64_t>(cfg.tokens_per_concept_value)) >> 64);
    if (c != ConceptValue::Unknown && emits) {
      ex.tokens[slots[static_cast<std::size_t>(i)]] = layout.concept_token(i, c, variant);
    }
  }
  CounterRng label_rng(u_seed, "label");
  int label = bucket_label(sum, cfg.k);
  if (unit(label_rng.at(0)) < cfg.label_noise) {
    label += unit(label_rng.at(1)) < 0.5 ? -1 : 1;
    label = std::clamp(label, 0, 4);
  }
  ex.label = label;
  return ex;
}

Example regenerate(const ScmConfig& cfg, const Example& ex) {
  return realize(cfg, ex.u_seed, ex.v_seed, ex.concepts, ex.id);
}

std::vector<Example> generate_dataset(const ScmConfig& cfg, std::size_t n, std::uint64_t seed,
                                      std::string_view id_prefix) {
  cfg.validate();
  if (n == 0) throw ConfigError("dataset size must be >= 1");
  const CounterRng u_stream(seed, "u");
  const CounterRng v_stream(seed, "v");
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto u = u_stream.at(i);
    const auto v = v_stream.at(i);
    auto concepts = draw_concepts(cfg, u);
    out.push_back(realize(cfg, u, v, concepts, std::string(id_prefix) + "-" + std::to_string(i)));
  }
  return out;
}

Example true_counterfactual(const Example& base, const InterventionDescriptor& edit, const ScmConfig& cfg) {
  if (edit.concept_id < 0 || edit.concept_id >= cfg.k) {
    throw UsageError("intervention concept " + std::to_string(edit.concept_id) + " out of range");
  }
  if (base.concepts[static_cast<std::size_t>(edit.concept_id)] == edit.target) return base;
  auto concepts = base.concepts;
  concepts[static_cast<std::size_t>(edit.concept_id)] = edit.target;
  return realize(cfg, base.u_seed, base.v_seed, concepts, regenerated_id(cfg, base, concepts));
}

Example restyle(const Example& ex, const ScmConfig& cfg, std::uint64_t noise_seed) {
  Example out = ex;
  const auto layout = VocabLayout::from(cfg);
  CounterRng rng(noise_seed, "style");
  bool changed = false;
  for (auto& t : out.tokens) {
    if (!layout.is_noise_token(t)) continue;
    // Two draws per noise position whether or not it is perturbed, so the
    // decision for one position never shifts the stream of the next.
    const bool perturb = rng.uniform() < cfg.p_style;
    const auto offset = rng.below(static_cast<std::uint64_t>(std::max(cfg.vocab_noise - 1, 1)));
    if (perturb && cfg.vocab_noise > 1) {
      const int old = t - layout.noise_begin();
      t = layout.noise_token((old + 1 + static_cast<int>(offset)) % cfg.vocab_noise);
      changed = true;
    }
  }
  if (changed) out.id += "~h" + std::to_string(noise_seed);
  return out;
}

Example humanlike_counterfactual(const Example& base, const InterventionDescriptor& edit, const ScmConfig& cfg,
                                 std::uint64_t noise_seed) {
  return restyle(true_counterfactual(base, edit, cfg), cfg, noise_seed);
}

Example resolve_example(std::string_view id, const std::unordered_map<std::string, const Example*>& factual,
                        const ScmConfig& cfg) {
  if (auto it = factual.find(std::string(id)); it != factual.end()) return *it->second;
  std::string_view rest = id;
  std::optional<std::uint64_t> noise_seed;
  if (auto h = rest.find("~h"); h != std::string_view::npos) {
    const std::string digits(rest.substr(h + 2));
    if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) {
      throw SchemaError("malformed example id '" + std::string(id) + "'");
    }
    noise_seed = std::stoull(digits);
    rest = rest.substr(0, h);
  }
  const std::string_view root = root_id(rest);
  auto it = factual.find(std::string(root));
  if (it == factual.end()) throw NotFoundError("example '" + std::string(root) + "' not in dataset");
  const Example& base = *it->second;
  auto concepts = base.concepts;
  if (root.size() < rest.size()) {
    const std::string_view code = rest.substr(root.size() + 1);
    if (code.size() != concepts.size()) throw SchemaError("malformed example id '" + std::string(id) + "'");
    for (std::size_t i = 0; i < code.size(); ++i) {
      switch (code[i]) {
        case '-': concepts[i] = ConceptValue::Negative; break;
        case '0': concepts[i] = ConceptValue::Unknown; break;
        case '+': concepts[i] = ConceptValue::Positive; break;
        default: throw SchemaError("malformed example id '" + std::string(id) + "'");
      }
    }
  }
  Example ex = realize(cfg, base.u_seed, base.v_seed, concepts, regenerated_id(cfg, base, concepts));
  if (noise_seed) ex = restyle(ex, cfg, *noise_seed);
  if (ex.id != id) throw SchemaError("example id '" + std::string(id) + "' is not canonical");
  return ex;
}

std::vector<std::size_t> matching_candidates(const Example& base, const InterventionDescriptor& edit,
                                             std::span<const Example> pool) {
  std::vector<std::size_t> out;
  const auto ci = static_cast<std::size_t>(edit.concept_id);
  for (std::size_t p = 0; p < pool.size(); ++p) {
    const auto& c = pool[p].concepts;
    if (c.size() != base.concepts.size() || c[ci] != edit.target) continue;
    bool agree = true;
    for (std::size_t j = 0; j < c.size() && agree; ++j) {
      if (j != ci && c[j] != base.concepts[j]) agree = false;
    }
    if (agree) out.push_back(p);
  }
  return out;
}

std::optional<Example> sample_counterfactual(const Example& base, const InterventionDescriptor& edit,
                                             std::span<const Example> pool, CounterRng& rng) {
  if (pool.empty()) throw UsageError("sample_counterfactual: empty pool");
  auto candidates = matching_candidates(base, edit, pool);
  if (candidates.empty()) return std::nullopt;
  return pool[candidates[rng.below(candidates.size())]];
}

std::vector<InterventionDescriptor> alternative_edits(const Example& ex) {
  std::vector<InterventionDescriptor> out;
  for (std::size_t i = 0; i < ex.concepts.size(); ++i) {
    for (auto v : kConceptValues) {
      if (v != ex.concepts[i]) out.push_back({static_cast<int>(i), v});
    }
  }
  return out;
}

std::vector<CounterfactualPair> build_pairs(std::span<const Example> dataset, PairStrategy strategy,
                                            const ScmConfig& cfg, std::uint64_t seed) {
  if (dataset.empty()) throw UsageError("build_pairs: empty dataset");
  std::vector<CounterfactualPair> out;
  const CounterRng root(seed, strategy == PairStrategy::HumanLike ? "pairs/humanlike" : "pairs/sampled");
  const CounterRng null_stream = root.split("null");
  for (std::size_t e = 0; e < dataset.size(); ++e) {
    const Example& x = dataset[e];
    const CounterRng per_example = root.split(e);
    for (const auto& edit : alternative_edits(x)) {
      const auto edit_key = static_cast<std::uint64_t>(edit.concept_id * 3 + value_index(edit.target));
      CounterRng rng = per_example.split(edit_key);
      std::optional<Example> cf;
      PairKind kind;
      if (strategy == PairStrategy::HumanLike) {
        cf = humanlike_counterfactual(x, edit, cfg, rng.next_u64());
        kind = PairKind::HumanLike;
      } else {
        cf = sample_counterfactual(x, edit, dataset, rng);
        kind = PairKind::Sampled;
      }
      if (!cf) continue;
      const InterventionDescriptor back{edit.concept_id, x.concepts[static_cast<std::size_t>(edit.concept_id)]};
      out.push_back({x, *cf, edit, kind});
      out.push_back({*cf, x, back, kind});
    }
    if (strategy == PairStrategy::Sampled) {
      for (int i = 0; i < cfg.k; ++i) {
        const auto draw = null_stream.at(e * static_cast<std::uint64_t>(cfg.k) + static_cast<std::uint64_t>(i));
        if (unit(draw) < cfg.null_rate) {
          out.push_back({x, x, {i, x.concepts[static_cast<std::size_t>(i)]}, PairKind::Null});
        }
      }
    }
  }
  return out;
}

std::vector<CounterfactualPair> true_pairs(std::span<const Example> dataset, const ScmConfig& cfg) {
  std::vector<CounterfactualPair> out;
  for (const auto& x : dataset) {
    for (const auto& edit : alternative_edits(x)) {
      out.push_back({x, true_counterfactual(x, edit, cfg), edit, PairKind::TrueCF});
    }
  }
  return out;
}

std::string_view root_id(std::string_view id) {
  auto at = id.find('@');
  auto tilde = id.find('~');
  return id.substr(0, std::min(at, tilde));
}

}  // namespace cpm
