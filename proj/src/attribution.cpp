// SPDX-License-Identifier: Apache-2.0
#include "cpm/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "cpm/error.hpp"

namespace cpm {

namespace {

std::vector<double> target_weights(const IgConfig& cfg) {
  std::vector<double> w(kClasses, 0.0);
  for (int c : cfg.target_classes) w[static_cast<std::size_t>(c)] = 1.0;
  return w;
}

Tensor embedding_rows(const Encoder& proxy, std::span<const TokenId> tokens) {
  const Tensor& table = proxy.params()[proxy.embedding_index()];
  const std::size_t d = table.cols();
  Tensor rows({tokens.size(), d});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto t = tokens[i];
    if (t < 0 || static_cast<std::size_t>(t) >= table.rows()) {
      throw InputError("unknown token id " + std::to_string(t));
    }
    std::copy_n(table.row(static_cast<std::size_t>(t)).begin(), d, rows.row(i).begin());
  }
  return rows;
}

}  // namespace

void IgConfig::validate() const {
  if (steps < 1) throw ConfigError("ig.steps must be >= 1");
  if (target_classes.empty()) throw ConfigError("ig.target_classes must not be empty");
  for (int c : target_classes) {
    if (c < 0 || c >= kClasses) throw ConfigError("ig.target_classes: class " + std::to_string(c) + " out of range");
  }
}

std::vector<double> normalize_scores(std::span<const double> raw) {
  std::vector<double> out(raw.size(), 0.0);
  if (raw.empty()) return out;
  const double n = static_cast<double>(raw.size());
  double mean = 0.0, peak = 0.0;
  for (double v : raw) {
    mean += v;
    peak = std::max(peak, std::abs(v));
  }
  mean /= n;
  double var = 0.0;
  for (double v : raw) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  if (!(sd > 1e-12 * peak)) return out;
  double zmax = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    out[i] = (raw[i] - mean) / sd;
    zmax = std::max(zmax, std::abs(out[i]));
  }
  for (double& v : out) v /= zmax;
  return out;
}

double target_mass(const Encoder& proxy, std::span<const TokenId> tokens, const IgConfig& cfg) {
  const auto p = proxy.predict(tokens).probs;
  double s = 0.0;
  for (int c : cfg.target_classes) s += p[static_cast<std::size_t>(c)];
  return s;
}

AttributionRow masked_ig(const Encoder& proxy, std::span<const TokenId> tokens, IndexRange keep,
                         const IgConfig& cfg) {
  cfg.validate();
  const Tensor e = embedding_rows(proxy, tokens);
  const std::vector<TokenId> pad(tokens.size(), VocabLayout::pad());
  const Tensor base = embedding_rows(proxy, pad);
  const std::vector<double> weights = target_weights(cfg);
  const GradMask mask{proxy.config().intervention_layer, keep};

  std::vector<double> grad_sum(e.size(), 0.0);
  for (int s = 0; s < cfg.steps; ++s) {
    const double alpha = (s + 0.5) / cfg.steps;
    Tensor point = base;
    for (std::size_t i = 0; i < point.size(); ++i) point[i] += alpha * (e[i] - base[i]);
    Tape tape;
    auto bound = proxy.bind(tape);
    Var rows = tape.leaf(std::move(point));
    auto out = proxy.forward_rows(tape, bound, rows);
    Var f = tape.dot(out.probs, weights);
    tape.backward_masked(f, mask);
    auto g = tape.grad_view(rows);
    if (g.empty()) continue;
    for (std::size_t i = 0; i < grad_sum.size(); ++i) grad_sum[i] += g[i];
  }

  AttributionRow row;
  row.raw.assign(tokens.size(), 0.0);
  const std::size_t d = e.cols();
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t i = t * d + j;
      acc += (e[i] - base[i]) * (grad_sum[i] / cfg.steps);
    }
    row.raw[t] = acc;
    row.score += acc;
  }
  row.token_scores = normalize_scores(row.raw);
  row.target_score = target_mass(proxy, tokens, cfg);
  return row;
}

AttributionRow mediated_ig(const Encoder& proxy, std::span<const TokenId> tokens, int concept_id,
                           const IgConfig& cfg) {
  auto row = masked_ig(proxy, tokens, site_for(concept_id, proxy.config()).range, cfg);
  row.concept_id = concept_id;
  return row;
}

AttributionRow full_ig(const Encoder& proxy, std::span<const TokenId> tokens, const IgConfig& cfg) {
  const auto w = static_cast<std::size_t>(proxy.config().hidden_width);
  auto row = masked_ig(proxy, tokens, IndexRange{0, w}, cfg);
  row.concept_id = kFullRow;
  return row;
}

AttributionRow residual_ig(const Encoder& proxy, std::span<const TokenId> tokens, const IgConfig& cfg) {
  auto row = masked_ig(proxy, tokens, residual_range(proxy.config()), cfg);
  row.concept_id = kResidualRow;
  return row;
}

AttributionTable attribution_table(const Encoder& proxy, const Example& x, const IgConfig& cfg) {
  AttributionTable table;
  table.example_id = x.id;
  table.tokens = x.tokens;
  table.predicted_class = proxy.predict(x.tokens).argmax();
  for (int i = 0; i < proxy.config().concepts; ++i) table.rows.push_back(mediated_ig(proxy, x.tokens, i, cfg));
  return table;
}

std::string AttributionTable::to_jsonl() const {
  std::string out;
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["example_id"] = example_id;
    j["predicted_class"] = predicted_class;
    j["concept"] = r.concept_id;
    j["score"] = r.score;
    j["token_scores"] = r.token_scores;
    out += j.dump() + "\n";
  }
  return out;
}

std::string AttributionTable::to_text() const {
  std::string out;
  char buf[64];
  out += "example " + example_id + "  predicted class " + std::to_string(predicted_class) + "\n";
  out += "concept  score(sum raw)  tokens\n";
  out += "                         ";
  for (TokenId t : tokens) {
    std::snprintf(buf, sizeof buf, " %6d", t);
    out += buf;
  }
  out += "\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "C%-6d  %+14.4f  ", r.concept_id, r.score);
    out += buf;
    for (double v : r.token_scores) {
      std::snprintf(buf, sizeof buf, " %+6.2f", v);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace cpm
