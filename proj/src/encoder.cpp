// SPDX-License-Identifier: Apache-2.0
#include "cpm/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cpm/error.hpp"
#include "cpm/rng.hpp"

namespace cpm {

namespace {

std::string layer_name(int l, const char* part) {
  return "layer" + std::to_string(l) + "." + part;
}

std::string probe_name(int i, const char* part) {
  return "probe" + std::to_string(i) + "." + part;
}

void fill_normal(Tensor& t, CounterRng& rng, double stddev) {
  for (double& v : t.data) v = rng.normal(0.0, stddev);
}

}  // namespace

void EncoderConfig::validate() const {
  if (vocab_size < 1) throw ConfigError("model.vocab_size must be >= 1");
  if (embed_dim < 1) throw ConfigError("model.embed_dim must be >= 1");
  if (hidden_layers < 1) throw ConfigError("model.hidden_layers must be >= 1");
  if (hidden_width < 1) throw ConfigError("model.hidden_width must be >= 1");
  if (classes != kClasses) throw ConfigError("model.classes is fixed at 5");
  if (intervention_layer < 1 || intervention_layer > hidden_layers) {
    throw ConfigError("model.intervention_layer must lie in [1, hidden_layers]");
  }
  if (site_width < 0) throw ConfigError("model.site_width must be >= 0");
  if (concepts < 1) throw ConfigError("model.concepts must be >= 1");
  if (concepts * site_width > hidden_width) {
    throw ConfigError("concept sites overlap: k * site_width = " + std::to_string(concepts * site_width) +
                      " exceeds hidden_width " + std::to_string(hidden_width));
  }
  if (probe_width < 1) throw ConfigError("model.probe_width must be >= 1");
}

InterventionSite site_for(int concept_id, const EncoderConfig& cfg) {
  if (concept_id < 0 || concept_id >= cfg.concepts) {
    throw UsageError("concept index " + std::to_string(concept_id) + " has no site (k = " +
                     std::to_string(cfg.concepts) + ")");
  }
  const auto w = static_cast<std::size_t>(cfg.site_width);
  const auto i = static_cast<std::size_t>(concept_id);
  return {cfg.intervention_layer, {i * w, (i + 1) * w}};
}

IndexRange residual_range(const EncoderConfig& cfg) {
  return {static_cast<std::size_t>(cfg.concepts * cfg.site_width), static_cast<std::size_t>(cfg.hidden_width)};
}

std::vector<TokenId> append_intervention_token(std::span<const TokenId> tokens, const InterventionDescriptor& edit,
                                               const VocabLayout& layout) {
  if (edit.concept_id < 0 || edit.concept_id >= layout.k) {
    throw UsageError("intervention concept " + std::to_string(edit.concept_id) + " out of range");
  }
  std::vector<TokenId> out(tokens.begin(), tokens.end());
  out.push_back(layout.intervention_token(edit.concept_id, edit.target));
  return out;
}

int Encoder::Prediction::argmax() const {
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

Encoder::Encoder(EncoderConfig cfg, ParamSet params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  index_layout();
}

void Encoder::index_layout() {
  const auto V = static_cast<std::size_t>(cfg_.vocab_size);
  const auto d = static_cast<std::size_t>(cfg_.embed_dim);
  const auto w = static_cast<std::size_t>(cfg_.hidden_width);
  auto expect = [&](std::size_t index, const std::string& name, const Shape& shape) {
    if (index >= params_.size() || params_.name(index) != name) {
      throw SchemaError("parameter " + std::to_string(index) + " should be '" + name + "'");
    }
    if (params_[index].shape != shape) {
      throw SchemaError("parameter '" + name + "' has shape " + shape_string(params_[index].shape) +
                        ", expected " + shape_string(shape));
    }
  };
  std::size_t idx = 0;
  expect(idx++, "embedding", {V, d});
  for (int l = 1; l <= cfg_.hidden_layers; ++l) {
    expect(idx++, layer_name(l, "weight"), {l == 1 ? d : w, w});
    expect(idx++, layer_name(l, "bias"), {w});
  }
  output_index_ = idx;
  expect(idx++, "output.weight", {w, static_cast<std::size_t>(cfg_.classes)});
  expect(idx++, "output.bias", {static_cast<std::size_t>(cfg_.classes)});
  probe_begin_ = idx;
  if (idx == params_.size()) return;
  const auto wc = static_cast<std::size_t>(cfg_.site_width);
  const auto pw = static_cast<std::size_t>(cfg_.probe_width);
  for (int i = 0; i < cfg_.concepts; ++i) {
    expect(idx++, probe_name(i, "hidden.weight"), {wc, pw});
    expect(idx++, probe_name(i, "hidden.bias"), {pw});
    expect(idx++, probe_name(i, "out.weight"), {pw, 3});
    expect(idx++, probe_name(i, "out.bias"), {3});
  }
  if (idx != params_.size()) throw SchemaError("unexpected trailing parameters");
}

Encoder Encoder::zeros(const EncoderConfig& cfg) {
  cfg.validate();
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  const auto d = static_cast<std::size_t>(cfg.embed_dim);
  const auto w = static_cast<std::size_t>(cfg.hidden_width);
  ParamSet p;
  p.add("embedding", Tensor::matrix(V, d));
  for (int l = 1; l <= cfg.hidden_layers; ++l) {
    p.add(layer_name(l, "weight"), Tensor::matrix(l == 1 ? d : w, w));
    p.add(layer_name(l, "bias"), Tensor({w}));
  }
  p.add("output.weight", Tensor::matrix(w, static_cast<std::size_t>(cfg.classes)));
  p.add("output.bias", Tensor({static_cast<std::size_t>(cfg.classes)}));
  return Encoder(cfg, std::move(p));
}

Encoder Encoder::random(const EncoderConfig& cfg, std::uint64_t seed) {
  Encoder e = zeros(cfg);
  CounterRng rng(seed, "encoder/init");
  for (std::size_t i = 0; i < e.params_.size(); ++i) {
    Tensor& t = e.params_[i];
    const auto& name = e.params_.name(i);
    if (name == "embedding") {
      fill_normal(t, rng, 1.0);
    } else if (t.rank() == 2) {
      fill_normal(t, rng, std::sqrt(2.0 / static_cast<double>(t.shape[0])));
    }
  }
  return e;
}

void Encoder::add_probes(std::uint64_t seed) {
  if (has_probes()) return;
  const auto wc = static_cast<std::size_t>(cfg_.site_width);
  const auto pw = static_cast<std::size_t>(cfg_.probe_width);
  CounterRng rng(seed, "encoder/probes");
  for (int i = 0; i < cfg_.concepts; ++i) {
    Tensor hw = Tensor::matrix(wc, pw);
    fill_normal(hw, rng, std::sqrt(2.0 / static_cast<double>(std::max<std::size_t>(wc, 1))));
    Tensor ow = Tensor::matrix(pw, 3);
    fill_normal(ow, rng, std::sqrt(1.0 / static_cast<double>(pw)));
    params_.add(probe_name(i, "hidden.weight"), std::move(hw));
    params_.add(probe_name(i, "hidden.bias"), Tensor({pw}));
    params_.add(probe_name(i, "out.weight"), std::move(ow));
    params_.add(probe_name(i, "out.bias"), Tensor({3}));
  }
  index_layout();
}

void Encoder::reset_intervention_rows(const VocabLayout& layout, std::uint64_t seed, double stddev) {
  Tensor& emb = params_[embedding_index()];
  if (layout.size() != cfg_.vocab_size) throw ConfigError("vocabulary layout does not match model vocab_size");
  CounterRng rng(seed, "encoder/intervention-tokens");
  for (TokenId t = layout.intervention_begin(); t < layout.size(); ++t) {
    for (double& v : emb.row(static_cast<std::size_t>(t))) v = rng.normal(0.0, stddev);
  }
}

Encoder::Bound Encoder::bind(Tape& tape) const {
  Bound b;
  b.vars.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) b.vars.push_back(tape.parameter(params_[i]));
  return b;
}

Encoder::Output Encoder::forward(Tape& tape, const Bound& p, std::span<const TokenId> tokens,
                                 const LayerHook& hook) const {
  if (tokens.empty()) throw InputError("empty token sequence");
  for (TokenId t : tokens) {
    if (t < 0 || t >= cfg_.vocab_size) {
      throw InputError("unknown token id " + std::to_string(t) + " (vocab_size " +
                       std::to_string(cfg_.vocab_size) + ")");
    }
  }
  Var rows = tape.embedding(p.vars[embedding_index()], tokens);
  return forward_rows(tape, p, rows, hook);
}

Encoder::Output Encoder::forward_rows(Tape& tape, const Bound& p, Var rows, const LayerHook& hook) const {
  Output out;
  out.pooled = tape.mean_rows(rows);
  Var h = out.pooled;
  for (int l = 1; l <= cfg_.hidden_layers; ++l) {
    const auto w = static_cast<std::size_t>(1 + 2 * (l - 1));
    h = tape.relu(tape.add_bias(tape.matvec(h, p.vars[w]), p.vars[w + 1]));
    if (hook) h = hook(tape, l, h);
    tape.mark_layer(l, h);
    out.hidden.push_back(h);
  }
  out.logits = tape.add_bias(tape.matvec(h, p.vars[output_index_]), p.vars[output_index_ + 1]);
  out.probs = tape.softmax(out.logits);
  return out;
}

Var Encoder::probe_logits(Tape& tape, const Bound& p, int concept_id, Var slice) const {
  if (!has_probes()) throw UsageError("model has no concept probes");
  const auto base = probe_begin_ + 4 * static_cast<std::size_t>(concept_id);
  Var h = tape.relu(tape.add_bias(tape.matvec(slice, p.vars[base]), p.vars[base + 1]));
  return tape.add_bias(tape.matvec(h, p.vars[base + 2]), p.vars[base + 3]);
}

Encoder::Prediction Encoder::predict(std::span<const TokenId> tokens) const {
  Tape tape;
  auto b = bind(tape);
  auto out = forward(tape, b, tokens);
  Prediction pred;
  const auto& lv = tape.value(out.logits).data;
  const auto& pv = tape.value(out.probs).data;
  std::copy(lv.begin(), lv.end(), pred.logits.begin());
  std::copy(pv.begin(), pv.end(), pred.probs.begin());
  return pred;
}

std::vector<std::array<double, 3>> Encoder::probe_predict(std::span<const TokenId> tokens) const {
  Tape tape;
  auto b = bind(tape);
  auto out = forward(tape, b, tokens);
  Var layer = out.hidden[static_cast<std::size_t>(cfg_.intervention_layer - 1)];
  std::vector<std::array<double, 3>> res;
  for (int i = 0; i < cfg_.concepts; ++i) {
    Var logits = probe_logits(tape, b, i, tape.slice(layer, site_for(i, cfg_).range));
    const auto& v = tape.value(logits).data;
    res.push_back({v[0], v[1], v[2]});
  }
  return res;
}

void Encoder::accumulate_grads(const Tape& tape, const Bound& p, ParamSet& grads) const {
  for (std::size_t i = 0; i < p.vars.size(); ++i) {
    auto g = tape.grad_view(p.vars[i]);
    if (g.empty()) continue;
    auto& dst = grads[i].data;
    for (std::size_t j = 0; j < g.size(); ++j) dst[j] += g[j];
  }
}

}  // namespace cpm
