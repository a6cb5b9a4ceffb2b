// SPDX-License-Identifier: Apache-2.0
#include "cpm/params.hpp"

#include <cmath>

#include "cpm/error.hpp"

namespace cpm {

std::size_t ParamSet::add(std::string name, Tensor value) {
  if (find(name)) throw ConfigError("duplicate parameter '" + name + "'");
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
  return tensors_.size() - 1;
}

std::optional<std::size_t> ParamSet::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  return std::nullopt;
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto i = find(name);
  if (!i) throw SchemaError("missing parameter '" + name + "'");
  return tensors_[*i];
}

Tensor& ParamSet::at(const std::string& name) {
  auto i = find(name);
  if (!i) throw SchemaError("missing parameter '" + name + "'");
  return tensors_[*i];
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  out.names_ = names_;
  out.tensors_.reserve(tensors_.size());
  for (const auto& t : tensors_) out.tensors_.emplace_back(t.shape);
  return out;
}

void ParamSet::fill(double v) {
  for (auto& t : tensors_) std::fill(t.data.begin(), t.data.end(), v);
}

void ParamSet::add_scaled(const ParamSet& other, double factor) {
  if (!same_layout(other)) throw UsageError("add_scaled: parameter layouts differ");
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    auto& dst = tensors_[i].data;
    const auto& src = other.tensors_[i].data;
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += factor * src[j];
  }
}

std::size_t ParamSet::value_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    if (tensors_[i].shape != other.tensors_[i].shape) return false;
  }
  return true;
}

Adam::Adam(const ParamSet& layout, AdamConfig cfg)
    : cfg_(cfg), m_(layout.zeros_like()), v_(layout.zeros_like()), frozen_(layout.size(), false) {}

void Adam::freeze(std::size_t index) { frozen_.at(index) = true; }

void Adam::step(ParamSet& params, const ParamSet& grads, double learning_rate) {
  if (!params.same_layout(grads) || !params.same_layout(m_)) {
    throw UsageError("Adam::step: parameter layouts differ");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (frozen_[p]) continue;
    auto& w = params[p].data;
    const auto& g = grads[p].data;
    auto& m = m_[p].data;
    auto& v = v_[p].data;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      w[i] -= learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.epsilon);
    }
  }
}

}  // namespace cpm
