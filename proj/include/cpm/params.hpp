// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "cpm/tensor.hpp"

namespace cpm {

/// Ordered collection of named tensors. Used for model parameters, their
/// gradients and optimizer moments (all sharing one layout).
class ParamSet {
 public:
  std::size_t add(std::string name, Tensor value);

  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor& operator[](std::size_t i) const { return tensors_[i]; }

  std::optional<std::size_t> find(const std::string& name) const;
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);

  /// Same names and shapes, all zeros.
  ParamSet zeros_like() const;
  void fill(double v);
  /// this += factor * other (same layout required).
  void add_scaled(const ParamSet& other, double factor);
  std::size_t value_count() const;
  bool same_layout(const ParamSet& other) const;

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction. Parameters listed in `frozen` are never updated.
class Adam {
 public:
  Adam(const ParamSet& layout, AdamConfig cfg = {});
  void step(ParamSet& params, const ParamSet& grads, double learning_rate);
  void freeze(std::size_t index);
  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  ParamSet m_;
  ParamSet v_;
  std::vector<bool> frozen_;
  long t_ = 0;
};

}  // namespace cpm
