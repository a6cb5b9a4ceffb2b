// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "cpm/tensor.hpp"

namespace cpm {

/// Handle to a node recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
  friend bool operator==(Var, Var) = default;
};

/// Half-open index range [begin, end).
struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t width() const { return end - begin; }
  friend bool operator==(IndexRange, IndexRange) = default;
};

/// A layer index plus the slice of that layer's activation vector to keep.
/// Gradient components outside `keep` are zeroed when backward reaches the
/// layer node.
struct GradMask {
  int layer = 0;
  IndexRange keep;
};

/// A (layer, slice) location inside a network's hidden activations.
struct InterventionSite {
  int layer = 0;
  IndexRange range;
  friend bool operator==(const InterventionSite&, const InterventionSite&) = default;
};

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended in execution order, so the recording order is a
/// topological order. backward() walks it once in reverse. A tape belongs to
/// one thread; parameter leaves reference external tensors which must outlive
/// the tape and stay unmodified while it is alive.
class Tape {
 public:
  enum class Op : std::uint8_t {
    Leaf,
    Parameter,
    Embedding,
    MeanRows,
    MatVec,
    AddBias,
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    Dot,
    Relu,
    Softmax,
    LogSoftmax,
    Concat,
    Slice,
    SliceReplace,
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // Leaves.
  Var leaf(Tensor value);
  Var parameter(const Tensor& value);

  // Forward op suite. Shape mismatches throw ConfigError.
  Var embedding(Var table, std::span<const std::int32_t> ids);
  Var mean_rows(Var matrix);
  Var matvec(Var x, Var weight);  // x[n] . W[n, m] -> [m]
  Var add_bias(Var x, Var bias);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double factor);
  Var sum(Var a);
  Var dot(Var a, std::span<const double> weights);  // constant weights
  Var relu(Var a);
  Var softmax(Var a);
  Var log_softmax(Var a);
  Var concat(Var a, Var b);
  Var slice(Var a, IndexRange range);
  Var slice_replace(Var base, IndexRange range, Var src);

  /// Record `v` as the activation of hidden layer `layer`. When a layer is
  /// marked more than once (interchange runs), the latest mark wins.
  void mark_layer(int layer, Var v);
  std::optional<Var> layer_node(int layer) const;

  const Tensor& value(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  /// Reverse pass from a scalar node. Clears gradients from any previous
  /// backward on this tape first. Throws UsageError if `output` is not scalar.
  void backward(Var output);

  /// As backward(), but gradient flow through the node marked for
  /// mask.layer is restricted to mask.keep. Throws UsageError if the layer
  /// was never marked.
  void backward_masked(Var output, const GradMask& mask);

  /// Gradient of the last backward output with respect to `v`. Nodes not
  /// reached by the reverse pass report zeros.
  std::vector<double> grad(Var v) const;
  std::span<const double> grad_view(Var v) const;  // empty when unreached
  bool reached(Var v) const;

 private:
  struct Node {
    Op op = Op::Leaf;
    int a = -1;
    int b = -1;
    IndexRange range;
    double factor = 0.0;
    std::vector<std::int32_t> ids;
    std::vector<double> weights;
    Tensor value;
    const Tensor* external = nullptr;
    std::vector<double> grad;
  };

  Var push(Node node);
  const Tensor& val(int id) const;
  std::vector<double>& grad_of(int id);
  void check(Var v) const;
  void run_backward(Var output, const GradMask* mask);
  void backprop_node(int id);

  std::vector<Node> nodes_;
  std::map<int, int> layer_marks_;
};

/// Hook invoked by a model at each hidden-layer activation; returns the value
/// the model continues with.
using LayerHook = std::function<Var(Tape&, int layer, Var activation)>;

/// Runs `model` on `source`, captures the slice at `site`, then runs `model`
/// on `base` with that slice substituted. Both passes stay on `tape`.
/// `model(tape, input, hook)` must call the hook on every hidden layer and
/// return its output node. Throws ConfigError if the site's layer is never
/// visited or its range exceeds the layer width.
template <class Model, class Input>
Var interchange_forward(Tape& tape, Model&& model, const Input& base, const Input& source,
                        const InterventionSite& site);

}  // namespace cpm

#include "cpm/tape_inl.hpp"
