// SPDX-License-Identifier: Apache-2.0
#include "cpm/tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cpm/error.hpp"

namespace cpm {

namespace {

void softmax_into(std::span<const double> x, std::span<double> out) {
  double mx = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    z += out[i];
  }
  for (double& v : out) v /= z;
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ConfigError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                    shape_string(b));
}

void require_vector(const char* op, const Tensor& t) {
  if (t.rank() != 1) throw ConfigError(std::string(op) + ": expected a vector, got " + shape_string(t.shape));
}

}  // namespace

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::check(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw UsageError("variable " + std::to_string(v.id) + " is not on this tape");
  }
}

const Tensor& Tape::val(int id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.value;
}

const Tensor& Tape::value(Var v) const {
  check(v);
  return val(v.id);
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::parameter(const Tensor& value) {
  Node n;
  n.op = Op::Parameter;
  n.external = &value;
  return push(std::move(n));
}

Var Tape::embedding(Var table, std::span<const std::int32_t> ids) {
  check(table);
  const Tensor& t = val(table.id);
  if (t.rank() != 2) throw ConfigError("embedding: table must be a matrix, got " + shape_string(t.shape));
  const std::size_t rows = t.shape[0], d = t.shape[1];
  Node n;
  n.op = Op::Embedding;
  n.a = table.id;
  n.ids.assign(ids.begin(), ids.end());
  n.value = Tensor::matrix(ids.size(), d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= rows) {
      throw InputError("token id " + std::to_string(ids[r]) + " outside vocabulary of size " +
                       std::to_string(rows));
    }
    auto src = t.row(static_cast<std::size_t>(ids[r]));
    std::copy(src.begin(), src.end(), n.value.row(r).begin());
  }
  return push(std::move(n));
}

Var Tape::mean_rows(Var matrix) {
  check(matrix);
  const Tensor& m = val(matrix.id);
  if (m.rank() != 2 || m.shape[0] == 0) {
    throw ConfigError("mean_rows: expected a non-empty matrix, got " + shape_string(m.shape));
  }
  const std::size_t rows = m.shape[0], cols = m.shape[1];
  Node n;
  n.op = Op::MeanRows;
  n.a = matrix.id;
  n.value = Tensor({cols});
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < cols; ++c) n.value[c] += row[c];
  }
  const double inv = 1.0 / static_cast<double>(rows);
  for (double& v : n.value.data) v *= inv;
  return push(std::move(n));
}

Var Tape::matvec(Var x, Var weight) {
  check(x);
  check(weight);
  const Tensor& xv = val(x.id);
  const Tensor& w = val(weight.id);
  if (xv.rank() != 1 || w.rank() != 2 || w.shape[0] != xv.shape[0]) shape_error("matvec", xv.shape, w.shape);
  const std::size_t in = w.shape[0], out = w.shape[1];
  Node n;
  n.op = Op::MatVec;
  n.a = x.id;
  n.b = weight.id;
  n.value = Tensor({out});
  double* y = n.value.data.data();
  for (std::size_t i = 0; i < in; ++i) {
    const double xi = xv[i];
    if (xi == 0.0) continue;
    const double* wr = w.data.data() + i * out;
    for (std::size_t j = 0; j < out; ++j) y[j] += xi * wr[j];
  }
  return push(std::move(n));
}

Var Tape::add_bias(Var x, Var bias) {
  check(x);
  check(bias);
  const Tensor& xv = val(x.id);
  const Tensor& bv = val(bias.id);
  if (bv.rank() != 1 || xv.size() % bv.size() != 0 || xv.shape.back() != bv.shape[0]) {
    shape_error("add_bias", xv.shape, bv.shape);
  }
  Node n;
  n.op = Op::AddBias;
  n.a = x.id;
  n.b = bias.id;
  n.value = xv;
  const std::size_t w = bv.size();
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] += bv[i % w];
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  check(a);
  check(b);
  const Tensor& av = val(a.id);
  const Tensor& bv = val(b.id);
  if (av.shape != bv.shape) shape_error("add", av.shape, bv.shape);
  Node n;
  n.op = Op::Add;
  n.a = a.id;
  n.b = b.id;
  n.value = av;
  for (std::size_t i = 0; i < av.size(); ++i) n.value[i] += bv[i];
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  check(a);
  check(b);
  const Tensor& av = val(a.id);
  const Tensor& bv = val(b.id);
  if (av.shape != bv.shape) shape_error("sub", av.shape, bv.shape);
  Node n;
  n.op = Op::Sub;
  n.a = a.id;
  n.b = b.id;
  n.value = av;
  for (std::size_t i = 0; i < av.size(); ++i) n.value[i] -= bv[i];
  return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
  check(a);
  check(b);
  const Tensor& av = val(a.id);
  const Tensor& bv = val(b.id);
  if (av.shape != bv.shape) shape_error("mul", av.shape, bv.shape);
  Node n;
  n.op = Op::Mul;
  n.a = a.id;
  n.b = b.id;
  n.value = av;
  for (std::size_t i = 0; i < av.size(); ++i) n.value[i] *= bv[i];
  return push(std::move(n));
}

Var Tape::scale(Var a, double factor) {
  check(a);
  Node n;
  n.op = Op::Scale;
  n.a = a.id;
  n.factor = factor;
  n.value = val(a.id);
  for (double& v : n.value.data) v *= factor;
  return push(std::move(n));
}

Var Tape::sum(Var a) {
  check(a);
  double s = 0.0;
  for (double v : val(a.id).data) s += v;
  Node n;
  n.op = Op::Sum;
  n.a = a.id;
  n.value = Tensor({1}, {s});
  return push(std::move(n));
}

Var Tape::dot(Var a, std::span<const double> weights) {
  check(a);
  const Tensor& av = val(a.id);
  if (av.size() != weights.size()) shape_error("dot", av.shape, Shape{weights.size()});
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * weights[i];
  Node n;
  n.op = Op::Dot;
  n.a = a.id;
  n.weights.assign(weights.begin(), weights.end());
  n.value = Tensor({1}, {s});
  return push(std::move(n));
}

Var Tape::relu(Var a) {
  check(a);
  Node n;
  n.op = Op::Relu;
  n.a = a.id;
  n.value = val(a.id);
  for (double& v : n.value.data) v = v > 0.0 ? v : 0.0;
  return push(std::move(n));
}

Var Tape::softmax(Var a) {
  check(a);
  const Tensor& av = val(a.id);
  require_vector("softmax", av);
  Node n;
  n.op = Op::Softmax;
  n.a = a.id;
  n.value = Tensor(av.shape);
  softmax_into(av.data, n.value.data);
  return push(std::move(n));
}

Var Tape::log_softmax(Var a) {
  check(a);
  const Tensor& av = val(a.id);
  require_vector("log_softmax", av);
  double mx = *std::max_element(av.data.begin(), av.data.end());
  double z = 0.0;
  for (double v : av.data) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  Node n;
  n.op = Op::LogSoftmax;
  n.a = a.id;
  n.value = av;
  for (double& v : n.value.data) v -= lse;
  return push(std::move(n));
}

Var Tape::concat(Var a, Var b) {
  check(a);
  check(b);
  const Tensor& av = val(a.id);
  const Tensor& bv = val(b.id);
  if (av.rank() != 1 || bv.rank() != 1) shape_error("concat", av.shape, bv.shape);
  Node n;
  n.op = Op::Concat;
  n.a = a.id;
  n.b = b.id;
  n.value = Tensor({av.size() + bv.size()});
  std::copy(av.data.begin(), av.data.end(), n.value.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), n.value.data.begin() + static_cast<long>(av.size()));
  return push(std::move(n));
}

Var Tape::slice(Var a, IndexRange range) {
  check(a);
  const Tensor& av = val(a.id);
  require_vector("slice", av);
  if (range.begin > range.end || range.end > av.size()) {
    throw ConfigError("slice: range [" + std::to_string(range.begin) + ", " + std::to_string(range.end) +
                      ") outside " + shape_string(av.shape));
  }
  Node n;
  n.op = Op::Slice;
  n.a = a.id;
  n.range = range;
  n.value = Tensor({range.width()});
  std::copy(av.data.begin() + static_cast<long>(range.begin), av.data.begin() + static_cast<long>(range.end),
            n.value.data.begin());
  return push(std::move(n));
}

Var Tape::slice_replace(Var base, IndexRange range, Var src) {
  check(base);
  check(src);
  const Tensor& bv = val(base.id);
  const Tensor& sv = val(src.id);
  require_vector("slice_replace", bv);
  if (range.begin > range.end || range.end > bv.size() || sv.size() != range.width()) {
    throw ConfigError("slice_replace: range [" + std::to_string(range.begin) + ", " +
                      std::to_string(range.end) + ") of " + shape_string(bv.shape) +
                      " cannot take source " + shape_string(sv.shape));
  }
  Node n;
  n.op = Op::SliceReplace;
  n.a = base.id;
  n.b = src.id;
  n.range = range;
  n.value = bv;
  std::copy(sv.data.begin(), sv.data.end(), n.value.data.begin() + static_cast<long>(range.begin));
  return push(std::move(n));
}

void Tape::mark_layer(int layer, Var v) {
  check(v);
  layer_marks_[layer] = v.id;
}

std::optional<Var> Tape::layer_node(int layer) const {
  auto it = layer_marks_.find(layer);
  if (it == layer_marks_.end()) return std::nullopt;
  return Var{it->second};
}

std::vector<double>& Tape::grad_of(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(val(id).size(), 0.0);
  return n.grad;
}

void Tape::backward(Var output) { run_backward(output, nullptr); }

void Tape::backward_masked(Var output, const GradMask& mask) {
  auto node = layer_node(mask.layer);
  if (!node) {
    throw UsageError("gradient mask layer " + std::to_string(mask.layer) + " is not on the recorded path");
  }
  const std::size_t width = val(node->id).size();
  if (mask.keep.begin > mask.keep.end || mask.keep.end > width) {
    throw UsageError("gradient mask range exceeds layer width " + std::to_string(width));
  }
  run_backward(output, &mask);
}

void Tape::run_backward(Var output, const GradMask* mask) {
  check(output);
  if (!val(output.id).is_scalar()) {
    throw UsageError("backward requires a scalar output, got " + shape_string(val(output.id).shape));
  }
  for (Node& n : nodes_) n.grad.clear();
  int masked = -1;
  if (mask) masked = layer_node(mask->layer)->id;
  grad_of(output.id)[0] = 1.0;
  for (int id = output.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) continue;
    if (id == masked) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        if (i < mask->keep.begin || i >= mask->keep.end) n.grad[i] = 0.0;
      }
    }
    backprop_node(id);
  }
}

void Tape::backprop_node(int id) {
  // nodes_ does not grow during backward, so `g` stays valid.
  const Op op = nodes_[id].op;
  if (op == Op::Leaf || op == Op::Parameter) return;
  const int a = nodes_[id].a;
  const int b = nodes_[id].b;
  const std::vector<double>& g = nodes_[id].grad;

  switch (op) {
    case Op::Embedding: {
      auto& ga = grad_of(a);
      const std::size_t d = val(a).shape[1];
      const auto& ids = nodes_[id].ids;
      for (std::size_t r = 0; r < ids.size(); ++r) {
        double* dst = ga.data() + static_cast<std::size_t>(ids[r]) * d;
        const double* src = g.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
      break;
    }
    case Op::MeanRows: {
      auto& ga = grad_of(a);
      const std::size_t rows = val(a).shape[0], cols = val(a).shape[1];
      const double inv = 1.0 / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[c] * inv;
      }
      break;
    }
    case Op::MatVec: {
      const Tensor& xv = val(a);
      const Tensor& w = val(b);
      const std::size_t in = w.shape[0], out = w.shape[1];
      auto& gx = grad_of(a);
      auto& gw = grad_of(b);
      for (std::size_t i = 0; i < in; ++i) {
        const double* wr = w.data.data() + i * out;
        double* gwr = gw.data() + i * out;
        const double xi = xv[i];
        double acc = 0.0;
        for (std::size_t j = 0; j < out; ++j) {
          acc += wr[j] * g[j];
          gwr[j] += xi * g[j];
        }
        gx[i] += acc;
      }
      break;
    }
    case Op::AddBias: {
      auto& ga = grad_of(a);
      auto& gb = grad_of(b);
      const std::size_t w = gb.size();
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
        gb[i % w] += g[i];
      }
      break;
    }
    case Op::Add: {
      auto& ga = grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      auto& gb = grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      break;
    }
    case Op::Sub: {
      auto& ga = grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      auto& gb = grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      break;
    }
    case Op::Mul: {
      const Tensor& av = val(a);
      const Tensor& bv = val(b);
      auto& ga = grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      auto& gb = grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      break;
    }
    case Op::Scale: {
      auto& ga = grad_of(a);
      const double f = nodes_[id].factor;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * f;
      break;
    }
    case Op::Sum: {
      auto& ga = grad_of(a);
      for (double& v : ga) v += g[0];
      break;
    }
    case Op::Dot: {
      auto& ga = grad_of(a);
      const auto& w = nodes_[id].weights;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * w[i];
      break;
    }
    case Op::Relu: {
      const Tensor& av = val(a);
      auto& ga = grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (av[i] > 0.0) ga[i] += g[i];
      }
      break;
    }
    case Op::Softmax: {
      const Tensor& y = nodes_[id].value;
      double s = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * y[i];
      auto& ga = grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += y[i] * (g[i] - s);
      break;
    }
    case Op::LogSoftmax: {
      const Tensor& y = nodes_[id].value;
      double s = 0.0;
      for (double v : g) s += v;
      auto& ga = grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] - std::exp(y[i]) * s;
      break;
    }
    case Op::Concat: {
      const std::size_t na = val(a).size();
      auto& ga = grad_of(a);
      for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
      auto& gb = grad_of(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
      break;
    }
    case Op::Slice: {
      auto& ga = grad_of(a);
      const IndexRange r = nodes_[id].range;
      for (std::size_t i = 0; i < r.width(); ++i) ga[r.begin + i] += g[i];
      break;
    }
    case Op::SliceReplace: {
      const IndexRange r = nodes_[id].range;
      auto& ga = grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (i < r.begin || i >= r.end) ga[i] += g[i];
      }
      if (r.width() > 0) {
        auto& gb = grad_of(b);
        for (std::size_t i = 0; i < r.width(); ++i) gb[i] += g[r.begin + i];
      }
      break;
    }
    case Op::Leaf:
    case Op::Parameter:
      break;
  }
}

std::vector<double> Tape::grad(Var v) const {
  check(v);
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return std::vector<double>(val(v.id).size(), 0.0);
  return n.grad;
}

std::span<const double> Tape::grad_view(Var v) const {
  check(v);
  return nodes_[v.id].grad;
}

bool Tape::reached(Var v) const {
  check(v);
  return !nodes_[v.id].grad.empty();
}

}  // namespace cpm
