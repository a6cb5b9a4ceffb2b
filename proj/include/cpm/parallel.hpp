// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <exception>
#include <optional>
#include <vector>

#include "cpm/params.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cpm {

/// Execution policy for the data-parallel kernels. Both policies produce
/// bitwise-identical results: parallel work lands in per-item buffers that
/// are reduced in item order.
enum class Exec { Serial, Parallel };

int max_threads();

namespace detail {
inline void rethrow_first(std::vector<std::exception_ptr>& errors) {
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}
}  // namespace detail

/// Sums per-item gradients into `grads` (which must be zeroed by the caller)
/// and returns the summed item losses. `item(i, g)` adds item i's gradient to
/// `g` and returns its loss.
template <class ItemFn>
double accumulate_gradients(Exec exec, std::size_t n, ParamSet& grads, ItemFn&& item) {
  if (exec == Exec::Serial || n < 2) {
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) loss += item(i, grads);
    return loss;
  }
  std::vector<ParamSet> local(n, grads.zeros_like());
  std::vector<double> losses(n, 0.0);
  std::vector<std::exception_ptr> errors(n);
  const auto count = static_cast<long>(n);
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < count; ++i) {
    try {
      losses[i] = item(static_cast<std::size_t>(i), local[i]);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  detail::rethrow_first(errors);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    loss += losses[i];
    grads.add_scaled(local[i], 1.0);
  }
  return loss;
}

/// out[i] = fn(i). Exceptions propagate (the lowest failing index wins).
template <class T, class Fn>
std::vector<T> map_indexed(Exec exec, std::size_t n, Fn&& fn) {
  std::vector<std::optional<T>> slots(n);
  if (exec == Exec::Serial) {
    for (std::size_t i = 0; i < n; ++i) slots[i].emplace(fn(i));
  } else {
    std::vector<std::exception_ptr> errors(n);
    const auto count = static_cast<long>(n);
#pragma omp parallel for schedule(dynamic, 8)
    for (long i = 0; i < count; ++i) {
      try {
        slots[i].emplace(fn(static_cast<std::size_t>(i)));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
    detail::rethrow_first(errors);
  }
  std::vector<T> out;
  out.reserve(n);
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

}  // namespace cpm
