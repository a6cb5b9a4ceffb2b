// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "cpm/error.hpp"

namespace cpm {

namespace detail {
inline void check_site_width(const Tape& tape, Var act, const InterventionSite& site) {
  auto width = tape.value(act).size();
  if (site.range.begin > site.range.end || site.range.end > width) {
    throw ConfigError("intervention site [" + std::to_string(site.range.begin) + ", " +
                      std::to_string(site.range.end) + ") exceeds layer " +
                      std::to_string(site.layer) + " width " + std::to_string(width));
  }
}
}  // namespace detail

template <class Model, class Input>
Var interchange_forward(Tape& tape, Model&& model, const Input& base, const Input& source,
                        const InterventionSite& site) {
  Var captured;
  LayerHook capture = [&](Tape& t, int layer, Var act) {
    if (layer == site.layer) {
      detail::check_site_width(t, act, site);
      captured = t.slice(act, site.range);
    }
    return act;
  };
  model(tape, source, capture);
  if (!captured.valid()) {
    throw ConfigError("intervention layer " + std::to_string(site.layer) +
                      " is not on the model's forward path");
  }
  LayerHook replace = [&](Tape& t, int layer, Var act) {
    if (layer != site.layer) return act;
    return t.slice_replace(act, site.range, captured);
  };
  return model(tape, base, replace);
}

}  // namespace cpm
