#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "flipguard/graph.hpp"

namespace flipguard::numerics {

/// Builds a scalar loss on `graph` from the parameter nodes it is handed.
using LossBuilder = std::function<NodeId(Graph& graph, const ParameterNodes& params)>;

enum class Stencil {
  kTwoPoint,   // (f(x+h) - f(x-h)) / 2h
  kFourPoint,  // (f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h
  // Two-point at h; an entry whose error exceeds the tolerance is re-estimated
  // with the four-point stencil at 10h and keeps the smaller of the two errors.
  kAdaptive,
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
  std::size_t entries_refined = 0;  // kAdaptive entries that needed the second stencil
};

/// Entries whose gradient is below the floor in magnitude are compared absolutely.
inline constexpr double kRelativeErrorFloor = 1e-6;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(kRelativeErrorFloor, std::abs(numeric));
}

/// Compares reverse-mode gradients against central differences over every
/// entry of every parameter.
///
/// The loss graph is built once; each probe rebinds a single parameter and
/// recomputes only the downstream nodes. Builders must therefore not make
/// structural decisions that depend on parameter values near the probe point.
inline GradCheckResult finite_difference_check(const LossBuilder& build, const ParameterMap& params, double h,
                                               Stencil stencil = Stencil::kTwoPoint, double tolerance = 1e-4) {
  if (!(h > 0.0)) throw Error("finite_difference_check: step must be positive");
  Graph graph;
  ParameterNodes nodes;
  for (const auto& [name, value] : params) nodes.emplace(name, graph.parameter(name, value));
  const NodeId loss = build(graph, nodes);
  if (!graph.evaluated()) graph.evaluate({});
  const auto analytic = graph.gradients(loss);

  GradCheckResult result;
  for (const auto& [name, original] : params) {
    Tensor probe = original;
    const Tensor& grad = analytic.at(name);
    for (std::size_t i = 0; i < probe.size(); ++i) {
      auto loss_at = [&](double offset) {
        probe[i] = original[i] + offset;
        graph.rebind(name, probe);
        const double v = graph.value(loss).item();
        if (!std::isfinite(v))
          throw Error("non-finite loss while probing " + name + "[" + std::to_string(i) + "]");
        return v;
      };
      auto two_point = [&](double step) { return (loss_at(step) - loss_at(-step)) / (2.0 * step); };
      auto four_point = [&](double step) {
        const double f2m = loss_at(-2.0 * step), f1m = loss_at(-step), f1p = loss_at(step), f2p = loss_at(2.0 * step);
        return (f2m - 8.0 * f1m + 8.0 * f1p - f2p) / (12.0 * step);
      };
      double numeric = stencil == Stencil::kFourPoint ? four_point(h) : two_point(h);
      double err = relative_error(grad[i], numeric);
      if (stencil == Stencil::kAdaptive && err > tolerance) {
        const double wide = four_point(10.0 * h);
        const double wide_err = relative_error(grad[i], wide);
        ++result.entries_refined;
        if (wide_err < err) {
          numeric = wide;
          err = wide_err;
        }
      }
      probe[i] = original[i];
      if (err > result.max_relative_error || result.entries_checked == 0) {
        result.max_relative_error = err;
        result.worst_parameter = name;
        result.worst_index = i;
        result.worst_analytic = grad[i];
        result.worst_numeric = numeric;
      }
      ++result.entries_checked;
    }
    graph.rebind(name, original);
  }
  return result;
}

}  // namespace flipguard::numerics
