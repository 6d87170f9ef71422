// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>

#include "mixcpt/error.hpp"
#include "mixcpt/graph.hpp"
#include "mixcpt/tensor.hpp"

namespace mixcpt {

struct GradCheckReport {
  std::string op;
  double max_relative_error = 0.0;
  std::size_t worst_coordinate = 0;
  double epsilon = 0.0;
};

/// Builds a scalar from one input node. Gradient checks run in double.
using ScalarFunction = std::function<Var<double>(Graph<double>&, Var<double>)>;

/// Compares reverse-mode gradients of `fn` at `input` against central
/// differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps), coordinate by
/// coordinate. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
/// denominator.
inline GradCheckReport grad_check(std::string name, const ScalarFunction& fn, const Tensor<double>& input,
                                  double epsilon) {
  if (!(epsilon > 0.0)) throw ParameterError("grad_check: epsilon must be > 0, got " + std::to_string(epsilon));

  Graph<double> g;
  auto x = g.leaf(input, true);
  auto y = fn(g, x);
  g.backward(y);
  std::vector<double> analytic(input.size(), 0.0);
  if (x.value().has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

  auto eval = [&fn](const Tensor<double>& at) {
    Graph<double> h;
    auto leaf = h.leaf(at, false);
    return fn(h, leaf).value().item();
  };

  GradCheckReport report{std::move(name), 0.0, 0, epsilon};
  Tensor<double> probe = input;
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + epsilon;
    const double fp = eval(probe);
    probe[i] = orig - epsilon;
    const double fm = eval(probe);
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * epsilon);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (rel > report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_coordinate = i;
    }
  }
  return report;
}

}  // namespace mixcpt
