#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "umr/autograd.hpp"

namespace umr {

/// Central-difference estimate of df/dx, one coordinate at a time.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  if (!(h > 0.0)) throw ContractError("finite_diff_grad: step must be positive");
  std::vector<double> base = x.values();
  std::vector<double> out(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    const double orig = base[i];
    base[i] = orig + h;
    const double fp = f(Tensor(x.shape(), base));
    base[i] = orig - h;
    const double fm = f(Tensor(x.shape(), base));
    base[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericDomainError("finite_diff_grad: non-finite evaluation at coordinate " + std::to_string(i));
    }
    out[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(out));
}

/// Largest elementwise relative error |a-b| / max(|a|,|b|); coordinates where
/// both magnitudes are below `floor` are skipped.
inline double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_relative_error: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double m = std::max(std::abs(a[i]), std::abs(b[i]));
    if (m < floor) continue;
    worst = std::max(worst, std::abs(a[i] - b[i]) / m);
  }
  return worst;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// A scalar objective built on a fresh graph from leaf inputs.
using GraphObjective = std::function<Var(Graph&, const std::vector<Var>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<double> per_input;
};

/// Compares backward() against finite differences for every input tensor.
inline GradCheckResult check_gradients(const GraphObjective& objective, const std::vector<Tensor>& inputs,
                                       double h = 1e-5) {
  Graph g;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(g.leaf(t, true));
  const Var root = objective(g, leaves);
  g.backward(root);

  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](const Tensor& probe) {
      Graph pg;
      std::vector<Var> pl;
      for (std::size_t j = 0; j < inputs.size(); ++j) pl.push_back(pg.leaf(j == k ? probe : inputs[j]));
      return objective(pg, pl).value().item();
    };
    const double err = max_relative_error(g.grad(leaves[k]), finite_diff_grad(f, inputs[k], h));
    res.per_input.push_back(err);
    res.max_rel_error = std::max(res.max_rel_error, err);
  }
  return res;
}

}  // namespace umr
