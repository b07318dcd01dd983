#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "edgs/graph.hpp"

namespace edgs::ad {

/// Builds a scalar objective on a fresh graph from one leaf per parameter
/// group. Called repeatedly by finite_diff_check with perturbed inputs.
using ScalarFn = std::function<Value(Graph&, const std::vector<Value>&)>;

struct GradCheckOptions {
  double step = 1e-5;
  /// If nonzero, at most this many coordinates per parameter group are
  /// probed (sampled without replacement, seeded). 0 probes every coordinate.
  std::size_t max_coords_per_group = 0;
  std::uint64_t seed = 12345;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_group = 0;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Central-difference check of reverse-mode gradients. For each probed
/// coordinate compares d(f)/dx against (f(x+h) - f(x-h)) / 2h; the reported
/// relative error divides by max(1, |analytic|, |numeric|).
inline GradCheckResult finite_diff_check(const ScalarFn& f, std::vector<Tensor> params,
                                         const GradCheckOptions& opt = {}) {
  auto eval = [&](const std::vector<Tensor>& p) {
    Graph g;
    std::vector<Value> leaves;
    leaves.reserve(p.size());
    for (const Tensor& t : p) leaves.push_back(g.leaf(t));
    return f(g, leaves).data()[0];
  };

  // One reverse pass for the analytic gradients.
  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Value> leaves;
    leaves.reserve(params.size());
    for (const Tensor& t : params) leaves.push_back(g.leaf(t));
    Value root = f(g, leaves);
    g.backward(root);
    for (const Value& v : leaves) analytic.push_back(v.grad());
  }

  std::mt19937_64 rng(opt.seed);
  GradCheckResult res;
  for (std::size_t gi = 0; gi < params.size(); ++gi) {
    const std::size_t n = params[gi].numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords_per_group != 0 && n > opt.max_coords_per_group) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords_per_group);
    }
    for (std::size_t c : coords) {
      const double saved = params[gi][c];
      params[gi][c] = saved + opt.step;
      const double fp = eval(params);
      params[gi][c] = saved - opt.step;
      const double fm = eval(params);
      params[gi][c] = saved;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double a = analytic[gi][c];
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({1.0, std::abs(a), std::abs(numeric)});
      res.coords_checked++;
      res.max_abs_err = std::max(res.max_abs_err, abs_err);
      if (rel_err > res.max_rel_err) {
        res.max_rel_err = rel_err;
        res.worst_group = gi;
        res.worst_coord = c;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace edgs::ad
