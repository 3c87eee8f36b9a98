// Shared helpers for the test suites: random tensors and a central
// finite-difference gradient oracle that never touches backward().
#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mrine/diffcore.hpp"

namespace mrine::testing {

inline ad::Tensor random_tensor(std::mt19937_64& rng, ad::Shape shape, double lo = -2.0, double hi = 2.0,
                                bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape.numel());
  for (auto& x : v) x = u(rng);
  return requires_grad ? ad::Tensor::parameter(std::move(shape), std::move(v))
                       : ad::Tensor::constant(std::move(shape), std::move(v));
}

// Central differences of a scalar function of the given leaves.
inline std::vector<std::vector<double>> finite_difference(const std::function<double()>& f,
                                                          std::vector<ad::Tensor>& leaves, double h = 1e-6) {
  std::vector<std::vector<double>> out;
  for (auto& leaf : leaves) {
    auto vals = leaf.mutable_values();
    std::vector<double> g(vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = f();
      vals[i] = orig - h;
      const double fm = f();
      vals[i] = orig;
      g[i] = (fp - fm) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// max |analytic - numeric| / max(|analytic|, |numeric|) per leaf, norm-wise (inf norm).
inline double relative_gradient_error(const std::function<ad::Tensor()>& build, std::vector<ad::Tensor>& leaves,
                                      double h = 1e-6) {
  for (auto& l : leaves) l.zero_grad();
  ad::backward(build());
  auto numeric = finite_difference([&] { return build().item(); }, leaves, h);
  double worst = 0.0;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const auto g = leaves[k].grad();
    double diff = 0.0, scale = 1e-8;
    for (std::size_t i = 0; i < numeric[k].size(); ++i) {
      const double a = g.empty() ? 0.0 : g[i];
      diff = std::max(diff, std::abs(a - numeric[k][i]));
      scale = std::max({scale, std::abs(a), std::abs(numeric[k][i])});
    }
    worst = std::max(worst, diff / scale);
  }
  return worst;
}

}  // namespace mrine::testing
