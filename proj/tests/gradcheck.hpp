#pragma once

// Central finite-difference gradient checking for scalar functions of Vars.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "fmrnet/autograd.hpp"

namespace fmrnet::testing {

using ScalarFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

struct GradCheckResult {
  double relative_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double analytic_norm = 0.0;
};

inline GradCheckResult gradcheck(const ScalarFn& f, const std::vector<Tensor<double>>& inputs, double h = 1e-5) {
  std::vector<Var<double>> leaves;
  for (const auto& t : inputs) leaves.push_back(Var<double>::leaf(t));
  auto out = f(leaves);
  out.backward();
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor<double> analytic = leaves[k].has_grad() ? leaves[k].grad() : Tensor<double>(inputs[k].shape());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Var<double>> c;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Tensor<double> t = inputs[j];
          if (j == k) t[i] += delta;
          c.push_back(Var<double>::constant(std::move(t)));
        }
        return f(c).item();
      };
      const double numeric = (eval(h) - eval(-h)) / (2.0 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
  }
  const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
  return {std::sqrt(diff2) / denom, std::sqrt(a2)};
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Fixed random projection so vector-valued ops can be checked as scalars.
inline Var<double> project(const Var<double>& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return ops::sum(ops::mul(y, Var<double>::constant(random_tensor(y.shape(), rng))));
}

}  // namespace fmrnet::testing
