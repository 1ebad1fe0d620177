// Central finite-difference verification of tape gradients.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ssr/autodiff.hpp"

namespace ssr {

// builder: (Tape&, leaf vars aligned with inputs) -> scalar Var
using MultiBuilder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Compares analytic gradients of a scalar function against central
// differences (f(x+eps e_i) - f(x-eps e_i)) / (2 eps), elementwise over every
// input; returns the max relative error with denominator
// max(|analytic|, |numeric|, 1e-8).
inline double finite_diff_check_multi(const MultiBuilder& f, std::vector<Mat<double>> inputs,
                                      double eps = 1e-4) {
  std::vector<Mat<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(inputs.size());
    for (const auto& x : inputs) vars.push_back(tape.leaf(x, true));
    Var<double> loss = f(tape, vars);
    tape.backward(loss);
    for (const auto& v : vars)
      analytic.push_back(v.grad().size() ? v.grad() : Mat<double>::Zero(v.rows(), v.cols()));
  }
  auto eval = [&](const std::vector<Mat<double>>& xs) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(xs.size());
    for (const auto& x : xs) vars.push_back(tape.leaf(x, true));
    return f(tape, vars).item();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k](i);
      inputs[k](i) = saved + eps;
      const double fp = eval(inputs);
      inputs[k](i) = saved - eps;
      const double fm = eval(inputs);
      inputs[k](i) = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[k](i);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

// Single-input convenience form.
template <class F>
double finite_diff_check(F&& f, const Mat<double>& x, double eps = 1e-4) {
  return finite_diff_check_multi(
      [&f](Tape<double>& t, const std::vector<Var<double>>& vs) { return f(t, vs[0]); }, {x}, eps);
}

}  // namespace ssr
