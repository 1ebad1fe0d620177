// Adam optimizer with bias correction.

#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ssr/autodiff.hpp"

namespace ssr {

template <class Scalar>
struct AdamState {
  double learning_rate = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step_count = 0;
  std::vector<Mat<Scalar>> m;
  std::vector<Mat<Scalar>> v;

  explicit AdamState(double lr = 4e-4) : learning_rate(lr) {}

  void reset() {
    step_count = 0;
    m.clear();
    v.clear();
  }
};

// One bias-corrected update of params in-place; moment arrays are created on
// first use and must stay aligned with the parameter list across calls.
template <class Scalar>
void adam_step(const std::vector<Mat<Scalar>*>& params, AdamState<Scalar>& state,
               const std::vector<Mat<Scalar>>& grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: params/grads size mismatch");
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.push_back(Mat<Scalar>::Zero(p->rows(), p->cols()));
      state.v.push_back(Mat<Scalar>::Zero(p->rows(), p->cols()));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state bound to a different parameter list");
  ++state.step_count;
  const Scalar b1 = static_cast<Scalar>(state.beta1);
  const Scalar b2 = static_cast<Scalar>(state.beta2);
  const Scalar corr1 = Scalar(1) - static_cast<Scalar>(std::pow(state.beta1, state.step_count));
  const Scalar corr2 = Scalar(1) - static_cast<Scalar>(std::pow(state.beta2, state.step_count));
  const Scalar lr = static_cast<Scalar>(state.learning_rate);
  const Scalar eps = static_cast<Scalar>(state.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat<Scalar>& p = *params[i];
    const Mat<Scalar>& g = grads[i];
    if (g.rows() != p.rows() || g.cols() != p.cols())
      throw std::invalid_argument("adam_step: grad " + std::to_string(i) + " shape mismatch");
    state.m[i] = b1 * state.m[i] + (Scalar(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (Scalar(1) - b2) * g.cwiseProduct(g);
    const Mat<Scalar> mhat = state.m[i] / corr1;
    const Mat<Scalar> vhat = state.v[i] / corr2;
    p.array() -= lr * mhat.array() / (vhat.array().sqrt() + eps);
  }
}

// Scales grads in place so their global L2 norm is at most max_norm.
template <class Scalar>
void clip_global_norm(std::vector<Mat<Scalar>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += static_cast<double>(g.squaredNorm());
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const Scalar f = static_cast<Scalar>(max_norm / norm);
    for (auto& g : grads) g *= f;
  }
}

}  // namespace ssr
