#pragma once

// Shared helpers for the unit and acceptance suites: seeded random tensors and
// a central finite-difference gradient oracle that never touches the
// reverse-mode engine's backward rules.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "ldpet/autograd.hpp"
#include "ldpet/tensor.hpp"

namespace ldpet::testing {

template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                        double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = T(dist(rng));
  return Tensor<T>(shape, std::move(values));
}

/// Values bounded away from zero by `gap` (keeps finite differences off ReLU kinks).
inline Tensor64 random_away_from_zero(const Shape& shape, std::mt19937_64& rng, double gap) {
  std::uniform_real_distribution<double> dist(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = sign(rng) ? dist(rng) : -dist(rng);
  return Tensor64(shape, std::move(values));
}

inline bool close_rel(double a, double b, double rel, double abs_floor = 1e-12) {
  return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b)) + abs_floor;
}

using ScalarFn = std::function<Tensor64(const std::vector<Tensor64>&)>;

/// Central differences of f w.r.t. every element of every input.
inline std::vector<std::vector<double>> finite_difference(const ScalarFn& f,
                                                          const std::vector<Tensor64>& inputs,
                                                          double h = 1e-3) {
  NoGradGuard no_grad;
  std::vector<std::vector<double>> result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> grad(inputs[k].numel());
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      auto perturbed = inputs;
      perturbed[k] = inputs[k].clone();
      const double base = inputs[k][i];
      perturbed[k].mutable_data()[i] = base + h;
      const double up = f(perturbed).item();
      perturbed[k].mutable_data()[i] = base - h;
      const double down = f(perturbed).item();
      grad[i] = (up - down) / (2 * h);
    }
    result.push_back(std::move(grad));
  }
  return result;
}

/// Largest relative disagreement between reverse-mode and finite-difference gradients.
inline double gradient_check(const ScalarFn& f, std::vector<Tensor64> inputs, double h = 1e-3) {
  for (auto& in : inputs) in.set_requires_grad(true);
  auto fd = finite_difference(f, inputs, h);
  auto out = f(inputs);
  auto grads = gradients(out, inputs);
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    double scale = 1e-8;
    for (double v : fd[k]) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < fd[k].size(); ++i) {
      const double a = grads[k][i];
      const double b = fd[k][i];
      const double denom = std::max({std::abs(a), std::abs(b), 1e-3 * scale});
      worst = std::max(worst, std::abs(a - b) / denom);
    }
  }
  return worst;
}

}  // namespace ldpet::testing
