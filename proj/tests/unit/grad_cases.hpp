#pragma once

// One small randomized scenario per differentiable op, for finite-difference
// checks in the unit and acceptance suites.

#include <random>
#include <vector>

#include "ldpet/ops.hpp"
#include "test_support.hpp"

namespace ldpet::testing {

struct GradCase {
  const char* name;
  std::vector<Shape> shapes;
  ScalarFn f;
};

inline std::vector<GradCase> gradient_cases() {
  return {
      {"add/mul/sub", {{4}, {4}}, [](auto& v) { return sum(mul(add(v[0], v[1]), sub(v[0], v[1]))); }},
      {"div", {{3}, {3}}, [](auto& v) { return sum(div(v[0], add_scalar(square(v[1]), 1.0))); }},
      {"scale/square", {{5}}, [](auto& v) { return mean(square(scale(v[0], 1.7))); }},
      {"relu", {{5}}, [](auto& v) { return sum(mul(relu(v[0]), v[0])); }},
      {"leaky_relu", {{4}}, [](auto& v) { return sum(square(leaky_relu(v[0], 0.2))); }},
      {"per-sample", {{2, 3}, {2}}, [](auto& v) {
         return sum(square(mul_per_sample(v[0], v[1])));
       }},
      {"norm", {{2, 3}}, [](auto& v) { return sum(square(add_scalar(norm_per_sample(v[0]), -1.0))); }},
      {"expand", {{3, 2}}, [](auto& v) {
         return sum(mul(expand_per_sample(sum_per_sample(v[0]), Shape{3, 2}), v[0]));
       }},
      {"matmul", {{2, 3}, {4, 3}}, [](auto& v) { return sum(square(matmul(v[0], v[1], false, true))); }},
      {"matmul-tt", {{3, 2}, {4, 3}}, [](auto& v) { return sum(square(matmul(v[0], v[1], true, true))); }},
      {"dense", {{2, 3}, {2, 3}, {2}}, [](auto& v) {
         return sum(square(dense_forward(v[0], v[1], v[2])));
       }},
      {"conv2d", {{1, 2, 5, 4}, {2, 2, 3, 3}, {2}}, [](auto& v) {
         return sum(square(conv_forward(v[0], v[1], v[2], 1, Padding::none)));
       }},
      {"conv3d-s2", {{1, 1, 3, 4, 5}, {2, 1, 3, 3, 3}, {2}}, [](auto& v) {
         return sum(square(conv_forward(v[0], v[1], v[2], 2, Padding::zero)));
       }},
      {"deconv2d", {{1, 2, 3, 3}, {2, 1, 3, 3}, {1}}, [](auto& v) {
         return sum(square(deconv_forward(v[0], v[1], v[2], 1, Padding::none)));
       }},
      {"deconv3d", {{1, 2, 2, 3, 3}, {2, 2, 3, 3, 3}, {2}}, [](auto& v) {
         return sum(square(deconv_forward(v[0], v[1], v[2], 1, Padding::zero)));
       }},
      {"weight-grad", {{1, 2, 4, 4}, {1, 1, 2, 2}}, [](auto& v) {
         return sum(square(conv_weight_grad(v[0], v[1], ConvSpec{}, {3, 3})));
       }},
      {"depth", {{1, 2, 3, 2, 2}}, [](auto& v) {
         std::vector<Tensor64> s;
         for (std::size_t z = 0; z < 3; ++z) s.push_back(scale(slice_depth(v[0], z), double(z + 1)));
         return sum(square(stack_depth(s)));
       }},
      {"reshape/bias", {{2, 3, 2, 2}, {3}}, [](auto& v) {
         return sum(square(reshape(add_channel_bias(v[0], v[1]), Shape{2, 12})));
       }},
      {"sum_rows/channels", {{3, 4}}, [](auto& v) {
         return sum(square(sum_rows(v[0])));
       }},
  };
}

// Tiny nonlinear critic: score_b = w2 * sum(leaky(w1 * x_b + b1)) with
// scalar-ish parameters broadcast through ops.
struct TinyCritic {
  Tensor64 w1, w2;
  Tensor64 operator()(const Tensor64& v) const {
    const auto flat = reshape(v, Shape{v.dim(0), v.numel() / v.dim(0)});
    const auto h = leaky_relu(matmul(flat, w1, false, true), 0.2);  // [B, 3]
    return matmul(square(h), w2, false, true);                       // [B, 1]
  }
};

/// Runs `trials` cases round-robin with inputs drawn from `rng`; returns the
/// worst relative error and reports each case's error to `each`.
template <typename Each>
double run_gradient_trials(int trials, std::mt19937_64& rng, Each&& each) {
  const auto cases = gradient_cases();
  double worst = 0;
  for (int t = 0; t < trials; ++t) {
    const auto& c = cases[std::size_t(t) % cases.size()];
    std::vector<Tensor64> inputs;
    for (const auto& s : c.shapes) inputs.push_back(random_away_from_zero(s, rng, 0.05));
    const double err = gradient_check(c.f, inputs);
    each(c.name, err);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace ldpet::testing
