#pragma once

#include <cstdint>
#include <vector>

#include "ldpet/autograd.hpp"
#include "ldpet/tensor.hpp"

namespace ldpet {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment accumulators, one per parameter, plus the step counter.
template <typename T>
struct AdamState {
  AdamHyper hyper;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;

  AdamState() = default;
  AdamState(const std::vector<Tensor<T>>& params, AdamHyper h);
};

/// One bias-corrected Adam update of every parameter, in place.
/// Throws if a parameter has no gradient entry or shapes disagree.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, const GradientMap<T>& grads, AdamState<T>& state);

}  // namespace ldpet
