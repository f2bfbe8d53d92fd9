#include "ldpet/adam.hpp"

#include <cmath>
#include <string>

namespace ldpet {

template <typename T>
AdamState<T>::AdamState(const std::vector<Tensor<T>>& params, AdamHyper h) : hyper(h) {
  first_moment.reserve(params.size());
  second_moment.reserve(params.size());
  for (const auto& p : params) {
    first_moment.emplace_back(p.numel(), T(0));
    second_moment.emplace_back(p.numel(), T(0));
  }
}

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, const GradientMap<T>& grads, AdamState<T>& state) {
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks " +
                     std::to_string(state.first_moment.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads.contains(params[i])) {
      throw ShapeError("adam_step: missing gradient for parameter " + std::to_string(i));
    }
    if (grads.at(params[i]).shape() != params[i].shape() ||
        state.first_moment[i].size() != params[i].numel()) {
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(i));
    }
  }

  state.step += 1;
  const auto& h = state.hyper;
  const double t = double(state.step);
  const double correction1 = 1.0 - std::pow(h.beta1, t);
  const double correction2 = 1.0 - std::pow(h.beta2, t);
  const T beta1 = T(h.beta1), beta2 = T(h.beta2);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto g = grads.at(params[i]).data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = beta1 * m[j] + (T(1) - beta1) * g[j];
      v[j] = beta2 * v[j] + (T(1) - beta2) * g[j] * g[j];
      const double m_hat = double(m[j]) / correction1;
      const double v_hat = double(v[j]) / correction2;
      p[j] = T(double(p[j]) - h.lr * m_hat / (std::sqrt(v_hat) + h.eps));
    }
  }
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(std::vector<Tensor<float>>&, const GradientMap<float>&, AdamState<float>&);
template void adam_step(std::vector<Tensor<double>>&, const GradientMap<double>&,
                        AdamState<double>&);

}  // namespace ldpet
