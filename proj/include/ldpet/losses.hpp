#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "ldpet/tensor.hpp"

namespace ldpet {

/// Weights of the adversarial objectives. lambda_m = infinity means MSE only,
/// lambda_m = 0 means adversarial only. lambda_m is calibrated to the
/// per-sample summed squared error on intensities normalised to [0, 1].
struct LossWeights {
  static constexpr double mse_only = std::numeric_limits<double>::infinity();

  double lambda_gp = 10.0;
  double lambda_m = 1e7;

  void validate() const;
};

/// Critic: [B, 1, D, H, W] -> [B, 1]
template <typename T>
using Critic = std::function<Tensor<T>(const Tensor<T>&)>;

/// Mean over the batch of the per-sample squared Frobenius distance.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& denoised, const Tensor<T>& target);

/// Per-sample eps * denoised + (1 - eps) * normal with the given eps (one per sample).
template <typename T>
Tensor<T> interpolate_samples(const Tensor<T>& denoised, const Tensor<T>& normal,
                              const std::vector<T>& eps);
/// Same, eps ~ U[0, 1] drawn per sample from `seed`.
template <typename T>
Tensor<T> interpolate_samples(const Tensor<T>& denoised, const Tensor<T>& normal,
                              std::uint64_t seed);
template <typename T>
std::vector<T> interpolation_weights(std::size_t batch, std::uint64_t seed);

/// lambda_gp * mean_b (||grad_v D(v)_b||_2 - 1)^2, differentiable w.r.t. the critic's parameters.
template <typename T>
Tensor<T> gradient_penalty(const Critic<T>& critic, const Tensor<T>& v_hat, double lambda_gp);

/// E[D(G(x))] - E[D(y)] + gradient penalty. `generator_output` is treated as a constant.
template <typename T>
Tensor<T> discriminator_loss(const Critic<T>& critic, const Tensor<T>& generator_output,
                             const Tensor<T>& normal, const LossWeights& weights,
                             std::uint64_t seed);

/// The Wasserstein part of discriminator_loss only: E[D(a)] - E[D(b)].
template <typename T>
Tensor<T> wasserstein_gap(const Critic<T>& critic, const Tensor<T>& a, const Tensor<T>& b);

/// -E[D(G(x))] + lambda_m * MSE.
template <typename T>
Tensor<T> generator_loss(const Critic<T>& critic, const Tensor<T>& generator_output,
                         const Tensor<T>& normal, const LossWeights& weights);

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  /// Dynamic range L. The loss uses 1 (normalised intensities).
  double data_range = 1.0;
};

/// Normalised 2D Gaussian window, row-major window x window.
std::vector<double> gaussian_window(std::size_t window, double sigma);

/// Mean over slices (and batch) of 1 - SSIM for [B, 1, D, H, W] volumes.
template <typename T>
Tensor<T> ssim_loss(const Tensor<T>& denoised, const Tensor<T>& target, const SsimOptions& options = {});

/// Fixed differentiable map from single-channel images [N, 1, H, W] to features.
template <typename T>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string id() const = 0;
  /// Inputs are normalised as (x - mean) / std before extraction.
  virtual double input_mean() const = 0;
  virtual double input_std() const = 0;
  virtual std::size_t min_extent() const = 0;
  virtual Tensor<T> extract(const Tensor<T>& images) const = 0;
};

template <typename T>
class IdentityExtractor final : public FeatureExtractor<T> {
 public:
  std::string id() const override { return "identity"; }
  double input_mean() const override { return 0.0; }
  double input_std() const override { return 1.0; }
  std::size_t min_extent() const override { return 1; }
  Tensor<T> extract(const Tensor<T>& images) const override { return images; }
};

/// Five seeded random 3x3 convolution layers (channels 8-8-16-16-32, strides
/// 1-2-1-2-1, ReLU between). Stand-in for pretrained VGG features.
template <typename T>
class RandomConvPyramid final : public FeatureExtractor<T> {
 public:
  explicit RandomConvPyramid(std::uint64_t seed = 19);
  std::string id() const override;
  double input_mean() const override { return 0.449; }
  double input_std() const override { return 0.226; }
  std::size_t min_extent() const override { return 8; }
  Tensor<T> extract(const Tensor<T>& images) const override;

 private:
  std::uint64_t seed_;
  std::vector<Tensor<T>> kernels_;
};

/// Mean over slices (and batch) of ||phi(a_i) - phi(b_i)||_F^2.
template <typename T>
Tensor<T> perceptual_loss(const Tensor<T>& denoised, const Tensor<T>& target,
                          const FeatureExtractor<T>& extractor);

}  // namespace ldpet
