#include "ldpet/losses.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "ldpet/autograd.hpp"
#include "ldpet/ops.hpp"
#include "ldpet/random.hpp"

namespace ldpet {

void LossWeights::validate() const {
  if (!(lambda_gp >= 0) || !std::isfinite(lambda_gp)) {
    throw std::invalid_argument("lambda_gp must be finite and >= 0");
  }
  if (!(lambda_m >= 0)) throw std::invalid_argument("lambda_m must be >= 0 (or inf for MSE only)");
}

namespace {

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// View a [B, 1, D, H, W] volume batch as B*D single-channel images.
template <typename T>
Tensor<T> as_slices(const Tensor<T>& v, const char* what) {
  if (v.rank() != 5 || v.dim(1) != 1) {
    throw ShapeError(std::string(what) + ": expected [B, 1, D, H, W], got " + shape_str(v.shape()));
  }
  return reshape(v, Shape{v.dim(0) * v.dim(2), 1, v.dim(3), v.dim(4)});
}

}  // namespace

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& denoised, const Tensor<T>& target) {
  require_same(denoised, target, "mse_loss");
  return scale(sum(square(sub(denoised, target))), T(1) / T(denoised.dim(0)));
}

template <typename T>
std::vector<T> interpolation_weights(std::size_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 0x1e7));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<T> eps(batch);
  for (auto& e : eps) e = T(u(rng));
  return eps;
}

template <typename T>
Tensor<T> interpolate_samples(const Tensor<T>& denoised, const Tensor<T>& normal,
                              const std::vector<T>& eps) {
  require_same(denoised, normal, "interpolate_samples");
  if (eps.size() != denoised.dim(0)) {
    throw ShapeError("interpolate_samples: need one eps per sample");
  }
  Tensor<T> e(Shape{eps.size()}, eps);
  std::vector<T> rest(eps.size());
  for (std::size_t i = 0; i < eps.size(); ++i) rest[i] = T(1) - eps[i];
  Tensor<T> r(Shape{eps.size()}, rest);
  return add(mul_per_sample(denoised, e), mul_per_sample(normal, r));
}

template <typename T>
Tensor<T> interpolate_samples(const Tensor<T>& denoised, const Tensor<T>& normal,
                              std::uint64_t seed) {
  return interpolate_samples(denoised, normal, interpolation_weights<T>(denoised.dim(0), seed));
}

template <typename T>
Tensor<T> gradient_penalty(const Critic<T>& critic, const Tensor<T>& v_hat, double lambda_gp) {
  Tensor<T> v = v_hat;
  if (!v.requires_grad()) {
    v = v_hat.detach();
    v.set_requires_grad(true);
  }
  EnableGradGuard on(true);
  const Tensor<T> score = sum(critic(v));
  BackwardOptions opts;
  opts.create_graph = true;
  // A critic that ignores its input has a zero input gradient.
  const Tensor<T> grad = gradients(score, {v}, Tensor<T>{}, opts).front();
  const Tensor<T> norms = norm_per_sample(grad);
  return scale(mean(square(add_scalar(norms, T(-1)))), T(lambda_gp));
}

template <typename T>
Tensor<T> wasserstein_gap(const Critic<T>& critic, const Tensor<T>& a, const Tensor<T>& b) {
  return sub(mean(critic(a)), mean(critic(b)));
}

template <typename T>
Tensor<T> discriminator_loss(const Critic<T>& critic, const Tensor<T>& generator_output,
                             const Tensor<T>& normal, const LossWeights& weights,
                             std::uint64_t seed) {
  weights.validate();
  require_same(generator_output, normal, "discriminator_loss");
  const Tensor<T> fake = generator_output.detach();
  const Tensor<T> real = normal.detach();
  const Tensor<T> v_hat = interpolate_samples(fake, real, seed);
  return add(wasserstein_gap(critic, fake, real), gradient_penalty(critic, v_hat, weights.lambda_gp));
}

template <typename T>
Tensor<T> generator_loss(const Critic<T>& critic, const Tensor<T>& generator_output,
                         const Tensor<T>& normal, const LossWeights& weights) {
  weights.validate();
  require_same(generator_output, normal, "generator_loss");
  if (std::isinf(weights.lambda_m)) return mse_loss(generator_output, normal);
  const Tensor<T> adversarial = scale(mean(critic(generator_output)), T(-1));
  if (weights.lambda_m == 0) return adversarial;
  return add(adversarial, scale(mse_loss(generator_output, normal), T(weights.lambda_m)));
}

std::vector<double> gaussian_window(std::size_t window, double sigma) {
  std::vector<double> w(window * window);
  const double c = (double(window) - 1.0) / 2.0;
  double total = 0;
  for (std::size_t i = 0; i < window; ++i) {
    for (std::size_t j = 0; j < window; ++j) {
      const double dy = double(i) - c, dx = double(j) - c;
      w[i * window + j] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      total += w[i * window + j];
    }
  }
  for (auto& v : w) v /= total;
  return w;
}

template <typename T>
Tensor<T> ssim_loss(const Tensor<T>& denoised, const Tensor<T>& target, const SsimOptions& o) {
  require_same(denoised, target, "ssim_loss");
  const Tensor<T> x = as_slices(denoised, "ssim_loss");
  const Tensor<T> y = as_slices(target, "ssim_loss").detach();
  if (x.dim(2) < o.window || x.dim(3) < o.window) {
    throw ShapeError("ssim_loss: slice " + std::to_string(x.dim(2)) + "x" +
                     std::to_string(x.dim(3)) + " is smaller than the " +
                     std::to_string(o.window) + "x" + std::to_string(o.window) + " window");
  }
  const auto g = gaussian_window(o.window, o.sigma);
  const Tensor<T> kernel(Shape{1, 1, o.window, o.window}, std::vector<T>(g.begin(), g.end()));
  const ConvSpec valid;
  auto filt = [&](const Tensor<T>& t) { return conv(t, kernel, valid); };

  const T c1 = T((o.k1 * o.data_range) * (o.k1 * o.data_range));
  const T c2 = T((o.k2 * o.data_range) * (o.k2 * o.data_range));
  const Tensor<T> mu_x = filt(x), mu_y = filt(y);
  const Tensor<T> mu_xx = square(mu_x), mu_yy = square(mu_y), mu_xy = mul(mu_x, mu_y);
  const Tensor<T> var_x = sub(filt(square(x)), mu_xx);
  const Tensor<T> var_y = sub(filt(square(y)), mu_yy);
  const Tensor<T> cov = sub(filt(mul(x, y)), mu_xy);
  const Tensor<T> num = mul(add_scalar(scale(mu_xy, T(2)), c1), add_scalar(scale(cov, T(2)), c2));
  const Tensor<T> den = mul(add_scalar(add(mu_xx, mu_yy), c1), add_scalar(add(var_x, var_y), c2));
  const Tensor<T> ssim_map = div(num, den);
  // 1 - mean over all slices of their mean SSIM (all maps have equal size)
  return add_scalar(scale(mean(ssim_map), T(-1)), T(1));
}

template <typename T>
RandomConvPyramid<T>::RandomConvPyramid(std::uint64_t seed) : seed_(seed) {
  const std::size_t channels[] = {1, 8, 8, 16, 16, 32};
  for (std::size_t i = 0; i < 5; ++i) {
    const std::size_t in = channels[i], out = channels[i + 1];
    const double limit = std::sqrt(6.0 / double(9 * (in + out)));
    std::mt19937_64 rng(derive_seed(seed, i));
    std::uniform_real_distribution<double> u(-limit, limit);
    std::vector<T> w(out * in * 9);
    for (auto& v : w) v = T(u(rng));
    kernels_.emplace_back(Shape{out, in, 3, 3}, std::move(w));
  }
}

template <typename T>
std::string RandomConvPyramid<T>::id() const {
  return "random-conv-pyramid:seed=" + std::to_string(seed_);
}

template <typename T>
Tensor<T> RandomConvPyramid<T>::extract(const Tensor<T>& images) const {
  const std::size_t strides[] = {1, 2, 1, 2, 1};
  Tensor<T> h = images;
  for (std::size_t i = 0; i < kernels_.size(); ++i) {
    h = conv(h, kernels_[i], ConvSpec::make(strides[i], Padding::zero, kernels_[i].shape()));
    if (i + 1 < kernels_.size()) h = relu(h);
  }
  return h;
}

template <typename T>
Tensor<T> perceptual_loss(const Tensor<T>& denoised, const Tensor<T>& target,
                          const FeatureExtractor<T>& extractor) {
  require_same(denoised, target, "perceptual_loss");
  const Tensor<T> x = as_slices(denoised, "perceptual_loss");
  const Tensor<T> y = as_slices(target, "perceptual_loss").detach();
  if (x.dim(2) < extractor.min_extent() || x.dim(3) < extractor.min_extent()) {
    throw ShapeError("perceptual_loss: slice geometry " + shape_str(x.shape()) +
                     " is too small for extractor " + extractor.id());
  }
  const T inv_std = T(1.0 / extractor.input_std());
  const T shift = T(-extractor.input_mean() / extractor.input_std());
  auto normalise = [&](const Tensor<T>& t) { return add_scalar(scale(t, inv_std), shift); };
  const Tensor<T> fx = extractor.extract(normalise(x));
  Tensor<T> fy;
  {
    NoGradGuard no_grad;
    fy = extractor.extract(normalise(y));
  }
  const T n_slices = T(x.dim(0));
  return scale(sum(square(sub(fx, fy))), T(1) / n_slices);
}

#define LDPET_INSTANTIATE_LOSSES(T)                                                           \
  template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&);                            \
  template std::vector<T> interpolation_weights<T>(std::size_t, std::uint64_t);               \
  template Tensor<T> interpolate_samples(const Tensor<T>&, const Tensor<T>&,                  \
                                         const std::vector<T>&);                              \
  template Tensor<T> interpolate_samples(const Tensor<T>&, const Tensor<T>&, std::uint64_t);  \
  template Tensor<T> gradient_penalty(const Critic<T>&, const Tensor<T>&, double);            \
  template Tensor<T> wasserstein_gap(const Critic<T>&, const Tensor<T>&, const Tensor<T>&);   \
  template Tensor<T> discriminator_loss(const Critic<T>&, const Tensor<T>&, const Tensor<T>&, \
                                        const LossWeights&, std::uint64_t);                   \
  template Tensor<T> generator_loss(const Critic<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                    const LossWeights&);                                      \
  template Tensor<T> ssim_loss(const Tensor<T>&, const Tensor<T>&, const SsimOptions&);       \
  template class RandomConvPyramid<T>;                                                        \
  template Tensor<T> perceptual_loss(const Tensor<T>&, const Tensor<T>&,                      \
                                     const FeatureExtractor<T>&);

LDPET_INSTANTIATE_LOSSES(float)
LDPET_INSTANTIATE_LOSSES(double)

}  // namespace ldpet
