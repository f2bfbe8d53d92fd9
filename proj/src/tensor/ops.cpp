#include "ldpet/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "conv_kernels.hpp"

namespace ldpet {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using Grads = std::vector<Tensor<T>>;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.rank() != b.rank()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw ShapeError(std::string(op) + ": extent mismatch on axis " + std::to_string(i) + " (" +
                       shape_str(a.shape()) + " vs " + shape_str(b.shape()) + ")");
    }
  }
}

template <typename T, typename F>
Tensor<T> map_unary(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  auto src = a.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <typename T, typename F>
Tensor<T> map_binary(const Tensor<T>& a, const Tensor<T>& b, F f) {
  Tensor<T> out(a.shape());
  auto x = a.data();
  auto y = b.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(x[i], y[i]);
  return out;
}

std::vector<std::size_t> spatial_of(const Shape& s) { return {s.begin() + 2, s.end()}; }

std::size_t per_sample(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 1; i < s.size(); ++i) n *= s[i];
  return n;
}

template <typename T>
void require_conv_rank(const Tensor<T>& t, const char* op, const char* what) {
  if (t.rank() != 4 && t.rank() != 5) {
    throw ShapeError(std::string(op) + ": " + what + " must be rank 4 (2D) or 5 (3D), got " +
                     shape_str(t.shape()));
  }
}

detail::ConvGeometry make_geometry(std::size_t batch, std::size_t in_ch, std::size_t out_ch,
                                   const std::vector<std::size_t>& in_spatial,
                                   const std::vector<std::size_t>& out_spatial,
                                   const std::vector<std::size_t>& kernel_spatial,
                                   const ConvSpec& spec) {
  detail::ConvGeometry g;
  g.batch = batch;
  g.in_ch = in_ch;
  g.out_ch = out_ch;
  const std::size_t offset = 3 - in_spatial.size();
  for (std::size_t i = 0; i < in_spatial.size(); ++i) {
    g.in[offset + i] = in_spatial[i];
    g.out[offset + i] = out_spatial[i];
    g.kernel[offset + i] = kernel_spatial[i];
    g.stride[offset + i] = spec.stride[offset + i];
    g.pad[offset + i] = spec.pad[offset + i];
  }
  return g;
}

void check_spec(const ConvSpec& spec, std::size_t n_spatial, const char* op) {
  for (std::size_t i = 3 - n_spatial; i < 3; ++i) {
    if (spec.stride[i] == 0) {
      throw ShapeError(std::string(op) + ": stride must be positive (spatial axis " +
                       std::to_string(i - (3 - n_spatial)) + ")");
    }
  }
}

}  // namespace

ConvSpec ConvSpec::make(std::size_t stride, Padding padding, const Shape& kernel_shape) {
  if (stride == 0) throw ShapeError("conv: stride must be positive, got 0");
  if (kernel_shape.size() != 4 && kernel_shape.size() != 5) {
    throw ShapeError("conv: kernel must be rank 4 or 5, got " + shape_str(kernel_shape));
  }
  ConvSpec spec;
  const std::size_t n = kernel_shape.size() - 2;
  const std::size_t offset = 3 - n;
  for (std::size_t i = 0; i < n; ++i) {
    spec.stride[offset + i] = stride;
    spec.pad[offset + i] = padding == Padding::zero ? (kernel_shape[2 + i] - 1) / 2 : 0;
  }
  return spec;
}

std::vector<std::size_t> conv_output_spatial(const std::vector<std::size_t>& in_spatial,
                                             const std::vector<std::size_t>& kernel_spatial,
                                             const ConvSpec& spec) {
  const std::size_t offset = 3 - in_spatial.size();
  std::vector<std::size_t> out(in_spatial.size());
  for (std::size_t i = 0; i < in_spatial.size(); ++i) {
    const std::size_t padded = in_spatial[i] + 2 * spec.pad[offset + i];
    if (padded < kernel_spatial[i]) {
      throw ShapeError("conv: padded extent " + std::to_string(padded) + " on spatial axis " +
                       std::to_string(i) + " is smaller than the kernel extent " +
                       std::to_string(kernel_spatial[i]));
    }
    out[i] = (padded - kernel_spatial[i]) / spec.stride[offset + i] + 1;
  }
  return out;
}

std::vector<std::size_t> conv_transpose_output_spatial(
    const std::vector<std::size_t>& in_spatial, const std::vector<std::size_t>& kernel_spatial,
    const ConvSpec& spec) {
  const std::size_t offset = 3 - in_spatial.size();
  std::vector<std::size_t> out(in_spatial.size());
  for (std::size_t i = 0; i < in_spatial.size(); ++i) {
    const std::size_t grown = (in_spatial[i] - 1) * spec.stride[offset + i] + kernel_spatial[i];
    if (grown <= 2 * spec.pad[offset + i]) {
      throw ShapeError("deconv: padding consumes the whole output on spatial axis " +
                       std::to_string(i));
    }
    out[i] = grown - 2 * spec.pad[offset + i];
  }
  return out;
}

// --- elementwise -------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  auto out = map_binary(a, b, [](T x, T y) { return x + y; });
  return record<T>(std::move(out), "add", {a, b},
                   [](const Tensor<T>& g, const std::vector<bool>&) { return Grads<T>{g, g}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  auto out = map_binary(a, b, [](T x, T y) { return x - y; });
  return record<T>(std::move(out), "sub", {a, b},
                   [](const Tensor<T>& g, const std::vector<bool>& need) {
                     return Grads<T>{g, need[1] ? scale(g, T(-1)) : Tensor<T>{}};
                   });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  auto out = map_binary(a, b, [](T x, T y) { return x * y; });
  return record<T>(std::move(out), "mul", {a, b},
                   [a, b](const Tensor<T>& g, const std::vector<bool>& need) {
                     return Grads<T>{need[0] ? mul(g, b) : Tensor<T>{},
                                     need[1] ? mul(g, a) : Tensor<T>{}};
                   });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "div");
  auto out = map_binary(a, b, [](T x, T y) { return x / y; });
  return record<T>(std::move(out), "div", {a, b},
                   [a, b](const Tensor<T>& g, const std::vector<bool>& need) {
                     Tensor<T> ga, gb;
                     if (need[0]) ga = div(g, b);
                     // d(a/b)/db = -a / b^2
                     if (need[1]) gb = scale(div(mul(g, a), square(b)), T(-1));
                     return Grads<T>{ga, gb};
                   });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  auto out = map_unary(a, [factor](T x) { return x * factor; });
  return record<T>(std::move(out), "scale", {a},
                   [factor](const Tensor<T>& g, const std::vector<bool>&) {
                     return Grads<T>{scale(g, factor)};
                   });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  auto out = map_unary(a, [value](T x) { return x + value; });
  return record<T>(std::move(out), "add_scalar", {a},
                   [](const Tensor<T>& g, const std::vector<bool>&) { return Grads<T>{g}; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  auto out = map_unary(a, [](T x) { return x * x; });
  return record<T>(std::move(out), "square", {a},
                   [a](const Tensor<T>& g, const std::vector<bool>&) {
                     return Grads<T>{mul(g, scale(a, T(2)))};
                   });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  auto out = map_unary(a, [](T x) { return x > T(0) ? x : T(0); });
  return record<T>(std::move(out), "relu", {a},
                   [a](const Tensor<T>& g, const std::vector<bool>&) {
                     // subgradient 0 at the kink
                     auto mask = map_unary(a, [](T x) { return x > T(0) ? T(1) : T(0); });
                     return Grads<T>{mul(g, mask)};
                   });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  auto out = map_unary(a, [slope](T x) { return x > T(0) ? x : x * slope; });
  return record<T>(std::move(out), "leaky_relu", {a},
                   [a, slope](const Tensor<T>& g, const std::vector<bool>&) {
                     auto mask = map_unary(a, [slope](T x) { return x > T(0) ? T(1) : slope; });
                     return Grads<T>{mul(g, mask)};
                   });
}

// --- reductions ------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  Shape shape = a.shape();
  return record<T>(Tensor<T>::scalar(total), "sum", {a},
                   [shape](const Tensor<T>& g, const std::vector<bool>&) {
                     return Grads<T>{expand_scalar(g, shape)};
                   });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / T(a.numel()));
}

template <typename T>
Tensor<T> expand_scalar(const Tensor<T>& s, const Shape& shape) {
  if (s.numel() != 1) throw ShapeError("expand_scalar: needs a one-element tensor");
  Tensor<T> out(shape, s.item());
  return record<T>(std::move(out), "expand_scalar", {s},
                   [](const Tensor<T>& g, const std::vector<bool>&) { return Grads<T>{sum(g)}; });
}

template <typename T>
Tensor<T> sum_per_sample(const Tensor<T>& a) {
  const std::size_t batch = a.dim(0);
  const std::size_t n = per_sample(a.shape());
  Tensor<T> out(Shape{batch});
  auto src = a.data();
  auto dst = out.mutable_data();
  for (std::size_t b = 0; b < batch; ++b) {
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) total += src[b * n + i];
    dst[b] = total;
  }
  Shape shape = a.shape();
  return record<T>(std::move(out), "sum_per_sample", {a},
                   [shape](const Tensor<T>& g, const std::vector<bool>&) {
                     return Grads<T>{expand_per_sample(g, shape)};
                   });
}

template <typename T>
Tensor<T> expand_per_sample(const Tensor<T>& s, const Shape& shape) {
  if (s.rank() != 1 || s.dim(0) != shape.at(0)) {
    throw ShapeError("expand_per_sample: " + shape_str(s.shape()) + " does not match batch of " +
                     shape_str(shape));
  }
  Tensor<T> out(shape);
  const std::size_t n = per_sample(shape);
  auto dst = out.mutable_data();
  for (std::size_t b = 0; b < shape[0]; ++b) std::fill_n(dst.begin() + b * n, n, s[b]);
  return record<T>(std::move(out), "expand_per_sample", {s},
                   [](const Tensor<T>& g, const std::vector<bool>&) {
                     return Grads<T>{sum_per_sample(g)};
                   });
}

template <typename T>
Tensor<T> mul_per_sample(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.rank() != 1 || s.dim(0) != x.dim(0)) {
    throw ShapeError("mul_per_sample: scale " + shape_str(s.shape()) + " does not match batch of " +
                     shape_str(x.shape()));
  }
  Tensor<T> out(x.shape());
  const std::size_t n = per_sample(x.shape());
  auto src = x.data();
  auto dst = out.mutable_data();
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    for (std::size_t i = 0; i < n; ++i) dst[b * n + i] = src[b * n + i] * s[b];
  }
  return record<T>(std::move(out), "mul_per_sample", {x, s},
                   [x, s](const Tensor<T>& g, const std::vector<bool>& need) {
                     return Grads<T>{need[0] ? mul_per_sample(g, s) : Tensor<T>{},
                                     need[1] ? sum_per_sample(mul(g, x)) : Tensor<T>{}};
                   });
}

template <typename T>
Tensor<T> norm_per_sample(const Tensor<T>& x) {
  const std::size_t batch = x.dim(0);
  const std::size_t n = per_sample(x.shape());
  Tensor<T> out(Shape{batch});
  auto src = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) total += src[b * n + i] * src[b * n + i];
    out.mutable_data()[b] = std::sqrt(total);
  }
  Tensor<T> norms = out.detach();
  return record<T>(std::move(out), "norm_per_sample", {x},
                   [x, norms](const Tensor<T>& g, const std::vector<bool>&) {
                     // d||x||/dx = x / ||x||; the coefficient g/||x|| is treated as a
                     // constant of x, so this rule is exact to first order only.
                     Tensor<T> coeff(g.shape());
                     auto c = coeff.mutable_data();
                     for (std::size_t b = 0; b < c.size(); ++b) {
                       c[b] = norms[b] > T(0) ? T(1) / norms[b] : T(0);
                     }
                     return Grads<T>{mul_per_sample(x, mul(g, coeff))};
                   });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(shape, std::vector<T>(a.data().begin(), a.data().end()));
  Shape original = a.shape();
  return record<T>(std::move(out), "reshape", {a},
                   [original](const Tensor<T>& g, const std::vector<bool>&) {
                     return Grads<T>{reshape(g, original)};
                   });
}

// --- dense algebra -------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a, bool transpose_b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: operands must be rank 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = transpose_a ? a.dim(1) : a.dim(0);
  const std::size_t k = transpose_a ? a.dim(0) : a.dim(1);
  const std::size_t k2 = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != k2) {
    throw ShapeError("matmul: inner extents differ (" + std::to_string(k) + " vs " +
                     std::to_string(k2) + ") for " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  Tensor<T> out(Shape{m, n});
  Eigen::Map<const RowMat<T>> A(a.data().data(), Eigen::Index(a.dim(0)), Eigen::Index(a.dim(1)));
  Eigen::Map<const RowMat<T>> B(b.data().data(), Eigen::Index(b.dim(0)), Eigen::Index(b.dim(1)));
  Eigen::Map<RowMat<T>> C(out.mutable_data().data(), Eigen::Index(m), Eigen::Index(n));
  if (!transpose_a && !transpose_b) C.noalias() = A * B;
  if (!transpose_a && transpose_b) C.noalias() = A * B.transpose();
  if (transpose_a && !transpose_b) C.noalias() = A.transpose() * B;
  if (transpose_a && transpose_b) C.noalias() = A.transpose() * B.transpose();
  return record<T>(
      std::move(out), "matmul", {a, b},
      [a, b, transpose_a, transpose_b](const Tensor<T>& g, const std::vector<bool>& need) {
        Tensor<T> ga, gb;
        if (!transpose_a && !transpose_b) {
          if (need[0]) ga = matmul(g, b, false, true);
          if (need[1]) gb = matmul(a, g, true, false);
        } else if (!transpose_a && transpose_b) {
          if (need[0]) ga = matmul(g, b, false, false);
          if (need[1]) gb = matmul(g, a, true, false);
        } else if (transpose_a && !transpose_b) {
          if (need[0]) ga = matmul(b, g, false, true);
          if (need[1]) gb = matmul(a, g, false, false);
        } else {
          if (need[0]) ga = matmul(b, g, true, true);
          if (need[1]) gb = matmul(g, a, true, true);
        }
        return Grads<T>{ga, gb};
      });
}

template <typename T>
Tensor<T> add_row_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw ShapeError("add_row_bias: bias " + shape_str(bias.shape()) + " does not match rows of " +
                     shape_str(x.shape()));
  }
  Tensor<T> out(x.shape());
  const std::size_t m = x.dim(1);
  auto src = x.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] + bias[i % m];
  return record<T>(std::move(out), "add_row_bias", {x, bias},
                   [](const Tensor<T>& g, const std::vector<bool>& need) {
                     return Grads<T>{g, need[1] ? sum_rows(g) : Tensor<T>{}};
                   });
}

template <typename T>
Tensor<T> sum_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("sum_rows: needs rank 2, got " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0), m = x.dim(1);
  Tensor<T> out(Shape{m});
  auto dst = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < m; ++j) dst[j] += x[r * m + j];
  }
  Shape shape = x.shape();
  return record<T>(std::move(out), "sum_rows", {x},
                   [shape](const Tensor<T>& g, const std::vector<bool>&) {
                     return Grads<T>{add_row_bias(Tensor<T>::zeros(shape), g)};
                   });
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw ShapeError("add_channel_bias: bias " + shape_str(bias.shape()) +
                     " does not match channel axis 1 of " + shape_str(x.shape()));
  }
  Tensor<T> out(x.shape());
  const std::size_t channels = x.dim(1);
  const std::size_t inner = per_sample(x.shape()) / channels;
  auto src = x.data();
  auto dst = out.mutable_data();
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * inner;
      const T v = bias[c];
      for (std::size_t i = 0; i < inner; ++i) dst[base + i] = src[base + i] + v;
    }
  }
  return record<T>(std::move(out), "add_channel_bias", {x, bias},
                   [](const Tensor<T>& g, const std::vector<bool>& need) {
                     return Grads<T>{g, need[1] ? sum_channels(g) : Tensor<T>{}};
                   });
}

template <typename T>
Tensor<T> sum_channels(const Tensor<T>& x) {
  const std::size_t channels = x.dim(1);
  const std::size_t inner = per_sample(x.shape()) / channels;
  Tensor<T> out(Shape{channels});
  auto dst = out.mutable_data();
  auto src = x.data();
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * inner;
      T total = 0;
      for (std::size_t i = 0; i < inner; ++i) total += src[base + i];
      dst[c] += total;
    }
  }
  Shape shape = x.shape();
  return record<T>(std::move(out), "sum_channels", {x},
                   [shape](const Tensor<T>& g, const std::vector<bool>&) {
                     return Grads<T>{add_channel_bias(Tensor<T>::zeros(shape), g)};
                   });
}

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw ShapeError("dense: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(weight.shape()) + " on axis 1");
  }
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(0)) {
    throw ShapeError("dense: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()) + " on axis 0");
  }
  return add_row_bias(matmul(x, weight, false, true), bias);
}

// --- convolution ---------------------------------------------------------------------

template <typename T>
Tensor<T> conv(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec) {
  require_conv_rank(x, "conv", "input");
  require_conv_rank(w, "conv", "kernel");
  if (x.rank() != w.rank()) {
    throw ShapeError("conv: input " + shape_str(x.shape()) + " and kernel " +
                     shape_str(w.shape()) + " differ in rank");
  }
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError("conv: input channels (axis 1) " + std::to_string(x.dim(1)) +
                     " do not match kernel in_ch (axis 1) " + std::to_string(w.dim(1)));
  }
  check_spec(spec, x.rank() - 2, "conv");
  const auto in_sp = spatial_of(x.shape());
  const auto k_sp = spatial_of(w.shape());
  const auto out_sp = conv_output_spatial(in_sp, k_sp, spec);
  Shape out_shape{x.dim(0), w.dim(0)};
  out_shape.insert(out_shape.end(), out_sp.begin(), out_sp.end());
  Tensor<T> out(out_shape);
  auto geo = make_geometry(x.dim(0), w.dim(1), w.dim(0), in_sp, out_sp, k_sp, spec);
  detail::conv3d_forward(geo, x.data().data(), w.data().data(), out.mutable_data().data());
  return record<T>(std::move(out), "conv", {x, w},
                   [x, w, spec, in_sp, k_sp](const Tensor<T>& g, const std::vector<bool>& need) {
                     return Grads<T>{
                         need[0] ? conv_transpose(g, w, spec, in_sp) : Tensor<T>{},
                         need[1] ? conv_weight_grad(x, g, spec, k_sp) : Tensor<T>{}};
                   });
}

template <typename T>
Tensor<T> conv_transpose(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec,
                         const std::vector<std::size_t>& out_spatial) {
  require_conv_rank(x, "deconv", "input");
  require_conv_rank(w, "deconv", "kernel");
  if (x.rank() != w.rank()) {
    throw ShapeError("deconv: input " + shape_str(x.shape()) + " and kernel " +
                     shape_str(w.shape()) + " differ in rank");
  }
  if (x.dim(1) != w.dim(0)) {
    throw ShapeError("deconv: input channels (axis 1) " + std::to_string(x.dim(1)) +
                     " do not match kernel axis 0 " + std::to_string(w.dim(0)));
  }
  check_spec(spec, x.rank() - 2, "deconv");
  if (out_spatial.size() != x.rank() - 2) {
    throw ShapeError("deconv: output spatial rank does not match input");
  }
  const auto in_sp = spatial_of(x.shape());
  const auto k_sp = spatial_of(w.shape());
  const auto check = conv_output_spatial(out_spatial, k_sp, spec);
  for (std::size_t i = 0; i < check.size(); ++i) {
    if (check[i] != in_sp[i]) {
      throw ShapeError("deconv: output extent " + std::to_string(out_spatial[i]) +
                       " on spatial axis " + std::to_string(i) + " is inconsistent with input " +
                       std::to_string(in_sp[i]));
    }
  }
  Shape out_shape{x.dim(0), w.dim(1)};
  out_shape.insert(out_shape.end(), out_spatial.begin(), out_spatial.end());
  Tensor<T> out(out_shape);
  auto geo = make_geometry(x.dim(0), w.dim(1), w.dim(0), out_spatial, in_sp, k_sp, spec);
  detail::conv3d_backward_input(geo, x.data().data(), w.data().data(),
                                out.mutable_data().data());
  return record<T>(std::move(out), "conv_transpose", {x, w},
                   [x, w, spec, k_sp](const Tensor<T>& g, const std::vector<bool>& need) {
                     return Grads<T>{need[0] ? conv(g, w, spec) : Tensor<T>{},
                                     need[1] ? conv_weight_grad(g, x, spec, k_sp) : Tensor<T>{}};
                   });
}

template <typename T>
Tensor<T> conv_weight_grad(const Tensor<T>& x, const Tensor<T>& gy, const ConvSpec& spec,
                           const std::vector<std::size_t>& kernel_spatial) {
  require_conv_rank(x, "conv_weight_grad", "input");
  require_conv_rank(gy, "conv_weight_grad", "output gradient");
  if (x.rank() != gy.rank() || x.dim(0) != gy.dim(0)) {
    throw ShapeError("conv_weight_grad: input " + shape_str(x.shape()) + " and gradient " +
                     shape_str(gy.shape()) + " are incompatible");
  }
  const auto in_sp = spatial_of(x.shape());
  const auto out_sp = spatial_of(gy.shape());
  const auto check = conv_output_spatial(in_sp, kernel_spatial, spec);
  if (check != out_sp) {
    throw ShapeError("conv_weight_grad: gradient " + shape_str(gy.shape()) +
                     " does not match the conv output of " + shape_str(x.shape()));
  }
  Shape k_shape{gy.dim(1), x.dim(1)};
  k_shape.insert(k_shape.end(), kernel_spatial.begin(), kernel_spatial.end());
  Tensor<T> out(k_shape);
  auto geo = make_geometry(x.dim(0), x.dim(1), gy.dim(1), in_sp, out_sp, kernel_spatial, spec);
  detail::conv3d_backward_weight(geo, x.data().data(), gy.data().data(),
                                 out.mutable_data().data());
  return record<T>(std::move(out), "conv_weight_grad", {x, gy},
                   [x, gy, spec, in_sp](const Tensor<T>& g, const std::vector<bool>& need) {
                     return Grads<T>{need[0] ? conv_transpose(gy, g, spec, in_sp) : Tensor<T>{},
                                     need[1] ? conv(x, g, spec) : Tensor<T>{}};
                   });
}

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                       std::size_t stride, Padding padding) {
  return add_channel_bias(conv(x, kernel, ConvSpec::make(stride, padding, kernel.shape())), bias);
}

template <typename T>
Tensor<T> deconv_forward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                         std::size_t stride, Padding padding) {
  require_conv_rank(x, "deconv", "input");
  require_conv_rank(kernel, "deconv", "kernel");
  const auto spec = ConvSpec::make(stride, padding, kernel.shape());
  const auto out_sp =
      conv_transpose_output_spatial(spatial_of(x.shape()), spatial_of(kernel.shape()), spec);
  return add_channel_bias(conv_transpose(x, kernel, spec, out_sp), bias);
}

// --- depth slicing ------------------------------------------------------------------

template <typename T>
Tensor<T> slice_depth(const Tensor<T>& x, std::size_t index) {
  if (x.rank() != 5) throw ShapeError("slice_depth: needs [B, C, D, H, W], got " + shape_str(x.shape()));
  const std::size_t depth = x.dim(2);
  if (index >= depth) {
    throw ShapeError("slice_depth: index " + std::to_string(index) + " out of range for depth " +
                     std::to_string(depth));
  }
  const std::size_t plane = x.dim(3) * x.dim(4);
  const std::size_t outer = x.dim(0) * x.dim(1);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), x.dim(3), x.dim(4)});
  auto src = x.data();
  auto dst = out.mutable_data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::memcpy(dst.data() + o * plane, src.data() + (o * depth + index) * plane,
                plane * sizeof(T));
  }
  return record<T>(std::move(out), "slice_depth", {x},
                   [index, depth](const Tensor<T>& g, const std::vector<bool>&) {
                     return Grads<T>{embed_depth(g, index, depth)};
                   });
}

template <typename T>
Tensor<T> embed_depth(const Tensor<T>& x, std::size_t index, std::size_t depth) {
  if (x.rank() != 4) throw ShapeError("embed_depth: needs [B, C, H, W], got " + shape_str(x.shape()));
  if (index >= depth) throw ShapeError("embed_depth: index out of range");
  const std::size_t plane = x.dim(2) * x.dim(3);
  const std::size_t outer = x.dim(0) * x.dim(1);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), depth, x.dim(2), x.dim(3)});
  auto src = x.data();
  auto dst = out.mutable_data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::memcpy(dst.data() + (o * depth + index) * plane, src.data() + o * plane,
                plane * sizeof(T));
  }
  return record<T>(std::move(out), "embed_depth", {x},
                   [index](const Tensor<T>& g, const std::vector<bool>&) {
                     return Grads<T>{slice_depth(g, index)};
                   });
}

template <typename T>
Tensor<T> stack_depth(const std::vector<Tensor<T>>& slices) {
  if (slices.empty()) throw ShapeError("stack_depth: no slices");
  const Shape& s0 = slices.front().shape();
  if (s0.size() != 4) throw ShapeError("stack_depth: slices must be [B, C, H, W]");
  for (std::size_t i = 1; i < slices.size(); ++i) require_same_shape(slices[0], slices[i], "stack_depth");
  const std::size_t depth = slices.size();
  const std::size_t plane = s0[2] * s0[3];
  const std::size_t outer = s0[0] * s0[1];
  Tensor<T> out(Shape{s0[0], s0[1], depth, s0[2], s0[3]});
  auto dst = out.mutable_data();
  for (std::size_t z = 0; z < depth; ++z) {
    auto src = slices[z].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::memcpy(dst.data() + (o * depth + z) * plane, src.data() + o * plane,
                  plane * sizeof(T));
    }
  }
  return record<T>(std::move(out), "stack_depth", slices,
                   [depth](const Tensor<T>& g, const std::vector<bool>& need) {
                     Grads<T> grads(depth);
                     for (std::size_t z = 0; z < depth; ++z) {
                       if (need[z]) grads[z] = slice_depth(g, z);
                     }
                     return grads;
                   });
}

#define LDPET_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                              \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                         \
  template Tensor<T> square(const Tensor<T>&);                                                \
  template Tensor<T> relu(const Tensor<T>&);                                                  \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                         \
  template Tensor<T> sum(const Tensor<T>&);                                                   \
  template Tensor<T> mean(const Tensor<T>&);                                                  \
  template Tensor<T> expand_scalar(const Tensor<T>&, const Shape&);                           \
  template Tensor<T> sum_per_sample(const Tensor<T>&);                                        \
  template Tensor<T> expand_per_sample(const Tensor<T>&, const Shape&);                       \
  template Tensor<T> mul_per_sample(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> norm_per_sample(const Tensor<T>&);                                       \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool, bool);                  \
  template Tensor<T> add_row_bias(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> sum_rows(const Tensor<T>&);                                              \
  template Tensor<T> add_channel_bias(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> sum_channels(const Tensor<T>&);                                          \
  template Tensor<T> dense_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> conv(const Tensor<T>&, const Tensor<T>&, const ConvSpec&);               \
  template Tensor<T> conv_transpose(const Tensor<T>&, const Tensor<T>&, const ConvSpec&,      \
                                    const std::vector<std::size_t>&);                         \
  template Tensor<T> conv_weight_grad(const Tensor<T>&, const Tensor<T>&, const ConvSpec&,    \
                                      const std::vector<std::size_t>&);                       \
  template Tensor<T> conv_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                  std::size_t, Padding);                                      \
  template Tensor<T> deconv_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                    std::size_t, Padding);                                    \
  template Tensor<T> slice_depth(const Tensor<T>&, std::size_t);                              \
  template Tensor<T> embed_depth(const Tensor<T>&, std::size_t, std::size_t);                 \
  template Tensor<T> stack_depth(const std::vector<Tensor<T>>&);

LDPET_INSTANTIATE_OPS(float)
LDPET_INSTANTIATE_OPS(double)

}  // namespace ldpet
