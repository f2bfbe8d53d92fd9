#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "ldpet/tensor.hpp"

// Differentiable tensor operations. Every backward rule is itself written in
// terms of these operations, so running backward with graph recording enabled
// yields a differentiable gradient (used for the gradient penalty).

namespace ldpet {

enum class Padding { zero, none };

/// Spatial settings shared by convolution and its transpose. `padding` is the
/// explicit per-axis pad (depth, height, width); 2D tensors ignore the depth entry.
struct ConvSpec {
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> pad{0, 0, 0};

  /// Uniform stride; zero padding pads (k-1)/2 per side, none pads nothing.
  static ConvSpec make(std::size_t stride, Padding padding, const Shape& kernel_shape);
};

// --- elementwise ---------------------------------------------------------
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T value);
template <typename T> Tensor<T> square(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& a, T slope);

// --- reductions and broadcasts -------------------------------------------
/// Sum of all elements, shape [1].
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
/// Broadcast a one-element tensor to `shape`.
template <typename T> Tensor<T> expand_scalar(const Tensor<T>& s, const Shape& shape);
/// [B, ...] -> [B]
template <typename T> Tensor<T> sum_per_sample(const Tensor<T>& a);
/// [B] -> [B, ...] with `shape`.
template <typename T> Tensor<T> expand_per_sample(const Tensor<T>& s, const Shape& shape);
/// x[b, ...] * s[b]
template <typename T> Tensor<T> mul_per_sample(const Tensor<T>& x, const Tensor<T>& s);
/// Euclidean norm of each sample, [B, ...] -> [B]. The gradient at a zero norm is taken as zero.
template <typename T> Tensor<T> norm_per_sample(const Tensor<T>& x);

template <typename T> Tensor<T> reshape(const Tensor<T>& a, const Shape& shape);

// --- dense algebra --------------------------------------------------------
/// op(a) * op(b) for rank-2 tensors, op = transpose when the flag is set.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a = false,
                 bool transpose_b = false);
/// x[B, m] + bias[m]
template <typename T> Tensor<T> add_row_bias(const Tensor<T>& x, const Tensor<T>& bias);
/// [B, m] -> [m]
template <typename T> Tensor<T> sum_rows(const Tensor<T>& x);
/// x[B, C, ...] + bias[C]
template <typename T> Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias);
/// [B, C, ...] -> [C]
template <typename T> Tensor<T> sum_channels(const Tensor<T>& x);

/// Affine layer: x[B, n] * weight[m, n]^T + bias[m].
template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// --- convolution ----------------------------------------------------------
// Rank-4 tensors ([B, C, H, W]) are 2D, rank-5 ([B, C, D, H, W]) are 3D.
// Kernels are [out_ch, in_ch, k...]. Convolution is cross-correlation.

/// Cross-correlation of x[B, in, ...] with w[out, in, k...] -> [B, out, ...].
template <typename T> Tensor<T> conv(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec);

/// Adjoint of conv: x[B, out, ...] -> [B, in, out_spatial...] using the same kernel layout.
template <typename T>
Tensor<T> conv_transpose(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec,
                         const std::vector<std::size_t>& out_spatial);

/// Kernel gradient of conv: d<gy, conv(x, w)>/dw, shaped like the kernel.
template <typename T>
Tensor<T> conv_weight_grad(const Tensor<T>& x, const Tensor<T>& gy, const ConvSpec& spec,
                           const std::vector<std::size_t>& kernel_spatial);

/// Spatial extents of conv output (ceil division for strided zero-padded convs).
std::vector<std::size_t> conv_output_spatial(const std::vector<std::size_t>& in_spatial,
                                             const std::vector<std::size_t>& kernel_spatial,
                                             const ConvSpec& spec);
/// Spatial extents of conv_transpose output: (in - 1) * stride + k - 2 * pad.
std::vector<std::size_t> conv_transpose_output_spatial(
    const std::vector<std::size_t>& in_spatial, const std::vector<std::size_t>& kernel_spatial,
    const ConvSpec& spec);

/// conv + per-channel bias.
template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                       std::size_t stride, Padding padding);

/// Transposed convolution + bias. kernel [in_ch, out_ch, k...] maps in_ch -> out_ch.
template <typename T>
Tensor<T> deconv_forward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                         std::size_t stride, Padding padding);

// --- depth slicing (5D <-> 4D) ---------------------------------------------
/// x[:, :, index] of a [B, C, D, H, W] tensor -> [B, C, H, W].
template <typename T> Tensor<T> slice_depth(const Tensor<T>& x, std::size_t index);
/// Place a [B, C, H, W] slice at `index` of an otherwise zero [B, C, depth, H, W] tensor.
template <typename T> Tensor<T> embed_depth(const Tensor<T>& x, std::size_t index, std::size_t depth);
/// Stack equally shaped [B, C, H, W] slices along a new depth axis.
template <typename T> Tensor<T> stack_depth(const std::vector<Tensor<T>>& slices);

}  // namespace ldpet
