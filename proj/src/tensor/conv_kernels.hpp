#pragma once

#include <array>
#include <cstddef>

namespace ldpet::detail {

/// Geometry of one convolution, always expressed in 3D; 2D convolutions use a
/// unit depth axis with a depth-1 kernel.
struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_ch = 1;
  std::size_t out_ch = 1;
  std::array<std::size_t, 3> in{1, 1, 1};
  std::array<std::size_t, 3> out{1, 1, 1};
  std::array<std::size_t, 3> kernel{1, 1, 1};
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> pad{0, 0, 0};

  std::size_t col_rows() const { return in_ch * kernel[0] * kernel[1] * kernel[2]; }
  std::size_t out_plane() const { return out[1] * out[2]; }
  std::size_t in_volume() const { return in[0] * in[1] * in[2]; }
  std::size_t out_volume() const { return out[0] * out_plane(); }
};

/// y[B, out, Do, Ho, Wo] = conv(x, w). y is overwritten.
template <typename T>
void conv3d_forward(const ConvGeometry& g, const T* x, const T* w, T* y);

/// gx[B, in, D, H, W] = conv^T(gy, w). gx is overwritten.
template <typename T>
void conv3d_backward_input(const ConvGeometry& g, const T* gy, const T* w, T* gx);

/// gw[out, in, k...] = sum over batch/positions of gy * x. gw is overwritten.
template <typename T>
void conv3d_backward_weight(const ConvGeometry& g, const T* x, const T* gy, T* gw);

}  // namespace ldpet::detail
