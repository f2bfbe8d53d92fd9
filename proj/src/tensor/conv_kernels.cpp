#include "conv_kernels.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cstring>
#include <vector>

// im2col + GEMM. Output planes (batch item, output depth index) are processed
// in chunks so the column buffer stays bounded; the GEMM runs single-threaded,
// which keeps every reduction in a fixed order.

namespace ldpet::detail {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr std::size_t kColumnBudget = std::size_t{1} << 22;  // elements

std::size_t planes_per_chunk(const ConvGeometry& g) {
  const std::size_t per_plane = g.col_rows() * g.out_plane();
  return std::max<std::size_t>(1, kColumnBudget / std::max<std::size_t>(1, per_plane));
}

// Fill col[(c,kz,ky,kx), (plane, yo, xo)] for planes [p0, p1).
template <typename T>
void im2col(const ConvGeometry& g, const T* x, std::size_t p0, std::size_t p1, T* col) {
  const std::size_t n_cols = (p1 - p0) * g.out_plane();
  const std::size_t Ho = g.out[1], Wo = g.out[2];
  const std::size_t H = g.in[1], W = g.in[2];
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t kz = 0; kz < g.kernel[0]; ++kz) {
      for (std::size_t ky = 0; ky < g.kernel[1]; ++ky) {
        for (std::size_t kx = 0; kx < g.kernel[2]; ++kx, ++row) {
          T* dst_row = col + row * n_cols;
          for (std::size_t p = p0; p < p1; ++p) {
            const std::size_t b = p / g.out[0];
            const std::size_t zo = p % g.out[0];
            T* dst = dst_row + (p - p0) * g.out_plane();
            const long zi = long(zo * g.stride[0] + kz) - long(g.pad[0]);
            if (zi < 0 || zi >= long(g.in[0])) {
              std::fill(dst, dst + g.out_plane(), T(0));
              continue;
            }
            const T* src_plane = x + ((b * g.in_ch + c) * g.in[0] + std::size_t(zi)) * H * W;
            for (std::size_t yo = 0; yo < Ho; ++yo) {
              T* d = dst + yo * Wo;
              const long yi = long(yo * g.stride[1] + ky) - long(g.pad[1]);
              if (yi < 0 || yi >= long(H)) {
                std::fill(d, d + Wo, T(0));
                continue;
              }
              const T* s = src_plane + std::size_t(yi) * W;
              if (g.stride[2] == 1) {
                // valid xo range: 0 <= xo + kx - pad < W
                const long shift = long(kx) - long(g.pad[2]);
                const long lo = std::max<long>(0, -shift);
                const long hi = std::min<long>(long(Wo), long(W) - shift);
                if (hi <= lo) {
                  std::fill(d, d + Wo, T(0));
                  continue;
                }
                std::fill(d, d + lo, T(0));
                std::memcpy(d + lo, s + (lo + shift), std::size_t(hi - lo) * sizeof(T));
                std::fill(d + hi, d + Wo, T(0));
              } else {
                for (std::size_t xo = 0; xo < Wo; ++xo) {
                  const long xi = long(xo * g.stride[2] + kx) - long(g.pad[2]);
                  d[xo] = (xi < 0 || xi >= long(W)) ? T(0) : s[xi];
                }
              }
            }
          }
        }
      }
    }
  }
}

// Scatter-add col back into x (adjoint of im2col).
template <typename T>
void col2im(const ConvGeometry& g, const T* col, std::size_t p0, std::size_t p1, T* x) {
  const std::size_t n_cols = (p1 - p0) * g.out_plane();
  const std::size_t Ho = g.out[1], Wo = g.out[2];
  const std::size_t H = g.in[1], W = g.in[2];
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t kz = 0; kz < g.kernel[0]; ++kz) {
      for (std::size_t ky = 0; ky < g.kernel[1]; ++ky) {
        for (std::size_t kx = 0; kx < g.kernel[2]; ++kx, ++row) {
          const T* src_row = col + row * n_cols;
          for (std::size_t p = p0; p < p1; ++p) {
            const std::size_t b = p / g.out[0];
            const std::size_t zo = p % g.out[0];
            const T* src = src_row + (p - p0) * g.out_plane();
            const long zi = long(zo * g.stride[0] + kz) - long(g.pad[0]);
            if (zi < 0 || zi >= long(g.in[0])) continue;
            T* dst_plane = x + ((b * g.in_ch + c) * g.in[0] + std::size_t(zi)) * H * W;
            for (std::size_t yo = 0; yo < Ho; ++yo) {
              const long yi = long(yo * g.stride[1] + ky) - long(g.pad[1]);
              if (yi < 0 || yi >= long(H)) continue;
              const T* s = src + yo * Wo;
              T* d = dst_plane + std::size_t(yi) * W;
              if (g.stride[2] == 1) {
                const long shift = long(kx) - long(g.pad[2]);
                const long lo = std::max<long>(0, -shift);
                const long hi = std::min<long>(long(Wo), long(W) - shift);
                for (long xo = lo; xo < hi; ++xo) d[xo + shift] += s[xo];
                continue;
              }
              for (std::size_t xo = 0; xo < Wo; ++xo) {
                const long xi = long(xo * g.stride[2] + kx) - long(g.pad[2]);
                if (xi >= 0 && xi < long(W)) d[xi] += s[xo];
              }
            }
          }
        }
      }
    }
  }
}

// Gather gy planes [p0, p1) into a [out_ch, n_planes * plane] matrix.
template <typename T>
void gather_planes(const ConvGeometry& g, const T* y, std::size_t p0, std::size_t p1, T* dst) {
  const std::size_t plane = g.out_plane();
  const std::size_t n_cols = (p1 - p0) * plane;
  for (std::size_t o = 0; o < g.out_ch; ++o) {
    for (std::size_t p = p0; p < p1; ++p) {
      const std::size_t b = p / g.out[0];
      const std::size_t zo = p % g.out[0];
      std::memcpy(dst + o * n_cols + (p - p0) * plane,
                  y + ((b * g.out_ch + o) * g.out[0] + zo) * plane, plane * sizeof(T));
    }
  }
}

template <typename T>
void scatter_planes(const ConvGeometry& g, const T* src, std::size_t p0, std::size_t p1, T* y) {
  const std::size_t plane = g.out_plane();
  const std::size_t n_cols = (p1 - p0) * plane;
  for (std::size_t o = 0; o < g.out_ch; ++o) {
    for (std::size_t p = p0; p < p1; ++p) {
      const std::size_t b = p / g.out[0];
      const std::size_t zo = p % g.out[0];
      std::memcpy(y + ((b * g.out_ch + o) * g.out[0] + zo) * plane,
                  src + o * n_cols + (p - p0) * plane, plane * sizeof(T));
    }
  }
}

}  // namespace

template <typename T>
void conv3d_forward(const ConvGeometry& g, const T* x, const T* w, T* y) {
  const std::size_t rows = g.col_rows();
  const std::size_t total = g.batch * g.out[0];
  const std::size_t chunk = planes_per_chunk(g);
  std::vector<T> col, out;
  Eigen::Map<const RowMat<T>> weight(w, Eigen::Index(g.out_ch), Eigen::Index(rows));
  for (std::size_t p0 = 0; p0 < total; p0 += chunk) {
    const std::size_t p1 = std::min(total, p0 + chunk);
    const std::size_t n_cols = (p1 - p0) * g.out_plane();
    col.resize(rows * n_cols);
    out.resize(g.out_ch * n_cols);
    im2col(g, x, p0, p1, col.data());
    Eigen::Map<const RowMat<T>> cols(col.data(), Eigen::Index(rows), Eigen::Index(n_cols));
    Eigen::Map<RowMat<T>> result(out.data(), Eigen::Index(g.out_ch), Eigen::Index(n_cols));
    result.noalias() = weight * cols;
    scatter_planes(g, out.data(), p0, p1, y);
  }
}

template <typename T>
void conv3d_backward_input(const ConvGeometry& g, const T* gy, const T* w, T* gx) {
  const std::size_t rows = g.col_rows();
  const std::size_t total = g.batch * g.out[0];
  const std::size_t chunk = planes_per_chunk(g);
  std::fill(gx, gx + g.batch * g.in_ch * g.in_volume(), T(0));
  std::vector<T> col, grad;
  Eigen::Map<const RowMat<T>> weight(w, Eigen::Index(g.out_ch), Eigen::Index(rows));
  for (std::size_t p0 = 0; p0 < total; p0 += chunk) {
    const std::size_t p1 = std::min(total, p0 + chunk);
    const std::size_t n_cols = (p1 - p0) * g.out_plane();
    grad.resize(g.out_ch * n_cols);
    col.resize(rows * n_cols);
    gather_planes(g, gy, p0, p1, grad.data());
    Eigen::Map<const RowMat<T>> grads(grad.data(), Eigen::Index(g.out_ch), Eigen::Index(n_cols));
    Eigen::Map<RowMat<T>> cols(col.data(), Eigen::Index(rows), Eigen::Index(n_cols));
    cols.noalias() = weight.transpose() * grads;
    col2im(g, col.data(), p0, p1, gx);
  }
}

template <typename T>
void conv3d_backward_weight(const ConvGeometry& g, const T* x, const T* gy, T* gw) {
  const std::size_t rows = g.col_rows();
  const std::size_t total = g.batch * g.out[0];
  const std::size_t chunk = planes_per_chunk(g);
  Eigen::Map<RowMat<T>> weight_grad(gw, Eigen::Index(g.out_ch), Eigen::Index(rows));
  weight_grad.setZero();
  std::vector<T> col, grad;
  for (std::size_t p0 = 0; p0 < total; p0 += chunk) {
    const std::size_t p1 = std::min(total, p0 + chunk);
    const std::size_t n_cols = (p1 - p0) * g.out_plane();
    grad.resize(g.out_ch * n_cols);
    col.resize(rows * n_cols);
    gather_planes(g, gy, p0, p1, grad.data());
    im2col(g, x, p0, p1, col.data());
    Eigen::Map<const RowMat<T>> grads(grad.data(), Eigen::Index(g.out_ch), Eigen::Index(n_cols));
    Eigen::Map<const RowMat<T>> cols(col.data(), Eigen::Index(rows), Eigen::Index(n_cols));
    weight_grad.noalias() += grads * cols.transpose();
  }
}

template void conv3d_forward<float>(const ConvGeometry&, const float*, const float*, float*);
template void conv3d_forward<double>(const ConvGeometry&, const double*, const double*, double*);
template void conv3d_backward_input<float>(const ConvGeometry&, const float*, const float*, float*);
template void conv3d_backward_input<double>(const ConvGeometry&, const double*, const double*,
                                            double*);
template void conv3d_backward_weight<float>(const ConvGeometry&, const float*, const float*,
                                            float*);
template void conv3d_backward_weight<double>(const ConvGeometry&, const double*, const double*,
                                             double*);

}  // namespace ldpet::detail
