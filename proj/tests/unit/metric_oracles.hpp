#pragma once

// Independent metric oracles shared by the unit and acceptance suites: direct
// windowed SSIM, O(n^4) DFT Riesz filters, non-separable Canny and RFSIM.

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <vector>

#include "ldpet/metrics.hpp"

namespace ldpet::testing {

inline Volume from_values(Dims3 dims, std::vector<double> v) {
  Volume out(dims);
  out.values = std::move(v);
  return out;
}

inline Volume phantom_volume(Dims3 dims, std::uint64_t seed) {
  auto spec = PhantomSpec::standard(dims);
  if (dims[0] < 6) spec.lesions.count = 0;
  const auto v = generate_phantom(spec, seed);
  return normalize(v, v.max());
}

inline Volume with_noise(const Volume& v, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  Volume out = v;
  for (double& x : out.values) x += n(rng);
  return out;
}

inline Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(h, w);
  for (double& p : img.px) p = u(rng);
  return img;
}

// --- independent oracles -------------------------------------------------

inline double ssim_direct(const Image& a, const Image& b, double L) {
  const int n = 11;
  double g[11][11], tot = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) tot += g[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * 1.5 * 1.5));
  const double c1 = 0.0001 * L * L, c2 = 0.0009 * L * L;
  double acc = 0;
  int count = 0;
  for (std::size_t r = 0; r + n <= a.height; ++r)
    for (std::size_t c = 0; c + n <= a.width; ++c) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const double w = g[i][j] / tot, x = a.at(r + i, c + j), y = b.at(r + i, c + j);
          ma += w * x;
          mb += w * y;
          saa += w * x * x;
          sbb += w * y * y;
          sab += w * x * y;
        }
      acc += (2 * ma * mb + c1) * (2 * (sab - ma * mb) + c2) /
             ((ma * ma + mb * mb + c1) * (saa - ma * ma + sbb - mb * mb + c2));
      ++count;
    }
  return acc / count;
}

// Direct DFT application of a transfer function H(ux, uy) (unit direction).
template <typename F>
Image dft_filter(const Image& img, F H) {
  using cd = std::complex<double>;
  const std::size_t R = img.height, C = img.width;
  const double tau = 2 * std::numbers::pi;
  std::vector<cd> X(R * C);
  for (std::size_t u = 0; u < R; ++u)
    for (std::size_t v = 0; v < C; ++v) {
      cd s = 0;
      for (std::size_t y = 0; y < R; ++y)
        for (std::size_t x = 0; x < C; ++x)
          s += img.at(y, x) * std::polar(1.0, -tau * (double(u * y) / double(R) + double(v * x) / double(C)));
      const double fy = u <= R / 2 ? double(u) : double(u) - double(R);
      const double fx = v <= C / 2 ? double(v) : double(v) - double(C);
      const double wy = tau * fy / double(R), wx = tau * fx / double(C);
      const double r = std::sqrt(wx * wx + wy * wy);
      X[u * C + v] = r > 0 ? s * H(wx / r, wy / r) : cd(0);
    }
  Image out(R, C);
  for (std::size_t y = 0; y < R; ++y)
    for (std::size_t x = 0; x < C; ++x) {
      cd s = 0;
      for (std::size_t u = 0; u < R; ++u)
        for (std::size_t v = 0; v < C; ++v)
          s += X[u * C + v] * std::polar(1.0, tau * (double(u * y) / double(R) + double(v * x) / double(C)));
      out.at(y, x) = s.real() / double(R * C);
    }
  return out;
}

inline std::vector<Image> riesz_oracle(const Image& img) {
  using cd = std::complex<double>;
  const cd mi(0, -1);
  return {dft_filter(img, [&](double ux, double) { return mi * ux; }),
          dft_filter(img, [&](double, double uy) { return mi * uy; }),
          dft_filter(img, [](double ux, double) { return cd(-ux * ux); }),
          dft_filter(img, [](double ux, double uy) { return cd(-ux * uy); }),
          dft_filter(img, [](double, double uy) { return cd(-uy * uy); })};
}

// Non-separable smoothing, Sobel, and fixpoint hysteresis.
inline std::vector<std::uint8_t> canny_oracle(const Image& img, double sigma = 1.4, double hi = 0.2, double lo = 0.1) {
  const long H = long(img.height), W = long(img.width);
  const long r = long(std::ceil(3 * sigma));
  std::vector<double> k;
  double tot = 0;
  for (long i = -r; i <= r; ++i)
    for (long j = -r; j <= r; ++j) {
      k.push_back(std::exp(-double(i * i + j * j) / (2 * sigma * sigma)));
      tot += k.back();
    }
  auto clampy = [&](long y) { return std::size_t(std::clamp(y, 0L, H - 1)); };
  auto clampx = [&](long x) { return std::size_t(std::clamp(x, 0L, W - 1)); };
  Image s(img.height, img.width);
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      double acc = 0;
      std::size_t idx = 0;
      for (long i = -r; i <= r; ++i)
        for (long j = -r; j <= r; ++j) acc += k[idx++] / tot * img.at(clampy(y + i), clampx(x + j));
      s.at(std::size_t(y), std::size_t(x)) = acc;
    }
  std::vector<double> mag(img.px.size());
  double peak = 0;
  const int sx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      double gx = 0, gy = 0;
      for (int i = -1; i <= 1; ++i)
        for (int j = -1; j <= 1; ++j) {
          const double v = s.at(clampy(y + i), clampx(x + j));
          gx += sx[i + 1][j + 1] * v;
          gy += sx[j + 1][i + 1] * v;
        }
      mag[std::size_t(y * W + x)] = std::hypot(gx, gy);
      peak = std::max(peak, mag[std::size_t(y * W + x)]);
    }
  std::vector<std::uint8_t> m(mag.size(), 0);
  if (peak == 0) return m;
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = mag[i] > hi * peak;
  for (bool changed = true; changed;) {
    changed = false;
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x) {
        const std::size_t i = std::size_t(y * W + x);
        if (m[i] || !(mag[i] > lo * peak)) continue;
        for (long dy = -1; dy <= 1 && !m[i]; ++dy)
          for (long dx = -1; dx <= 1 && !m[i]; ++dx) {
            const long yy = y + dy, xx = x + dx;
            if (yy >= 0 && xx >= 0 && yy < H && xx < W && m[std::size_t(yy * W + xx)]) {
              m[i] = 1;
              changed = true;
            }
          }
      }
  }
  return m;
}

inline double rfsim_oracle(const Image& a, const Image& b) {
  const auto ma = canny_oracle(a), mb = canny_oracle(b);
  const auto fa = riesz_oracle(a), fb = riesz_oracle(b);
  double score = 1;
  for (int f = 0; f < 5; ++f) {
    double acc = 0, n = 0;
    for (std::size_t i = 0; i < ma.size(); ++i) {
      if (!(ma[i] || mb[i])) continue;
      const double x = fa[f].px[i], y = fb[f].px[i];
      acc += (2 * x * y + 0.01) / (x * x + y * y + 0.01);
      n += 1;
    }
    if (n == 0) return 1.0;
    score *= acc / n;
  }
  return score;
}

inline double median5(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace ldpet::testing
