#include "ldpet/metrics.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace ldpet {

namespace {

void require_same_dims(const Volume& a, const Volume& b, const char* what) {
  if (a.dims != b.dims || a.values.size() != b.values.size()) {
    throw std::invalid_argument(std::string(what) + ": volume dims differ (" + std::to_string(a.dims[0]) + "x" +
                                std::to_string(a.dims[1]) + "x" + std::to_string(a.dims[2]) + " vs " +
                                std::to_string(b.dims[0]) + "x" + std::to_string(b.dims[1]) + "x" +
                                std::to_string(b.dims[2]) + ")");
  }
}

void require_same_size(const Image& a, const Image& b, const char* what) {
  if (a.height != b.height || a.width != b.width) {
    throw std::invalid_argument(std::string(what) + ": slice sizes differ");
  }
}

std::vector<double> gaussian_1d(std::size_t n, double sigma) {
  std::vector<double> k(n);
  const double c = (double(n) - 1) / 2;
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    k[i] = std::exp(-(double(i) - c) * (double(i) - c) / (2 * sigma * sigma));
    total += k[i];
  }
  for (auto& v : k) v /= total;
  return k;
}

// Separable correlation keeping only positions where the window fits.
Image filter_valid(const Image& img, const std::vector<double>& k) {
  const std::size_t n = k.size();
  if (img.height < n || img.width < n) throw std::invalid_argument("filter window exceeds the slice");
  const std::size_t ho = img.height - n + 1, wo = img.width - n + 1;
  Image rows(img.height, wo);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < wo; ++x) {
      double acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += k[j] * img.at(y, x + j);
      rows.at(y, x) = acc;
    }
  Image out(ho, wo);
  for (std::size_t y = 0; y < ho; ++y)
    for (std::size_t x = 0; x < wo; ++x) {
      double acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += k[i] * rows.at(y + i, x);
      out.at(y, x) = acc;
    }
  return out;
}

// Same-size separable correlation with replicated borders.
Image filter_same(const Image& img, const std::vector<double>& k) {
  const long r = long(k.size() / 2);
  const long H = long(img.height), W = long(img.width);
  Image rows(img.height, img.width), out(img.height, img.width);
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      double acc = 0;
      for (long j = -r; j <= r; ++j) acc += k[std::size_t(j + r)] * img.at(std::size_t(y), std::size_t(std::clamp(x + j, 0L, W - 1)));
      rows.at(std::size_t(y), std::size_t(x)) = acc;
    }
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      double acc = 0;
      for (long i = -r; i <= r; ++i) acc += k[std::size_t(i + r)] * rows.at(std::size_t(std::clamp(y + i, 0L, H - 1)), std::size_t(x));
      out.at(std::size_t(y), std::size_t(x)) = acc;
    }
  return out;
}

Image product(const Image& a, const Image& b) {
  Image out(a.height, a.width);
  for (std::size_t i = 0; i < a.px.size(); ++i) out.px[i] = a.px[i] * b.px[i];
  return out;
}

Image rescaled_slice(const Volume& v, std::size_t z, double lo, double scale) {
  Image img = axial_slice(v, z);
  for (double& p : img.px) p = (p - lo) * scale;
  return img;
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / double(v.size());
}

}  // namespace

Image axial_slice(const Volume& v, std::size_t z) {
  if (z >= v.dims[0]) throw std::out_of_range("slice index out of range");
  Image img(v.dims[1], v.dims[2]);
  std::copy_n(v.values.begin() + std::ptrdiff_t(z * v.dims[1] * v.dims[2]), img.px.size(), img.px.begin());
  return img;
}

nlohmann::json MetricConstants::to_json() const {
  return {{"ssim_window", ssim_window}, {"ssim_sigma", ssim_sigma},   {"ssim_k1", ssim_k1},
          {"ssim_k2", ssim_k2},         {"rfsim_c", rfsim_c},         {"canny_sigma", canny_sigma},
          {"canny_high", canny_high},   {"canny_low", canny_low},     {"vif_sigma_n2", vif_sigma_n2},
          {"vif_scales", vif_scales},   {"ssim_range", "reference volume range"},
          {"psnr_max", "reference volume max"},
          {"rfsim_vif_scaling", "reference volume min/max"}};
}

std::string MetricConstants::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_json().dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------

double psnr(const Volume& ref, const Volume& test) {
  require_same_dims(ref, test, "psnr");
  double se = 0;
  for (std::size_t i = 0; i < ref.values.size(); ++i) {
    const double d = ref.values[i] - test.values[i];
    se += d * d;
  }
  const double mse = se / double(ref.values.size());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  const double peak = ref.max();
  if (!(peak > 0)) throw std::invalid_argument("psnr: reference maximum must be positive");
  return 10.0 * std::log10(peak * peak / mse);
}

double nrmse(const Volume& ref, const Volume& test) {
  require_same_dims(ref, test, "nrmse");
  const double range = ref.max() - ref.min();
  if (!(range > 0)) throw std::invalid_argument("nrmse: reference volume has zero intensity range");
  double se = 0;
  for (std::size_t i = 0; i < ref.values.size(); ++i) {
    const double d = ref.values[i] - test.values[i];
    se += d * d;
  }
  return 100.0 * std::sqrt(se / double(ref.values.size())) / range;
}

double ssim_index(const Image& ref, const Image& test, double data_range, const MetricConstants& k) {
  require_same_size(ref, test, "ssim");
  if (ref.height < k.ssim_window || ref.width < k.ssim_window) {
    throw std::invalid_argument("ssim: " + std::to_string(k.ssim_window) + "x" + std::to_string(k.ssim_window) +
                                " window exceeds the " + std::to_string(ref.height) + "x" +
                                std::to_string(ref.width) + " slice");
  }
  double L = data_range;
  if (L <= 0) {
    const auto [lo, hi] = std::minmax_element(ref.px.begin(), ref.px.end());
    L = *hi - *lo > 0 ? *hi - *lo : 1.0;
  }
  const double c1 = (k.ssim_k1 * L) * (k.ssim_k1 * L), c2 = (k.ssim_k2 * L) * (k.ssim_k2 * L);
  const auto g = gaussian_1d(k.ssim_window, k.ssim_sigma);
  const Image mx = filter_valid(ref, g), my = filter_valid(test, g);
  const Image sxx = filter_valid(product(ref, ref), g), syy = filter_valid(product(test, test), g);
  const Image sxy = filter_valid(product(ref, test), g);
  double acc = 0;
  for (std::size_t i = 0; i < mx.px.size(); ++i) {
    const double a = mx.px[i], b = my.px[i];
    const double va = sxx.px[i] - a * a, vb = syy.px[i] - b * b, cov = sxy.px[i] - a * b;
    acc += (2 * a * b + c1) * (2 * cov + c2) / ((a * a + b * b + c1) * (va + vb + c2));
  }
  return acc / double(mx.px.size());
}

std::vector<double> ssim_slices(const Volume& ref, const Volume& test, const MetricConstants& k) {
  require_same_dims(ref, test, "ssim");
  const double range = ref.max() - ref.min();
  const double L = range > 0 ? range : 1.0;
  std::vector<double> out;
  for (std::size_t z = 0; z < ref.dims[0]; ++z) out.push_back(ssim_index(axial_slice(ref, z), axial_slice(test, z), L, k));
  return out;
}

// ---------------------------------------------------------------------------

RieszFeatureSet riesz_features(const Image& img) {
  const std::size_t H = img.height, W = img.width;
  if (H < 8 || W < 8) throw std::invalid_argument("riesz_features: slice must be at least 8x8");
  const std::size_t n = H * W;
  fftw_complex* buf = fftw_alloc_complex(n);
  fftw_complex* spec = fftw_alloc_complex(n);
  fftw_complex* work = fftw_alloc_complex(n);
  const fftw_plan fwd = fftw_plan_dft_2d(int(H), int(W), buf, spec, FFTW_FORWARD, FFTW_ESTIMATE);
  const fftw_plan inv = fftw_plan_dft_2d(int(H), int(W), work, buf, FFTW_BACKWARD, FFTW_ESTIMATE);
  for (std::size_t i = 0; i < n; ++i) {
    buf[i][0] = img.px[i];
    buf[i][1] = 0.0;
  }
  fftw_execute(fwd);

  // Signed angular frequencies.
  auto omega = [](std::size_t k, std::size_t N) {
    const long s = k <= N / 2 ? long(k) : long(k) - long(N);
    return 2.0 * std::numbers::pi * double(s) / double(N);
  };
  using cd = std::complex<double>;
  auto apply = [&](auto transfer) {
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t i = y * W + x;
        const double wy = omega(y, H), wx = omega(x, W);
        const double r = std::hypot(wx, wy);
        const cd t = r > 0 ? transfer(wx / r, wy / r) : cd(0.0, 0.0);
        const cd v = t * cd(spec[i][0], spec[i][1]);
        work[i][0] = v.real();
        work[i][1] = v.imag();
      }
    fftw_execute(inv);
    Image out(H, W);
    for (std::size_t i = 0; i < n; ++i) out.px[i] = buf[i][0] / double(n);
    return out;
  };
  const cd mi(0.0, -1.0);
  RieszFeatureSet f;
  f.rx = apply([&](double ux, double) { return mi * ux; });
  f.ry = apply([&](double, double uy) { return mi * uy; });
  f.rxx = apply([&](double ux, double) { return cd(-ux * ux, 0.0); });
  f.rxy = apply([&](double ux, double uy) { return cd(-ux * uy, 0.0); });
  f.ryy = apply([&](double, double uy) { return cd(-uy * uy, 0.0); });

  fftw_destroy_plan(fwd);
  fftw_destroy_plan(inv);
  fftw_free(buf);
  fftw_free(spec);
  fftw_free(work);
  return f;
}

std::vector<std::uint8_t> canny_edges(const Image& img, const MetricConstants& k) {
  const std::size_t H = img.height, W = img.width;
  const std::size_t radius = std::size_t(std::ceil(3 * k.canny_sigma));
  const Image s = filter_same(img, gaussian_1d(2 * radius + 1, k.canny_sigma));
  Image mag(H, W);
  double peak = 0;
  auto at = [&](long y, long x) {
    return s.at(std::size_t(std::clamp(y, 0L, long(H) - 1)), std::size_t(std::clamp(x, 0L, long(W) - 1)));
  };
  for (long y = 0; y < long(H); ++y)
    for (long x = 0; x < long(W); ++x) {
      const double gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
      const double gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
      const double m = std::sqrt(gx * gx + gy * gy);
      mag.at(std::size_t(y), std::size_t(x)) = m;
      peak = std::max(peak, m);
    }
  std::vector<std::uint8_t> mask(H * W, 0);
  if (!(peak > 0)) return mask;
  const double high = k.canny_high * peak, low = k.canny_low * peak;
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < H * W; ++i) {
    if (mag.px[i] > high) {
      mask[i] = 1;
      stack.push_back(i);
    }
  }
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    const long y = long(i / W), x = long(i % W);
    for (long dy = -1; dy <= 1; ++dy)
      for (long dx = -1; dx <= 1; ++dx) {
        const long yy = y + dy, xx = x + dx;
        if (yy < 0 || xx < 0 || yy >= long(H) || xx >= long(W)) continue;
        const std::size_t j = std::size_t(yy) * W + std::size_t(xx);
        if (!mask[j] && mag.px[j] > low) {
          mask[j] = 1;
          stack.push_back(j);
        }
      }
  }
  return mask;
}

std::vector<std::uint8_t> canny_mask(const Image& ref, const Image& test, const MetricConstants& k) {
  require_same_size(ref, test, "canny_mask");
  auto a = canny_edges(ref, k);
  const auto b = canny_edges(test, k);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = a[i] | b[i];
  return a;
}

double rfsim_slice(const Image& ref, const Image& test, const MetricConstants& k) {
  require_same_size(ref, test, "rfsim");
  const auto mask = canny_mask(ref, test, k);
  std::size_t count = 0;
  for (auto m : mask) count += m;
  if (count == 0) return 1.0;
  const auto fr = riesz_features(ref), ft = riesz_features(test);
  const Image* pr[] = {&fr.rx, &fr.ry, &fr.rxx, &fr.rxy, &fr.ryy};
  const Image* pt[] = {&ft.rx, &ft.ry, &ft.rxx, &ft.rxy, &ft.ryy};
  double score = 1.0;
  for (int f = 0; f < 5; ++f) {
    double acc = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask[i]) continue;
      const double a = pr[f]->px[i], b = pt[f]->px[i];
      acc += (2 * a * b + k.rfsim_c) / (a * a + b * b + k.rfsim_c);
    }
    score *= acc / double(count);
  }
  return std::clamp(score, 0.0, 1.0);
}

std::vector<double> rfsim_slices(const Volume& ref, const Volume& test, const MetricConstants& k) {
  require_same_dims(ref, test, "rfsim");
  const double lo = ref.min(), range = ref.max() - lo;
  const double scale = range > 0 ? 1.0 / range : 1.0;
  std::vector<double> out;
  for (std::size_t z = 0; z < ref.dims[0]; ++z) {
    out.push_back(rfsim_slice(rescaled_slice(ref, z, lo, scale), rescaled_slice(test, z, lo, scale), k));
  }
  return out;
}

double rfsim(const Volume& ref, const Volume& test, const MetricConstants& k) {
  return mean_of(rfsim_slices(ref, test, k));
}

// ---------------------------------------------------------------------------

double vif_slice(const Image& ref_in, const Image& test_in, const MetricConstants& k) {
  require_same_size(ref_in, test_in, "vif");
  Image ref = ref_in, test = test_in;
  const double eps = 1e-10;
  double num = 0, den = 0;
  auto too_small = [&] {
    throw std::invalid_argument("vif: slice " + std::to_string(ref_in.height) + "x" + std::to_string(ref_in.width) +
                                " is too small for " + std::to_string(k.vif_scales) + " scales");
  };
  for (std::size_t scale = 1; scale <= k.vif_scales; ++scale) {
    const std::size_t n = (std::size_t{1} << (k.vif_scales - scale + 1)) + 1;
    const auto win = gaussian_1d(n, double(n) / 5.0);
    if (scale > 1) {
      if (ref.height < n || ref.width < n) too_small();
      const Image r = filter_valid(ref, win), t = filter_valid(test, win);
      ref = Image((r.height + 1) / 2, (r.width + 1) / 2);
      test = Image(ref.height, ref.width);
      for (std::size_t y = 0; y < ref.height; ++y)
        for (std::size_t x = 0; x < ref.width; ++x) {
          ref.at(y, x) = r.at(2 * y, 2 * x);
          test.at(y, x) = t.at(2 * y, 2 * x);
        }
    }
    if (ref.height < n || ref.width < n) too_small();
    const Image m1 = filter_valid(ref, win), m2 = filter_valid(test, win);
    const Image s11 = filter_valid(product(ref, ref), win), s22 = filter_valid(product(test, test), win);
    const Image s12 = filter_valid(product(ref, test), win);
    for (std::size_t i = 0; i < m1.px.size(); ++i) {
      double v1 = std::max(0.0, s11.px[i] - m1.px[i] * m1.px[i]);
      const double v2 = std::max(0.0, s22.px[i] - m2.px[i] * m2.px[i]);
      const double cov = s12.px[i] - m1.px[i] * m2.px[i];
      double g = cov / (v1 + eps);
      double sv = v2 - g * cov;
      if (v1 < eps) {
        g = 0;
        sv = v2;
        v1 = 0;
      }
      if (v2 < eps) {
        g = 0;
        sv = 0;
      }
      if (g < 0) {
        sv = v2;
        g = 0;
      }
      if (sv <= eps) sv = eps;
      num += std::log10(1 + g * g * v1 / (sv + k.vif_sigma_n2));
      den += std::log10(1 + v1 / k.vif_sigma_n2);
    }
  }
  if (den == 0) {
    if (ref_in.px == test_in.px) return 1.0;
    throw std::invalid_argument("vif: reference slice carries no information (zero local variance at every "
                                "scale) and the test slice differs from it");
  }
  return std::clamp(num / den, 0.0, 1.0);
}

std::vector<double> vif_slices(const Volume& ref, const Volume& test, const MetricConstants& k) {
  require_same_dims(ref, test, "vif");
  const double lo = ref.min(), range = ref.max() - lo;
  const double scale = range > 0 ? 255.0 / range : 1.0;
  std::vector<double> out;
  for (std::size_t z = 0; z < ref.dims[0]; ++z) {
    try {
      out.push_back(vif_slice(rescaled_slice(ref, z, lo, scale), rescaled_slice(test, z, lo, scale), k));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(std::string(e.what()) + " (slice " + std::to_string(z) + ")");
    }
  }
  return out;
}

double vif(const Volume& ref, const Volume& test, const MetricConstants& k) {
  return mean_of(vif_slices(ref, test, k));
}

// ---------------------------------------------------------------------------

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  if (std::isinf(psnr)) j["psnr_db"] = "inf";
  else j["psnr_db"] = psnr;
  j["nrmse_percent"] = nrmse;
  j["ssim"] = ssim;
  j["rfsim"] = rfsim;
  j["vif"] = vif;
  j["per_slice"] = {{"ssim", ssim_per_slice}, {"rfsim", rfsim_per_slice}, {"vif", vif_per_slice}};
  j["constants"] = constants;
  j["fingerprint"] = fingerprint;
  return j;
}

MetricReport evaluate_volume(const Volume& ref, const Volume& test, const MetricConstants& k) {
  require_same_dims(ref, test, "evaluate");
  MetricReport r;
  r.psnr = psnr(ref, test);
  r.nrmse = nrmse(ref, test);
  r.ssim_per_slice = ssim_slices(ref, test, k);
  r.rfsim_per_slice = rfsim_slices(ref, test, k);
  r.vif_per_slice = vif_slices(ref, test, k);
  r.ssim = mean_of(r.ssim_per_slice);
  r.rfsim = mean_of(r.rfsim_per_slice);
  r.vif = mean_of(r.vif_per_slice);
  r.constants = k.to_json();
  r.fingerprint = k.fingerprint();
  return r;
}

}  // namespace ldpet
