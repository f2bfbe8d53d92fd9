#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ldpet/data.hpp"

namespace ldpet {

/// Row-major 2D image.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> px;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), px(h * w, fill) {}
  double& at(std::size_t y, std::size_t x) { return px[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return px[y * width + x]; }
};

Image axial_slice(const Volume& v, std::size_t z);

/// Every constant the metric suite depends on; fingerprinted into reports.
struct MetricConstants {
  std::size_t ssim_window = 11;
  double ssim_sigma = 1.5;
  double ssim_k1 = 0.01;
  double ssim_k2 = 0.03;
  double rfsim_c = 0.01;
  double canny_sigma = 1.4;
  double canny_high = 0.2;
  double canny_low = 0.1;
  double vif_sigma_n2 = 2.0;
  std::size_t vif_scales = 4;

  nlohmann::json to_json() const;
  /// FNV-1a over the canonical JSON of the constants, as 16 hex digits.
  std::string fingerprint() const;
};

/// 10 log10(MAX^2 / MSE) over the whole volume, MAX = max(ref); +inf when equal.
double psnr(const Volume& ref, const Volume& test);
/// 100 * RMSE / (max(ref) - min(ref)).
double nrmse(const Volume& ref, const Volume& test);

/// Mean local SSIM over valid window positions. data_range <= 0 means the
/// reference slice's own range (1 when the slice is flat).
double ssim_index(const Image& ref, const Image& test, double data_range = 0.0,
                  const MetricConstants& k = {});
/// Per-slice SSIM with L = the reference volume's range; returns the slice values.
std::vector<double> ssim_slices(const Volume& ref, const Volume& test, const MetricConstants& k = {});

struct RieszFeatureSet {
  Image rx, ry, rxx, rxy, ryy;
};

/// First- and second-order Riesz transforms by FFT; the DC transfer is 0 and
/// the real part of the inverse transform is kept.
RieszFeatureSet riesz_features(const Image& img);

/// Hysteresis-thresholded smoothed gradient magnitude without non-maximum
/// suppression. Thresholds are fractions of the image's maximum magnitude.
std::vector<std::uint8_t> canny_edges(const Image& img, const MetricConstants& k = {});
/// Union of both images' edge masks.
std::vector<std::uint8_t> canny_mask(const Image& ref, const Image& test, const MetricConstants& k = {});

/// RFSIM of one slice pair, both already on the reference's [0, 1] scale.
double rfsim_slice(const Image& ref, const Image& test, const MetricConstants& k = {});
std::vector<double> rfsim_slices(const Volume& ref, const Volume& test, const MetricConstants& k = {});
double rfsim(const Volume& ref, const Volume& test, const MetricConstants& k = {});

/// Pixel-domain multiscale VIF of one slice pair on the [0, 255] scale.
double vif_slice(const Image& ref, const Image& test, const MetricConstants& k = {});
std::vector<double> vif_slices(const Volume& ref, const Volume& test, const MetricConstants& k = {});
double vif(const Volume& ref, const Volume& test, const MetricConstants& k = {});

struct MetricReport {
  double psnr = 0;
  double nrmse = 0;
  double ssim = 0;
  double rfsim = 0;
  double vif = 0;
  std::vector<double> ssim_per_slice;
  std::vector<double> rfsim_per_slice;
  std::vector<double> vif_per_slice;
  std::string fingerprint;
  nlohmann::json constants;

  /// PSNR +inf is written as the string "inf".
  nlohmann::json to_json() const;
};

MetricReport evaluate_volume(const Volume& ref, const Volume& test, const MetricConstants& k = {});

}  // namespace ldpet
