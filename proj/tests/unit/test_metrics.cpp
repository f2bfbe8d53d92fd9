#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include "ldpet/metrics.hpp"
#include "metric_oracles.hpp"

using namespace ldpet;
using namespace ldpet::testing;

TEST_CASE("psnr and nrmse hand arithmetic") {
  const auto ref = from_values({1, 1, 2}, {0, 1});
  const auto test = from_values({1, 1, 2}, {0, 0.5});
  CHECK(psnr(ref, test) == doctest::Approx(9.0309).epsilon(1e-4));
  CHECK(std::abs(psnr(ref, test) - 10 * std::log10(8.0)) < 1e-12);
  CHECK(nrmse(ref, test) == doctest::Approx(35.355).epsilon(1e-4));
  CHECK(std::isinf(psnr(ref, ref)));
  CHECK(nrmse(ref, ref) == 0.0);
  CHECK_THROWS_AS(nrmse(from_values({1, 1, 2}, {1, 1}), ref), std::invalid_argument);
  CHECK_THROWS_AS(psnr(ref, from_values({1, 2, 1}, {0, 1})), std::invalid_argument);
}

TEST_CASE("psnr and nrmse are scale covariant") {
  const auto ref = phantom_volume({2, 48, 48}, 1);
  const auto test = with_noise(ref, 0.05, 2);
  Volume r2 = ref, t2 = test;
  for (double& v : r2.values) v *= 7.5;
  for (double& v : t2.values) v *= 7.5;
  CHECK(psnr(r2, t2) == doctest::Approx(psnr(ref, test)).epsilon(1e-10));
  CHECK(nrmse(r2, t2) == doctest::Approx(nrmse(ref, test)).epsilon(1e-10));
}

TEST_CASE("ssim index") {
  Image grad(16, 16);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) grad.at(y, x) = double(x + 2 * y) / 46.0;
  Image blur(16, 16);
  for (long y = 0; y < 16; ++y)
    for (long x = 0; x < 16; ++x) {
      double s = 0;
      for (long i = -1; i <= 1; ++i)
        for (long j = -1; j <= 1; ++j) s += grad.at(std::size_t(std::clamp(y + i, 0L, 15L)), std::size_t(std::clamp(x + j, 0L, 15L)));
      blur.at(std::size_t(y), std::size_t(x)) = s / 9;
    }
  CHECK(ssim_index(grad, grad) == doctest::Approx(1.0).epsilon(1e-12));
  const double got = ssim_index(grad, blur, 1.0);
  CHECK(std::abs(got - ssim_direct(grad, blur, 1.0)) < 1e-6);
  CHECK(got < 1.0);

  const Image a = random_image(20, 20, 3), b = random_image(20, 20, 4);
  CHECK(std::abs(ssim_index(a, b, 1.0) - ssim_direct(a, b, 1.0)) < 1e-9);
  CHECK(ssim_index(a, b, 1.0) == doctest::Approx(ssim_index(b, a, 1.0)).epsilon(1e-12));

  // Same local means, mirrored structure.
  Image mirror = a;
  for (double& p : mirror.px) p = 1.0 - p;
  CHECK(ssim_index(a, mirror, 1.0) < 0.0);
  CHECK(ssim_index(a, mirror, 1.0) >= -1.0);
  CHECK_THROWS_AS(ssim_index(Image(10, 20), Image(10, 20)), std::invalid_argument);
}

TEST_CASE("riesz features") {
  const auto flat = riesz_features(Image(16, 16, 3.0));
  for (const Image* f : {&flat.rx, &flat.ry, &flat.rxx, &flat.rxy, &flat.ryy})
    for (double p : f->px) CHECK(std::abs(p) < 1e-6);

  Image cosx(16, 16);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) cosx.at(y, x) = std::cos(2 * std::numbers::pi * 3 * double(x) / 16);
  const auto fc = riesz_features(cosx);
  double ex = 0, ey = 0;
  for (std::size_t i = 0; i < 256; ++i) {
    ex += fc.rx.px[i] * fc.rx.px[i];
    ey += fc.ry.px[i] * fc.ry.px[i];
  }
  CHECK(ey < 1e-12);
  CHECK(ex > 100);

  const Image img = random_image(16, 16, 9);
  const auto f = riesz_features(img);
  double mean = 0;
  for (double p : img.px) mean += p;
  mean /= 256;
  for (std::size_t i = 0; i < 256; ++i) CHECK(std::abs(f.rxx.px[i] + f.ryy.px[i] + (img.px[i] - mean)) < 1e-6);

  const auto o = riesz_oracle(img);
  const Image* got[] = {&f.rx, &f.ry, &f.rxx, &f.rxy, &f.ryy};
  double worst = 0;
  for (int k = 0; k < 5; ++k)
    for (std::size_t i = 0; i < 256; ++i) worst = std::max(worst, std::abs(got[k]->px[i] - o[std::size_t(k)].px[i]));
  CHECK(worst < 1e-6);
  CHECK_THROWS_AS(riesz_features(Image(7, 16)), std::invalid_argument);
}

TEST_CASE("canny mask") {
  for (auto m : canny_mask(Image(16, 16, 0.4), Image(16, 16, 0.4))) CHECK(m == 0);

  Image step(24, 24);
  for (std::size_t y = 0; y < 24; ++y)
    for (std::size_t x = 12; x < 24; ++x) step.at(y, x) = 1.0;
  const auto m = canny_edges(step);
  for (std::size_t y = 0; y < 24; ++y) {
    CHECK(m[y * 24 + 11]);
    CHECK(m[y * 24 + 12]);
    CHECK_FALSE(m[y * 24 + 0]);
    CHECK_FALSE(m[y * 24 + 23]);
  }

  Image board(32, 32);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) board.at(y, x) = ((y / 8 + x / 8) % 2) ? 1.0 : 0.0;
  const auto mine = canny_edges(board);
  const auto theirs = canny_oracle(board);
  const auto count = [](const std::vector<std::uint8_t>& v) { return std::count(v.begin(), v.end(), 1); };
  CHECK(count(mine) == count(theirs));
  CHECK(mine == theirs);
  CHECK(count(mine) > 0);

  const Image a = random_image(24, 24, 1), b = random_image(24, 24, 2);
  const auto u = canny_mask(a, b), ea = canny_edges(a), eb = canny_edges(b);
  for (std::size_t i = 0; i < u.size(); ++i) CHECK(u[i] == (ea[i] | eb[i]));
  CHECK(ea == canny_oracle(a));
}

TEST_CASE("rfsim") {
  const auto ref = phantom_volume({3, 32, 32}, 4);
  CHECK(rfsim(ref, ref) == doctest::Approx(1.0).epsilon(1e-12));
  const auto noisy = with_noise(ref, 0.05, 5);
  const auto slices = rfsim_slices(ref, noisy);
  for (double s : slices) {
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
  }
  // Independent reimplementation on one slice (intensities already on [0, 1] of the reference).
  const double lo = ref.min(), range = ref.max() - lo;
  Image a = axial_slice(ref, 1), b = axial_slice(noisy, 1);
  for (double& p : a.px) p = (p - lo) / range;
  for (double& p : b.px) p = (p - lo) / range;
  CHECK(std::abs(slices[1] - rfsim_oracle(a, b)) < 1e-6);
  CHECK(rfsim_slice(a, b) == doctest::Approx(rfsim_slice(b, a)).epsilon(1e-12));
  CHECK(rfsim_slice(Image(16, 16, 0.5), Image(16, 16, 0.5)) == 1.0);
}

TEST_CASE("vif") {
  const auto ref = phantom_volume({2, 48, 48}, 6);
  CHECK(std::abs(vif(ref, ref) - 1.0) < 1e-6);
  const auto noisy = with_noise(ref, 0.05, 7);
  const double v = vif(ref, noisy);
  CHECK(v > 0.0);
  CHECK(v < 1.0);

  // Slice 1 is flat: degenerate, scored 1 only when the test matches it.
  Volume flat_ref({2, 48, 48}, 0.5);
  std::copy(ref.values.begin(), ref.values.begin() + 48 * 48, flat_ref.values.begin());
  CHECK(vif(flat_ref, flat_ref) == doctest::Approx(1.0));
  Volume other = flat_ref;
  other.values.back() = 0.9;
  CHECK_THROWS_WITH_AS(vif(flat_ref, other), doctest::Contains("slice 1"), std::invalid_argument);
  CHECK_THROWS_AS(vif_slice(Image(40, 48, 1.0), Image(40, 48, 1.0)), std::invalid_argument);
}

TEST_CASE("noise monotonicity") {
  const auto ref = phantom_volume({3, 64, 64}, 8);
  std::vector<double> p, vv;
  for (double sigma : {0.01, 0.05, 0.1}) {
    std::vector<double> ps, vs;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto t = with_noise(ref, sigma, 100 + seed);
      ps.push_back(psnr(ref, t));
      vs.push_back(vif(ref, t));
    }
    p.push_back(median5(ps));
    vv.push_back(median5(vs));
  }
  CHECK(p[0] > p[1]);
  CHECK(p[1] > p[2]);
  CHECK(vv[0] >= vv[1]);
  CHECK(vv[1] >= vv[2]);
}

TEST_CASE("evaluate_volume") {
  const auto ref = phantom_volume({2, 48, 48}, 10);
  const auto r = evaluate_volume(ref, ref);
  CHECK(std::isinf(r.psnr));
  CHECK(r.nrmse == 0.0);
  CHECK(std::abs(r.ssim - 1) < 1e-6);
  CHECK(std::abs(r.rfsim - 1) < 1e-6);
  CHECK(std::abs(r.vif - 1) < 1e-6);
  CHECK(r.to_json()["psnr_db"] == "inf");
  CHECK(r.fingerprint.size() == 16);
  CHECK(r.to_json()["constants"]["rfsim_c"] == 0.01);

  const auto noisy = with_noise(ref, 0.03, 11);
  CHECK(evaluate_volume(ref, noisy).to_json().dump() == evaluate_volume(ref, noisy).to_json().dump());
  MetricConstants k;
  k.canny_sigma = 2.0;
  CHECK(k.fingerprint() != MetricConstants{}.fingerprint());
  CHECK(r.ssim_per_slice.size() == 2);
}
