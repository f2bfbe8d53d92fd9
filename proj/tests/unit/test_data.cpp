#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <random>

#include "ldpet/data.hpp"

using namespace ldpet;

namespace {

double interior_variance(const Volume& v, std::size_t margin) {
  double m = 0, m2 = 0;
  std::size_t n = 0;
  for (std::size_t z = margin; z + margin < v.dims[0]; ++z)
    for (std::size_t y = margin; y + margin < v.dims[1]; ++y)
      for (std::size_t x = margin; x + margin < v.dims[2]; ++x) {
        m += v.at(z, y, x);
        m2 += v.at(z, y, x) * v.at(z, y, x);
        ++n;
      }
  m /= double(n);
  return m2 / double(n) - m * m;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

Volume ramp(Dims3 dims) {
  Volume v(dims);
  for (std::size_t i = 0; i < v.numel(); ++i) v.values[i] = double(float(0.001 * double(i) + 0.37));
  return v;
}

}  // namespace

TEST_CASE("bare phantom is a uniform ellipsoid") {
  auto spec = PhantomSpec::standard({8, 32, 32});
  spec.organs.clear();
  spec.lesions.count = 0;
  spec.texture_amplitude = 0;
  const auto v = generate_phantom(spec, 3);
  std::size_t inside = 0;
  for (std::size_t z = 0; z < 8; ++z)
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) {
        const double dz = (double(z) - spec.body.center[0]) / spec.body.radii[0];
        const double dy = (double(y) - spec.body.center[1]) / spec.body.radii[1];
        const double dx = (double(x) - spec.body.center[2]) / spec.body.radii[2];
        const bool in = dz * dz + dy * dy + dx * dx <= 1.0;
        CHECK(v.at(z, y, x) == (in ? 1.0 : 0.0));
        inside += in;
      }
  CHECK(inside > 0);
}

TEST_CASE("phantom determinism and coverage") {
  const auto spec = PhantomSpec::standard();
  const auto a = generate_phantom(spec, 5);
  const auto b = generate_phantom(spec, 5);
  const auto c = generate_phantom(spec, 6);
  CHECK(a.values == b.values);
  CHECK(a.values != c.values);
  CHECK(a.min() >= 0.0);
  for (std::size_t z = 0; z < a.dims[0]; ++z) {
    double slice_max = 0;
    for (std::size_t y = 0; y < a.dims[1]; ++y)
      for (std::size_t x = 0; x < a.dims[2]; ++x) slice_max = std::max(slice_max, a.at(z, y, x));
    CHECK(slice_max > 0);
  }
}

TEST_CASE("lesions are hotter than their surroundings") {
  auto spec = PhantomSpec::standard();
  spec.lesions.count = 6;
  auto plain = spec;
  plain.lesions.count = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto with = generate_phantom(spec, seed);
    const auto without = generate_phantom(plain, seed);
    // Layout and texture come from separate streams, so the difference is the lesions.
    std::vector<char> lesion(with.numel(), 0);
    double lm = 0;
    std::size_t ln = 0;
    for (std::size_t i = 0; i < with.numel(); ++i) {
      if (with.values[i] != without.values[i]) {
        lesion[i] = 1;
        lm += with.values[i];
        ++ln;
      }
    }
    REQUIRE(ln > 0);
    double sm = 0;
    std::size_t sn = 0;
    const long r = 3;
    for (std::size_t z = 0; z < with.dims[0]; ++z)
      for (std::size_t y = 0; y < with.dims[1]; ++y)
        for (std::size_t x = 0; x < with.dims[2]; ++x) {
          const std::size_t i = with.index(z, y, x);
          if (lesion[i] || with.values[i] == 0) continue;
          bool near = false;
          for (long dz = -r; dz <= r && !near; ++dz)
            for (long dy = -r; dy <= r && !near; ++dy)
              for (long dx = -r; dx <= r && !near; ++dx) {
                const long zz = long(z) + dz, yy = long(y) + dy, xx = long(x) + dx;
                if (zz < 0 || yy < 0 || xx < 0 || zz >= long(with.dims[0]) || yy >= long(with.dims[1]) ||
                    xx >= long(with.dims[2]))
                  continue;
                near = lesion[with.index(std::size_t(zz), std::size_t(yy), std::size_t(xx))];
              }
          if (near) {
            sm += with.values[i];
            ++sn;
          }
        }
    REQUIRE(sn > 0);
    CHECK(lm / double(ln) > sm / double(sn));
  }
}

TEST_CASE("phantom spec validation") {
  auto spec = PhantomSpec::standard({8, 32, 32});
  spec.organs.push_back({{4, 30, 16}, {2, 5, 5}, 1.0});
  CHECK_THROWS_AS(generate_phantom(spec, 1), std::invalid_argument);
  spec = PhantomSpec::standard({8, 32, 32});
  spec.organs[0].uptake = -1;
  CHECK_THROWS_AS(generate_phantom(spec, 1), std::invalid_argument);
}

TEST_CASE("acquisition basics") {
  const Volume zero({4, 8, 8}, 0.0);
  const auto out = simulate_acquisition(zero, 0.2, 1);
  for (double v : out.values) CHECK(v == 0.0);
  CHECK_THROWS_AS(simulate_acquisition(zero, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(simulate_acquisition(zero, 1.5, 1), std::invalid_argument);
  Volume neg({1, 2, 2}, 1.0);
  neg.values[0] = -1;
  CHECK_THROWS_AS(simulate_acquisition(neg, 0.5, 1), std::invalid_argument);
}

TEST_CASE("Poisson moments") {
  // Mean count 10 per voxel, no blur, 10^4 voxels.
  const double lambda = 10.0;
  AcquisitionModel model;
  model.psf_sigma = 0;
  const Volume activity({1, 100, 100}, lambda / model.sensitivity);
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto out = simulate_acquisition(activity, 1.0, seed, model);
    double m = 0, m2 = 0;
    for (double v : out.values) {
      const double counts = v * model.sensitivity;
      CHECK(std::abs(counts - std::round(counts)) < 1e-9);
      m += counts;
      m2 += counts * counts;
    }
    m /= 1e4;
    const double var = m2 / 1e4 - m * m;
    CHECK(m / lambda >= 0.98);
    CHECK(m / lambda <= 1.02);
    CHECK(var / lambda >= 0.9);
    CHECK(var / lambda <= 1.1);
  }
}

TEST_CASE("dose scaling of noise variance") {
  const Volume activity({12, 40, 40}, 1.0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const double full = interior_variance(simulate_acquisition(activity, 1.0, seed), 3);
    const double low = interior_variance(simulate_acquisition(activity, 0.2, seed + 100), 3);
    CHECK(low / full >= 4.0);
    CHECK(low / full <= 6.0);
  }
  std::vector<double> medians;
  for (double dose : {0.1, 0.2, 0.5, 1.0}) {
    std::vector<double> vars;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      vars.push_back(interior_variance(simulate_acquisition(activity, dose, seed), 3));
    }
    medians.push_back(median(vars));
  }
  for (std::size_t i = 1; i < medians.size(); ++i) CHECK(medians[i] < medians[i - 1]);
}

TEST_CASE("normalisation") {
  VolumePair p{ramp({4, 6, 6}), ramp({4, 6, 6})};
  for (double& v : p.low.values) v *= 1.3;
  const double s = normalization_scale({p});
  CHECK(s == p.normal.max());
  const auto n = normalize_pair(p, s);
  CHECK(n.normal.max() == 1.0);
  CHECK(n.low.max() > 1.0);
  CHECK(n.low.intensity_scale == s);
  // Exact at the f32 storage precision.
  const auto back = denormalize(n.normal, s);
  for (std::size_t i = 0; i < back.numel(); ++i) CHECK(float(back.values[i]) == float(p.normal.values[i]));
  CHECK_THROWS_AS(normalize(p.low, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(denormalize(p.low, -1.0), std::invalid_argument);
}

TEST_CASE("patch extraction") {
  const VolumePair whole{ramp({9, 64, 64}), ramp({9, 64, 64})};
  const auto one = extract_patches(whole, 1, {9, 64, 64}, 3);
  REQUIRE(one.size() == 1);
  for (std::size_t i = 0; i < whole.normal.numel(); ++i) CHECK(one[0].normal[i] == float(whole.normal.values[i]));

  VolumePair p{ramp({12, 40, 40}), ramp({12, 40, 40})};
  for (double& v : p.low.values) v = -v;
  const Dims3 size{9, 16, 16};
  const auto patches = extract_patches(p, 10000, size, 7);
  for (const auto& pp : patches) {
    CHECK(pp.corner[0] + size[0] <= 12);
    CHECK(pp.corner[1] + size[1] <= 40);
    CHECK(pp.corner[2] + size[2] <= 40);
  }
  for (std::size_t k = 0; k < 20; ++k) {
    const auto& pp = patches[k];
    const auto re_low = crop(p.low, pp.corner, size);
    const auto re_normal = crop(p.normal, pp.corner, size);
    CHECK(std::equal(pp.low.data().begin(), pp.low.data().end(), re_low.data().begin()));
    CHECK(std::equal(pp.normal.data().begin(), pp.normal.data().end(), re_normal.data().begin()));
    CHECK(pp.low[0] == -pp.normal[0]);
  }
  const auto again = extract_patches(p, 20, size, 7);
  for (std::size_t k = 0; k < 20; ++k) CHECK(again[k].corner == patches[k].corner);
  CHECK_THROWS_AS(extract_patches(p, 1, {13, 8, 8}, 1), std::invalid_argument);
}

TEST_CASE("patch sampler is independent of batching") {
  const std::vector<VolumePair> pairs{{ramp({10, 20, 20}), ramp({10, 20, 20})},
                                      {ramp({10, 24, 24}), ramp({10, 24, 24})}};
  PatchSampler a(&pairs, {9, 8, 8}, 11), b(&pairs, {9, 8, 8}, 11);
  const auto [l1, n1] = a.next_batch(3);
  const auto [l2, n2] = a.next_batch(2);
  const auto [l, n] = b.next_batch(5);
  CHECK(l.shape() == Shape{5, 1, 9, 8, 8});
  CHECK(std::equal(l1.data().begin(), l1.data().end(), l.data().begin()));
  CHECK(std::equal(l2.data().begin(), l2.data().end(), l.data().begin() + 3 * 576));
  CHECK(std::equal(n2.data().begin(), n2.data().end(), n.data().begin() + 3 * 576));
  const std::vector<VolumePair> empty;
  CHECK_THROWS_AS(PatchSampler(&empty, {9, 8, 8}, 1), std::invalid_argument);
}

TEST_CASE("PVOL round trip and rejection") {
  Volume v = ramp({3, 5, 7});
  v.intensity_scale = 2.5;
  v.provenance = {{"kind", "test"}};
  const auto bytes = encode_volume(v);
  CHECK(bytes.size() == 16 + std::size_t(bytes[12] | bytes[13] << 8) + 105 * 4);
  const auto back = decode_volume(bytes);
  CHECK(back.dims == v.dims);
  CHECK(back.values == v.values);
  CHECK(back.intensity_scale == 2.5);
  CHECK(back.provenance == v.provenance);
  CHECK(encode_volume(back) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "ldpet_test_volume.pvol";
  write_volume(v, path);
  CHECK(encode_volume(read_volume(path)) == bytes);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_volume(path), std::system_error);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_volume(bad), FormatError);
  bad = bytes;
  bad[4] = 2;
  CHECK_THROWS_WITH_AS(decode_volume(bad), doctest::Contains("version 2"), FormatError);
  bad = bytes;
  bad.pop_back();
  CHECK_THROWS_WITH_AS(decode_volume(bad), doctest::Contains("420"), FormatError);
  CHECK_THROWS_AS(decode_volume(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 10)), FormatError);
  bad = bytes;
  bad[16] = '#';
  CHECK_THROWS_AS(decode_volume(bad), FormatError);

  Volume big = v;
  big.dims = {3, 5, 8};
  big.values.resize(3 * 5 * 8, 0.0);
  auto mismatched = encode_volume(big);
  mismatched.resize(mismatched.size() - 4 * 5);
  CHECK_THROWS_AS(decode_volume(mismatched), FormatError);

  // Absurd dims must not allocate.
  nlohmann::json h = {{"dims", {1ll << 40, 1ll << 40, 1ll << 40}},
                      {"spacing_mm", {1, 1, 1}},
                      {"intensity_scale", 1.0}};
  const std::string text = h.dump();
  std::vector<std::uint8_t> huge{'P', 'V', 'O', 'L', 1, 0, 0, 0, 0, 0, 0, 0};
  for (int i = 0; i < 4; ++i) huge.push_back(std::uint8_t(text.size() >> (8 * i)));
  huge.insert(huge.end(), text.begin(), text.end());
  CHECK_THROWS_WITH_AS(decode_volume(huge), doctest::Contains("overflow"), FormatError);
}
