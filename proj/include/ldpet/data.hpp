#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ldpet/tensor.hpp"

namespace ldpet {

/// Malformed PVOL/PTWG content; messages name the offending offset or field.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Dims3 = std::array<std::size_t, 3>;  // (z, y, x)

/// A scalar volume. Values are held in double; the on-disk format is f32.
struct Volume {
  Dims3 dims{1, 1, 1};
  std::array<double, 3> spacing_mm{1.897, 2.734, 2.734};  // (z, y, x)
  /// Multiplying stored values by this gives raw units.
  double intensity_scale = 1.0;
  nlohmann::json provenance = nlohmann::json::object();
  std::vector<double> values;

  Volume() = default;
  Volume(Dims3 dims, double fill = 0.0);

  std::size_t numel() const { return dims[0] * dims[1] * dims[2]; }
  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const {
    return (z * dims[1] + y) * dims[2] + x;
  }
  double& at(std::size_t z, std::size_t y, std::size_t x) { return values[index(z, y, x)]; }
  double at(std::size_t z, std::size_t y, std::size_t x) const { return values[index(z, y, x)]; }
  double min() const;
  double max() const;
  /// Throws unless dims are positive, the buffer matches them and the scale is positive.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Phantom

/// Axis-aligned ellipsoid in voxel coordinates (z, y, x).
struct Ellipsoid {
  std::array<double, 3> center{};
  std::array<double, 3> radii{};
  double uptake = 1.0;
};

struct LesionSpec {
  std::size_t count = 4;
  double radius_min = 1.5;
  double radius_max = 3.0;
  double multiplier = 3.0;
};

struct PhantomSpec {
  Dims3 dims{32, 96, 96};
  Ellipsoid body;
  std::vector<Ellipsoid> organs;
  LesionSpec lesions;
  /// Random shift (voxels, per axis) applied to every organ centre.
  double organ_jitter = 2.0;
  /// Gaussian smoothing (voxels) and relative amplitude of the uptake texture.
  double texture_sigma = 2.5;
  double texture_amplitude = 0.25;
  double psf_sigma = 0.8;

  /// Torso-like default for the given geometry: body spanning every slice,
  /// liver, two kidneys, heart, spleen.
  static PhantomSpec standard(Dims3 dims = {32, 96, 96});
  void validate() const;
};

/// Activity map; zero outside the body. Pure function of (spec, seed).
Volume generate_phantom(const PhantomSpec& spec, std::uint64_t seed);

struct AcquisitionModel {
  /// Counts per unit activity at full dose.
  double sensitivity = 50.0;
  double psf_sigma = 0.8;
};

/// Image-space Poisson count noise at the given dose fraction, rescaled to
/// activity units, then blurred with a Gaussian PSF.
Volume simulate_acquisition(const Volume& activity, double dose_fraction, std::uint64_t seed,
                            const AcquisitionModel& model = {});

/// Separable Gaussian blur with replicated borders, truncated at 3 sigma.
Volume gaussian_blur(const Volume& v, double sigma);

// ---------------------------------------------------------------------------
// Pairs, normalisation, patches

struct VolumePair {
  Volume low;
  Volume normal;
};

/// Max over the normal-dose members; the common normalisation scale.
double normalization_scale(const std::vector<VolumePair>& training);
/// Both members divided by `scale`, which is recorded as their intensity_scale.
VolumePair normalize_pair(const VolumePair& pair, double scale);
Volume normalize(const Volume& v, double scale);
/// Multiplies by `scale`, restoring raw units (intensity_scale becomes 1).
Volume denormalize(const Volume& v, double scale);

struct PatchPair {
  Tensor32 low;     // [1, d, h, w]
  Tensor32 normal;  // [1, d, h, w]
  Dims3 corner{};
};

/// Sub-volume at `corner` as a [1, d, h, w] tensor.
Tensor32 crop(const Volume& v, Dims3 corner, Dims3 size);

/// Uniformly random corners, identical for both members; deterministic per seed.
std::vector<PatchPair> extract_patches(const VolumePair& pair, std::size_t count,
                                       Dims3 size = {9, 64, 64}, std::uint64_t seed = 0);

/// Endless, seed-ordered stream of training batches over several pairs.
class PatchSampler {
 public:
  PatchSampler(const std::vector<VolumePair>* pairs, Dims3 size, std::uint64_t seed);

  /// low and normal batches, each [batch, 1, d, h, w].
  std::pair<Tensor32, Tensor32> next_batch(std::size_t batch);
  Dims3 patch_size() const { return size_; }

 private:
  const std::vector<VolumePair>* pairs_;
  Dims3 size_;
  std::uint64_t seed_;
  std::uint64_t drawn_ = 0;
};

// ---------------------------------------------------------------------------
// PVOL files

inline constexpr std::uint32_t kVolumeFormatVersion = 1;

void write_volume(const Volume& v, const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_volume(const Volume& v);
Volume decode_volume(const std::vector<std::uint8_t>& bytes);

}  // namespace ldpet
