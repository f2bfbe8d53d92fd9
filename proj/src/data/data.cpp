#include "ldpet/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <stdexcept>
#include <system_error>

#include "ldpet/random.hpp"

static_assert(std::endian::native == std::endian::little, "PVOL I/O assumes a little-endian host");

namespace ldpet {

Volume::Volume(Dims3 d, double fill) : dims(d), values(d[0] * d[1] * d[2], fill) {}

double Volume::min() const { return *std::min_element(values.begin(), values.end()); }
double Volume::max() const { return *std::max_element(values.begin(), values.end()); }

void Volume::validate() const {
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0) throw std::invalid_argument("volume: dims must be positive");
  if (values.size() != numel()) {
    throw std::invalid_argument("volume: buffer holds " + std::to_string(values.size()) +
                                " values but dims need " + std::to_string(numel()));
  }
  if (!(intensity_scale > 0) || !std::isfinite(intensity_scale)) {
    throw std::invalid_argument("volume: intensity_scale must be positive");
  }
}

// ---------------------------------------------------------------------------
// Phantom

namespace {

bool inside(const Ellipsoid& e, double z, double y, double x) {
  const double dz = (z - e.center[0]) / e.radii[0];
  const double dy = (y - e.center[1]) / e.radii[1];
  const double dx = (x - e.center[2]) / e.radii[2];
  return dz * dz + dy * dy + dx * dx <= 1.0;
}

void check_ellipsoid(const Ellipsoid& e, const Dims3& dims, const std::string& what) {
  static const char* axis[] = {"z", "y", "x"};
  for (int a = 0; a < 3; ++a) {
    if (!(e.radii[a] > 0)) throw std::invalid_argument(what + ": radius along " + axis[a] + " must be positive");
    const double lo = e.center[a] - e.radii[a], hi = e.center[a] + e.radii[a];
    if (lo < -0.5 - 1e-9 || hi > double(dims[a]) - 0.5 + 1e-9) {
      throw std::invalid_argument(what + " extends outside the volume along " + axis[a] + " ([" +
                                  std::to_string(lo) + ", " + std::to_string(hi) + "] vs [-0.5, " +
                                  std::to_string(double(dims[a]) - 0.5) + "])");
    }
  }
  if (!(e.uptake >= 0)) throw std::invalid_argument(what + ": uptake must be >= 0");
}

// Shift a centre by up to `jitter` per axis while keeping the ellipsoid inside.
Ellipsoid jittered(Ellipsoid e, const Dims3& dims, double jitter, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-jitter, jitter);
  for (int a = 0; a < 3; ++a) {
    const double lo = e.radii[a] - 0.5, hi = double(dims[a]) - 0.5 - e.radii[a];
    e.center[a] = std::clamp(e.center[a] + u(rng), std::min(lo, e.center[a]), std::max(hi, e.center[a]));
  }
  return e;
}

}  // namespace

PhantomSpec PhantomSpec::standard(Dims3 dims) {
  const double D = double(dims[0]), H = double(dims[1]), W = double(dims[2]);
  const double cz = (D - 1) / 2, cy = (H - 1) / 2, cx = (W - 1) / 2;
  PhantomSpec s;
  s.dims = dims;
  s.body = {{cz, cy, cx}, {D / 2, 0.36 * H, 0.44 * W}, 1.0};
  s.organs = {
      {{cz, cy + 0.02 * H, cx - 0.16 * W}, {0.35 * D, 0.16 * H, 0.18 * W}, 2.0},         // liver
      {{cz, cy + 0.05 * H, cx + 0.22 * W}, {0.25 * D, 0.08 * H, 0.07 * W}, 1.8},         // spleen
      {{cz + 0.15 * D, cy + 0.18 * H, cx - 0.13 * W}, {0.22 * D, 0.06 * H, 0.05 * W}, 3.0},
      {{cz + 0.15 * D, cy + 0.18 * H, cx + 0.13 * W}, {0.22 * D, 0.06 * H, 0.05 * W}, 3.0},
      {{cz - 0.25 * D, cy - 0.10 * H, cx + 0.05 * W}, {0.20 * D, 0.10 * H, 0.10 * W}, 4.0},  // heart
  };
  return s;
}

void PhantomSpec::validate() const {
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0) throw std::invalid_argument("phantom: dims must be positive");
  check_ellipsoid(body, dims, "phantom body");
  for (std::size_t i = 0; i < organs.size(); ++i) check_ellipsoid(organs[i], dims, "phantom organ " + std::to_string(i));
  if (!(lesions.radius_min > 0) || lesions.radius_max < lesions.radius_min) {
    throw std::invalid_argument("phantom: lesion radii need 0 < min <= max");
  }
  const double smallest = double(std::min({dims[0], dims[1], dims[2]}));
  if (lesions.count > 0 && 2 * lesions.radius_max > smallest) {
    throw std::invalid_argument("phantom: lesions do not fit inside the volume");
  }
  if (!(lesions.multiplier >= 0)) throw std::invalid_argument("phantom: lesion multiplier must be >= 0");
  if (!(organ_jitter >= 0) || !(texture_sigma >= 0) || !(texture_amplitude >= 0) || !(psf_sigma >= 0)) {
    throw std::invalid_argument("phantom: jitter, texture and PSF parameters must be >= 0");
  }
}

Volume generate_phantom(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  const Dims3 dims = spec.dims;
  Volume v(dims, 0.0);
  std::mt19937_64 layout_rng(derive_seed(seed, 1));

  std::vector<Ellipsoid> organs;
  for (const auto& o : spec.organs) organs.push_back(jittered(o, dims, spec.organ_jitter, layout_rng));

  std::vector<int> region(v.numel(), -1);  // -1 outside, 0 body, k+1 organ k
  for (std::size_t z = 0; z < dims[0]; ++z)
    for (std::size_t y = 0; y < dims[1]; ++y)
      for (std::size_t x = 0; x < dims[2]; ++x) {
        const std::size_t i = v.index(z, y, x);
        if (!inside(spec.body, double(z), double(y), double(x))) continue;
        region[i] = 0;
        v.values[i] = spec.body.uptake;
        for (std::size_t k = 0; k < organs.size(); ++k) {
          if (inside(organs[k], double(z), double(y), double(x))) {
            region[i] = int(k) + 1;
            v.values[i] = organs[k].uptake;
          }
        }
      }

  if (spec.texture_amplitude > 0) {
    std::mt19937_64 tex_rng(derive_seed(seed, 2));
    std::normal_distribution<double> n01(0.0, 1.0);
    Volume field(dims);
    for (auto& f : field.values) f = n01(tex_rng);
    field = gaussian_blur(field, spec.texture_sigma);
    double m = 0, m2 = 0;
    for (double f : field.values) m += f;
    m /= double(field.numel());
    for (double f : field.values) m2 += (f - m) * (f - m);
    const double sd = std::sqrt(m2 / double(field.numel()));
    for (std::size_t i = 0; i < v.numel(); ++i) {
      if (region[i] < 0) continue;
      const double t = sd > 0 ? (field.values[i] - m) / sd : 0.0;
      v.values[i] *= std::max(0.0, 1.0 + spec.texture_amplitude * t);
    }
  }

  if (spec.lesions.count > 0) {
    std::mt19937_64 les_rng(derive_seed(seed, 3));
    std::uniform_real_distribution<double> radius(spec.lesions.radius_min, spec.lesions.radius_max);
    for (std::size_t l = 0; l < spec.lesions.count; ++l) {
      const Ellipsoid& host =
          organs.empty() ? spec.body
                         : organs[std::uniform_int_distribution<std::size_t>(0, organs.size() - 1)(les_rng)];
      const double r = radius(les_rng);
      // Rejection-sample a centre inside the host that keeps the sphere inside the volume.
      std::array<double, 3> c{};
      for (int attempt = 0; attempt < 1000; ++attempt) {
        bool ok = true;
        for (int a = 0; a < 3; ++a) {
          std::uniform_real_distribution<double> u(host.center[a] - host.radii[a], host.center[a] + host.radii[a]);
          c[a] = u(les_rng);
          ok = ok && c[a] - r >= -0.5 && c[a] + r <= double(dims[a]) - 0.5;
        }
        if (ok && inside(host, c[0], c[1], c[2])) break;
        if (attempt == 999) c = host.center;
      }
      for (std::size_t z = 0; z < dims[0]; ++z)
        for (std::size_t y = 0; y < dims[1]; ++y)
          for (std::size_t x = 0; x < dims[2]; ++x) {
            const double dz = double(z) - c[0], dy = double(y) - c[1], dx = double(x) - c[2];
            const std::size_t i = v.index(z, y, x);
            if (region[i] >= 0 && dz * dz + dy * dy + dx * dx <= r * r) v.values[i] *= spec.lesions.multiplier;
          }
    }
  }

  v.provenance = {{"kind", "phantom"}, {"seed", seed}};
  return v;
}

Volume gaussian_blur(const Volume& v, double sigma) {
  if (sigma <= 0) return v;
  const long radius = long(std::ceil(3 * sigma));
  std::vector<double> k(std::size_t(2 * radius + 1));
  double total = 0;
  for (long i = -radius; i <= radius; ++i) {
    k[std::size_t(i + radius)] = std::exp(-double(i * i) / (2 * sigma * sigma));
    total += k[std::size_t(i + radius)];
  }
  for (auto& w : k) w /= total;

  Volume out = v;
  std::vector<double> line;
  for (int axis = 0; axis < 3; ++axis) {
    const std::size_t n = v.dims[std::size_t(axis)];
    const std::size_t stride = axis == 0 ? v.dims[1] * v.dims[2] : axis == 1 ? v.dims[2] : 1;
    const std::size_t lines = v.numel() / n;
    line.resize(n);
    for (std::size_t l = 0; l < lines; ++l) {
      // Base offset of line l: enumerate the other two axes.
      std::size_t base;
      if (axis == 0) base = l;
      else if (axis == 1) base = (l / v.dims[2]) * v.dims[1] * v.dims[2] + l % v.dims[2];
      else base = l * v.dims[2];
      for (std::size_t i = 0; i < n; ++i) line[i] = out.values[base + i * stride];
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0;
        for (long j = -radius; j <= radius; ++j) {
          const long src = std::clamp<long>(long(i) + j, 0, long(n) - 1);
          acc += k[std::size_t(j + radius)] * line[std::size_t(src)];
        }
        out.values[base + i * stride] = acc;
      }
    }
  }
  return out;
}

Volume simulate_acquisition(const Volume& activity, double dose_fraction, std::uint64_t seed,
                            const AcquisitionModel& model) {
  activity.validate();
  if (!(dose_fraction > 0 && dose_fraction <= 1)) {
    throw std::invalid_argument("dose fraction must lie in (0, 1], got " + std::to_string(dose_fraction));
  }
  if (!(model.sensitivity > 0)) throw std::invalid_argument("sensitivity must be positive");
  const double gain = dose_fraction * model.sensitivity;
  std::mt19937_64 rng(derive_seed(seed, 4));
  Volume counts = activity;
  for (double& a : counts.values) {
    if (a < 0) throw std::invalid_argument("activity must be nonnegative");
    const double mean = a * gain;
    a = mean > 0 ? double(std::poisson_distribution<long long>(mean)(rng)) / gain : 0.0;
  }
  Volume out = gaussian_blur(counts, model.psf_sigma);
  out.provenance = {{"kind", "acquisition"},
                    {"dose_fraction", dose_fraction},
                    {"sensitivity", model.sensitivity},
                    {"psf_sigma", model.psf_sigma},
                    {"seed", seed}};
  return out;
}

// ---------------------------------------------------------------------------
// Normalisation and patches

double normalization_scale(const std::vector<VolumePair>& training) {
  if (training.empty()) throw std::invalid_argument("normalization scale needs at least one pair");
  double m = 0;
  for (const auto& p : training) m = std::max(m, p.normal.max());
  if (!(m > 0)) throw std::invalid_argument("normal-dose volumes have no positive intensity");
  return m;
}

Volume normalize(const Volume& v, double scale) {
  if (!(scale > 0) || !std::isfinite(scale)) throw std::invalid_argument("normalization scale must be positive");
  Volume out = v;
  for (double& x : out.values) x /= scale;
  out.intensity_scale = scale;
  return out;
}

Volume denormalize(const Volume& v, double scale) {
  if (!(scale > 0) || !std::isfinite(scale)) throw std::invalid_argument("normalization scale must be positive");
  Volume out = v;
  for (double& x : out.values) x *= scale;
  out.intensity_scale = 1.0;
  return out;
}

VolumePair normalize_pair(const VolumePair& pair, double scale) {
  if (pair.low.dims != pair.normal.dims) throw std::invalid_argument("pair members differ in dims");
  return {normalize(pair.low, scale), normalize(pair.normal, scale)};
}

Tensor32 crop(const Volume& v, Dims3 corner, Dims3 size) {
  for (int a = 0; a < 3; ++a) {
    if (corner[std::size_t(a)] + size[std::size_t(a)] > v.dims[std::size_t(a)]) {
      throw std::invalid_argument("crop exceeds the volume along axis " + std::to_string(a));
    }
  }
  std::vector<float> out(size[0] * size[1] * size[2]);
  std::size_t k = 0;
  for (std::size_t z = 0; z < size[0]; ++z)
    for (std::size_t y = 0; y < size[1]; ++y)
      for (std::size_t x = 0; x < size[2]; ++x)
        out[k++] = float(v.at(corner[0] + z, corner[1] + y, corner[2] + x));
  return Tensor32(Shape{1, size[0], size[1], size[2]}, std::move(out));
}

namespace {

Dims3 random_corner(const Dims3& dims, const Dims3& size, std::mt19937_64& rng) {
  Dims3 c{};
  for (std::size_t a = 0; a < 3; ++a) c[a] = std::uniform_int_distribution<std::size_t>(0, dims[a] - size[a])(rng);
  return c;
}

void check_patch_size(const Dims3& dims, const Dims3& size) {
  for (std::size_t a = 0; a < 3; ++a) {
    if (size[a] == 0 || size[a] > dims[a]) {
      throw std::invalid_argument("patch size " + std::to_string(size[0]) + "x" + std::to_string(size[1]) + "x" +
                                  std::to_string(size[2]) + " does not fit a volume of " +
                                  std::to_string(dims[0]) + "x" + std::to_string(dims[1]) + "x" +
                                  std::to_string(dims[2]));
    }
  }
}

}  // namespace

std::vector<PatchPair> extract_patches(const VolumePair& pair, std::size_t count, Dims3 size,
                                       std::uint64_t seed) {
  if (pair.low.dims != pair.normal.dims) throw std::invalid_argument("pair members differ in dims");
  check_patch_size(pair.normal.dims, size);
  std::mt19937_64 rng(derive_seed(seed, 5));
  std::vector<PatchPair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const Dims3 c = random_corner(pair.normal.dims, size, rng);
    out.push_back({crop(pair.low, c, size), crop(pair.normal, c, size), c});
  }
  return out;
}

PatchSampler::PatchSampler(const std::vector<VolumePair>* pairs, Dims3 size, std::uint64_t seed)
    : pairs_(pairs), size_(size), seed_(seed) {
  if (pairs_ == nullptr || pairs_->empty()) throw std::invalid_argument("patch sampler: dataset is empty");
  for (const auto& p : *pairs_) {
    if (p.low.dims != p.normal.dims) throw std::invalid_argument("pair members differ in dims");
    check_patch_size(p.normal.dims, size_);
  }
}

std::pair<Tensor32, Tensor32> PatchSampler::next_batch(std::size_t batch) {
  if (batch == 0) throw std::invalid_argument("batch size must be >= 1");
  const std::size_t n = size_[0] * size_[1] * size_[2];
  std::vector<float> low(batch * n), normal(batch * n);
  for (std::size_t b = 0; b < batch; ++b) {
    // Each draw has its own stream, so the sequence does not depend on batching.
    std::mt19937_64 rng(derive_seed(seed_, drawn_++));
    const auto& pair = (*pairs_)[std::uniform_int_distribution<std::size_t>(0, pairs_->size() - 1)(rng)];
    const Dims3 c = random_corner(pair.normal.dims, size_, rng);
    const Tensor32 l = crop(pair.low, c, size_), r = crop(pair.normal, c, size_);
    std::copy(l.data().begin(), l.data().end(), low.begin() + std::ptrdiff_t(b * n));
    std::copy(r.data().begin(), r.data().end(), normal.begin() + std::ptrdiff_t(b * n));
  }
  const Shape shape{batch, 1, size_[0], size_[1], size_[2]};
  return {Tensor32(shape, std::move(low)), Tensor32(shape, std::move(normal))};
}

// ---------------------------------------------------------------------------
// PVOL

namespace {

constexpr char kMagic[4] = {'P', 'V', 'O', 'L'};
constexpr std::size_t kHeaderBytes = 16;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(in[offset + std::size_t(i)]) << (8 * i);
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_volume(const Volume& v) {
  v.validate();
  const nlohmann::json header = {{"dims", v.dims},
                                 {"spacing_mm", v.spacing_mm},
                                 {"intensity_scale", v.intensity_scale},
                                 {"provenance", v.provenance}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kVolumeFormatVersion);
  put_u32(out, 0);
  put_u32(out, std::uint32_t(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  const std::size_t payload = out.size();
  out.resize(payload + v.numel() * 4);
  for (std::size_t i = 0; i < v.numel(); ++i) {
    const float f = float(v.values[i]);
    std::memcpy(out.data() + payload + 4 * i, &f, 4);
  }
  return out;
}

Volume decode_volume(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kHeaderBytes) {
    throw FormatError("PVOL: truncated header: expected at least 16 bytes, got " + std::to_string(bytes.size()));
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("PVOL: bad magic at offset 0");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kVolumeFormatVersion) {
    throw FormatError("PVOL: unsupported version " + std::to_string(version) + " (reader supports " +
                             std::to_string(kVolumeFormatVersion) + ")");
  }
  const std::size_t json_len = get_u32(bytes, 12);
  if (bytes.size() < kHeaderBytes + json_len) {
    throw FormatError("PVOL: truncated JSON header at offset 16: expected " + std::to_string(json_len) +
                             " bytes, got " + std::to_string(bytes.size() - kHeaderBytes));
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + kHeaderBytes, bytes.begin() + std::ptrdiff_t(kHeaderBytes + json_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("PVOL: corrupted JSON header: ") + e.what());
  }
  Volume v;
  try {
    const auto dims = header.at("dims");
    if (!dims.is_array() || dims.size() != 3) throw FormatError("PVOL: dims must be three integers");
    std::size_t total = 1;
    for (std::size_t a = 0; a < 3; ++a) {
      const auto d = dims[a].get<std::int64_t>();
      if (d <= 0) throw FormatError("PVOL: dims must be positive");
      if (std::uint64_t(d) > (std::numeric_limits<std::uint64_t>::max() / 4) / total) {
        throw FormatError("PVOL: dimension overflow");
      }
      v.dims[a] = std::size_t(d);
      total *= std::size_t(d);
    }
    v.spacing_mm = header.at("spacing_mm").get<std::array<double, 3>>();
    v.intensity_scale = header.at("intensity_scale").get<double>();
    v.provenance = header.value("provenance", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("PVOL: corrupted header: ") + e.what());
  }
  const std::size_t payload = kHeaderBytes + json_len;
  const std::size_t expected = v.numel() * 4;
  if (bytes.size() - payload != expected) {
    throw FormatError("PVOL: payload at offset " + std::to_string(payload) + " should hold " +
                             std::to_string(expected) + " bytes for dims " + std::to_string(v.dims[0]) + "x" +
                             std::to_string(v.dims[1]) + "x" + std::to_string(v.dims[2]) + ", got " +
                             std::to_string(bytes.size() - payload));
  }
  v.values.resize(v.numel());
  for (std::size_t i = 0; i < v.numel(); ++i) {
    float f;
    std::memcpy(&f, bytes.data() + payload + 4 * i, 4);
    v.values[i] = f;
  }
  if (!(v.intensity_scale > 0)) throw FormatError("PVOL: intensity_scale must be positive");
  return v;
}

void write_volume(const Volume& v, const std::filesystem::path& path) {
  const auto bytes = encode_volume(v);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::system_error(errno, std::generic_category(), "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw std::system_error(errno, std::generic_category(), "write failed: " + path.string());
}

Volume read_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::system_error(errno, std::generic_category(), "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_volume(bytes);
}

}  // namespace ldpet
