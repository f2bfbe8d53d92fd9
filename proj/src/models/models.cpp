#include "ldpet/models.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "ldpet/ops.hpp"
#include "ldpet/random.hpp"

namespace ldpet {

std::vector<Tensor32> ParameterSet::parameters() const {
  std::vector<Tensor32> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

Tensor32& ParameterSet::add_parameter(std::string name, Shape shape) {
  Tensor32 t(std::move(shape), 0.0f);
  t.set_requires_grad(true);
  params_.push_back({std::move(name), t});
  return params_.back().value;
}

std::size_t count_parameters(const ParameterSet& model) {
  std::size_t n = 0;
  for (const auto& p : model.named_parameters()) n += p.value.numel();
  return n;
}

void xavier_uniform(Tensor32& weight, std::uint64_t seed) {
  const auto& s = weight.shape();
  std::size_t receptive = 1;
  for (std::size_t i = 2; i < s.size(); ++i) receptive *= s[i];
  const double fan_out = double(s[0]) * double(receptive);
  const double fan_in = double(s.size() > 1 ? s[1] : 1) * double(receptive);
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& v : weight.mutable_data()) v = float(dist(rng));
}

// ---------------------------------------------------------------------------
// Generator

std::string to_string(GeneratorVariant v) {
  switch (v) {
    case GeneratorVariant::hybrid: return "hybrid";
    case GeneratorVariant::pure2d: return "pure2d";
    case GeneratorVariant::pure3d: return "pure3d";
  }
  return "?";
}

GeneratorVariant parse_generator_variant(const std::string& name) {
  if (name == "hybrid") return GeneratorVariant::hybrid;
  if (name == "pure2d") return GeneratorVariant::pure2d;
  if (name == "pure3d") return GeneratorVariant::pure3d;
  throw std::invalid_argument("unknown generator variant '" + name +
                              "' (expected hybrid, pure2d or pure3d)");
}

std::vector<SkipLink> GeneratorConfig::default_skip_plan() { return {{0, 10}, {2, 8}, {4, 6}}; }

std::vector<SkipLink> GeneratorConfig::full_skip_plan() {
  return {{0, 10}, {1, 9}, {2, 8}, {3, 7}, {4, 6}};
}

GeneratorConfig GeneratorConfig::for_variant(GeneratorVariant v) {
  GeneratorConfig c;
  c.variant = v;
  c.channels = v == GeneratorVariant::pure2d ? 48 : 32;
  return c;
}

namespace {

std::vector<LayerSpec> layer_schedule(const GeneratorConfig& c) {
  const int inner_dims = c.variant == GeneratorVariant::pure3d ? 3 : 2;
  const int outer_dims = c.variant == GeneratorVariant::pure2d ? 2 : 3;
  std::vector<LayerSpec> layers;
  for (int k = 1; k <= 10; ++k) {
    LayerSpec L;
    L.transposed = k > 5;
    const bool outer = k <= 2 || k >= 9;
    L.dims = outer ? outer_dims : inner_dims;
    L.padded = outer;
    L.in_ch = k == 1 ? 1 : c.channels;
    L.out_ch = k == 10 ? 1 : c.channels;
    layers.push_back(L);
  }
  return layers;
}

// Output geometry of every layer relative to the input: channels, depth and width change.
struct Signature {
  std::size_t channels;
  long depth_delta;
  long width_delta;
  bool operator==(const Signature&) const = default;
};

std::vector<Signature> signatures(const std::vector<LayerSpec>& layers, std::size_t kernel) {
  std::vector<Signature> sig{{1, 0, 0}};
  for (const auto& L : layers) {
    Signature s = sig.back();
    s.channels = L.out_ch;
    const long step = L.padded ? 0 : long(kernel) - 1;
    const long d = L.transposed ? step : -step;
    s.width_delta += d;
    if (L.dims == 3) s.depth_delta += d;
    sig.push_back(s);
  }
  return sig;
}

std::string nominal_shape(const Signature& s, std::size_t depth) {
  std::ostringstream os;
  os << "[B, " << s.channels << ", " << long(depth) + s.depth_delta << ", " << 64 + s.width_delta
     << ", " << 64 + s.width_delta << "]";
  return os.str();
}

}  // namespace

Generator::Generator(GeneratorConfig config) : config_(std::move(config)) {
  if (config_.channels == 0) throw std::invalid_argument("generator: channels must be positive");
  if (config_.kernel == 0 || config_.kernel % 2 == 0) {
    throw std::invalid_argument("generator: kernel must be odd and positive");
  }
  if (config_.depth_window == 0) throw std::invalid_argument("generator: depth window must be positive");
  if (config_.variant == GeneratorVariant::hybrid && config_.depth_window != 9) {
    throw std::invalid_argument("generator: the hybrid variant splits exactly 9 slices");
  }
  layers_ = layer_schedule(config_);

  const auto sig = signatures(layers_, config_.kernel);
  for (const auto& link : config_.skip_plan) {
    if (link.source < 0 || link.target > 10 || link.source >= link.target || link.target < 1) {
      throw std::invalid_argument("generator: skip link " + std::to_string(link.source) + "->" +
                                  std::to_string(link.target) + " is not a forward link");
    }
    if (!(sig[std::size_t(link.source)] == sig[std::size_t(link.target)])) {
      throw std::invalid_argument(
          "generator: skip link L" + std::to_string(link.source) + "->L" +
          std::to_string(link.target) + " pairs incompatible shapes " +
          nominal_shape(sig[std::size_t(link.source)], config_.depth_window) + " and " +
          nominal_shape(sig[std::size_t(link.target)], config_.depth_window) +
          " (for a 64x64 input)");
    }
  }
  if (sig.back().depth_delta + long(config_.depth_window) <= 0) {
    throw std::invalid_argument("generator: depth window too small for the unpadded 3D layers");
  }

  const std::size_t k = config_.kernel;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& L = layers_[i];
    Shape kshape = L.transposed ? Shape{L.in_ch, L.out_ch} : Shape{L.out_ch, L.in_ch};
    for (int d = 0; d < L.dims; ++d) kshape.push_back(k);
    const std::string prefix = "layer" + std::to_string(i + 1);
    add_parameter(prefix + ".kernel", kshape);
    add_parameter(prefix + ".bias", Shape{L.out_ch});
  }
}

std::vector<std::size_t> Generator::width_trace(std::size_t width) const {
  std::vector<std::size_t> trace{width};
  long w = long(width);
  for (const auto& L : layers_) {
    const long step = L.padded ? 0 : long(config_.kernel) - 1;
    w += L.transposed ? step : -step;
    trace.push_back(std::size_t(std::max(0L, w)));
  }
  return trace;
}

namespace {

// Activations travel either as one volume or as per-slice 2D tensors.
struct Activation {
  bool sliced = false;
  Tensor32 volume;
  std::vector<Tensor32> slices;
};

Activation to_sliced(const Activation& a) {
  if (a.sliced) return a;
  Activation out;
  out.sliced = true;
  out.slices = split_z(a.volume, a.volume.dim(2));
  return out;
}

Activation to_volume(const Activation& a) {
  if (!a.sliced) return a;
  Activation out;
  out.volume = concat_z(a.slices, a.slices.size());
  return out;
}

Activation add_into(const Activation& a, const Activation& skip) {
  Activation out = a;
  if (a.sliced) {
    const Activation s = to_sliced(skip);
    for (std::size_t z = 0; z < out.slices.size(); ++z) out.slices[z] = add(a.slices[z], s.slices[z]);
  } else {
    out.volume = add(a.volume, to_volume(skip).volume);
  }
  return out;
}

Activation apply_relu(const Activation& a) {
  Activation out = a;
  if (a.sliced) {
    for (auto& s : out.slices) s = relu(s);
  } else {
    out.volume = relu(a.volume);
  }
  return out;
}

}  // namespace

Tensor32 Generator::forward(const Tensor32& batch) const {
  if (batch.rank() != 5 || batch.dim(1) != 1) {
    throw ShapeError("generator: input must be [B, 1, D, H, W], got " + shape_str(batch.shape()));
  }
  if (batch.dim(2) != config_.depth_window) {
    throw ShapeError("generator: input depth must be exactly " +
                     std::to_string(config_.depth_window) + ", got " + std::to_string(batch.dim(2)));
  }
  const std::size_t min_extent = 3 * (config_.kernel - 1) + 1;
  if (batch.dim(3) < min_extent || batch.dim(4) < min_extent) {
    throw ShapeError("generator: H and W must be at least " + std::to_string(min_extent) + ", got " +
                     shape_str(batch.shape()));
  }

  std::vector<Activation> outputs(layers_.size() + 1);
  outputs[0].volume = batch;
  Activation current = outputs[0];
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& L = layers_[i];
    const Tensor32& kernel = params_[2 * i].value;
    const Tensor32& bias = params_[2 * i + 1].value;
    const Padding pad = L.padded ? Padding::zero : Padding::none;
    auto op = [&](const Tensor32& x) {
      return L.transposed ? deconv_forward(x, kernel, bias, 1, pad)
                          : conv_forward(x, kernel, bias, 1, pad);
    };

    Activation pre;
    if (L.dims == 2) {
      current = to_sliced(current);
      pre.sliced = true;
      for (const auto& s : current.slices) pre.slices.push_back(op(s));
      const bool leaving_2d = i + 1 == layers_.size() || layers_[i + 1].dims == 3;
      if (leaving_2d) pre = to_volume(pre);
    } else {
      current = to_volume(current);
      pre.volume = op(current.volume);
    }
    for (const auto& link : config_.skip_plan) {
      if (std::size_t(link.target) == i + 1) pre = add_into(pre, outputs[std::size_t(link.source)]);
    }
    current = apply_relu(pre);
    outputs[i + 1] = current;
  }
  return to_volume(current).volume;
}

Generator build_generator(const GeneratorConfig& config, std::uint64_t seed) {
  Generator gen(config);
  auto& params = gen.named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].value.rank() > 1) xavier_uniform(params[i].value, derive_seed(seed, i));
  }
  return gen;
}

Tensor32 generator_forward(const Generator& gen, const Tensor32& batch) { return gen.forward(batch); }

std::vector<Tensor32> split_z(const Tensor32& x, std::size_t expected_depth) {
  if (x.rank() != 5 || x.dim(2) != expected_depth) {
    throw ShapeError("split_z: expected depth " + std::to_string(expected_depth) + ", got " +
                     shape_str(x.shape()));
  }
  std::vector<Tensor32> slices;
  slices.reserve(expected_depth);
  for (std::size_t z = 0; z < expected_depth; ++z) slices.push_back(slice_depth(x, z));
  return slices;
}

Tensor32 concat_z(const std::vector<Tensor32>& slices, std::size_t expected_depth) {
  if (slices.size() != expected_depth) {
    throw ShapeError("concat_z: expected " + std::to_string(expected_depth) + " slices, got " +
                     std::to_string(slices.size()));
  }
  return stack_depth(slices);
}

// ---------------------------------------------------------------------------
// Discriminator

Discriminator::Discriminator(DiscriminatorConfig config) : config_(config) {
  std::array<std::size_t, 3> dims = config_.input_dims;
  std::size_t in_ch = 1;
  const std::size_t k = config_.kernel;
  const std::size_t pad = (k - 1) / 2;
  for (std::size_t i = 0; i < config_.conv_channels.size(); ++i) {
    const std::size_t out_ch = config_.conv_channels[i];
    add_parameter("conv" + std::to_string(i + 1) + ".kernel", Shape{out_ch, in_ch, k, k, k});
    add_parameter("conv" + std::to_string(i + 1) + ".bias", Shape{out_ch});
    for (auto& d : dims) {
      if (d + 2 * pad < k) throw std::invalid_argument("discriminator: input too small");
      d = (d + 2 * pad - k) / config_.stride + 1;
    }
    in_ch = out_ch;
  }
  flatten_size_ = in_ch * dims[0] * dims[1] * dims[2];
  add_parameter("dense1.weight", Shape{config_.hidden, flatten_size_});
  add_parameter("dense1.bias", Shape{config_.hidden});
  add_parameter("dense2.weight", Shape{1, config_.hidden});
  add_parameter("dense2.bias", Shape{1});
}

Tensor32 Discriminator::forward(const Tensor32& batch) const {
  if (batch.rank() != 5 || batch.dim(1) != 1) {
    throw ShapeError("discriminator: input must be [B, 1, D, H, W], got " +
                     shape_str(batch.shape()));
  }
  Tensor32 h = batch;
  std::size_t p = 0;
  for (std::size_t i = 0; i < config_.conv_channels.size(); ++i, p += 2) {
    h = leaky_relu(conv_forward(h, params_[p].value, params_[p + 1].value, config_.stride,
                                Padding::zero),
                   config_.slope);
  }
  const std::size_t flat = h.numel() / h.dim(0);
  if (flat != flatten_size_) {
    throw ShapeError("discriminator: flattened features have size " + std::to_string(flat) +
                     " but the dense layer expects " + std::to_string(flatten_size_));
  }
  h = reshape(h, Shape{h.dim(0), flat});
  h = leaky_relu(dense_forward(h, params_[p].value, params_[p + 1].value), config_.slope);
  return dense_forward(h, params_[p + 2].value, params_[p + 3].value);
}

Discriminator build_discriminator(const DiscriminatorConfig& config, std::uint64_t seed) {
  Discriminator d(config);
  auto& params = d.named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].value.rank() > 1) xavier_uniform(params[i].value, derive_seed(seed, i));
  }
  return d;
}

Tensor32 discriminator_forward(const Discriminator& d, const Tensor32& batch) {
  return d.forward(batch);
}

}  // namespace ldpet
