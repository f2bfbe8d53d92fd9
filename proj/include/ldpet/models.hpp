#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ldpet/tensor.hpp"

namespace ldpet {

struct NamedParameter {
  std::string name;
  Tensor32 value;
};

/// Anything with an ordered list of named trainable tensors.
class ParameterSet {
 public:
  std::vector<NamedParameter>& named_parameters() { return params_; }
  const std::vector<NamedParameter>& named_parameters() const { return params_; }
  std::vector<Tensor32> parameters() const;

 protected:
  Tensor32& add_parameter(std::string name, Shape shape);

  std::vector<NamedParameter> params_;
};

std::size_t count_parameters(const ParameterSet& model);

// ---------------------------------------------------------------------------
// Generator

enum class GeneratorVariant { hybrid, pure2d, pure3d };

std::string to_string(GeneratorVariant v);
GeneratorVariant parse_generator_variant(const std::string& name);

/// Residual link: the (post-ReLU) output of `source` is added to the
/// pre-activation of layer `target`. Layer 0 denotes the network input.
struct SkipLink {
  int source = 0;
  int target = 10;
  bool operator==(const SkipLink&) const = default;
};

struct GeneratorConfig {
  GeneratorVariant variant = GeneratorVariant::hybrid;
  std::size_t channels = 32;
  std::size_t depth_window = 9;
  std::size_t kernel = 3;
  std::vector<SkipLink> skip_plan = default_skip_plan();

  /// input->L10, L2->L8, L4->L6.
  static std::vector<SkipLink> default_skip_plan();
  /// Every mirrored pair Lk -> L(10-k), k = 0..4.
  static std::vector<SkipLink> full_skip_plan();
  /// Reference defaults per variant (48 channels for pure2d).
  static GeneratorConfig for_variant(GeneratorVariant v);
};

/// Static description of one generator layer.
struct LayerSpec {
  bool transposed = false;
  int dims = 3;
  bool padded = true;
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
};

/// Ten-layer encoder/decoder with mirrored residual links. Outer layers are
/// zero-padded; the six inner layers are unpadded. In the hybrid variant the
/// inner layers run per axial slice in 2D between a z-split and a z-concat.
class Generator : public ParameterSet {
 public:
  explicit Generator(GeneratorConfig config);

  const GeneratorConfig& config() const { return config_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }

  /// [B, 1, 9, H, W] -> [B, 1, 9, H, W], nonnegative.
  Tensor32 forward(const Tensor32& batch) const;

  /// Spatial extents (H, W) after each layer for an H x W input slice.
  std::vector<std::size_t> width_trace(std::size_t width) const;

 private:
  GeneratorConfig config_;
  std::vector<LayerSpec> layers_;
};

/// Builds the layer schedule and Xavier-uniform initialises it from `seed`.
Generator build_generator(const GeneratorConfig& config, std::uint64_t seed);

Tensor32 generator_forward(const Generator& gen, const Tensor32& batch);

/// [B, C, 9, H, W] -> nine [B, C, H, W] slices.
std::vector<Tensor32> split_z(const Tensor32& x, std::size_t expected_depth = 9);
Tensor32 concat_z(const std::vector<Tensor32>& slices, std::size_t expected_depth = 9);

// ---------------------------------------------------------------------------
// Discriminator

struct DiscriminatorConfig {
  std::array<std::size_t, 4> conv_channels{64, 128, 256, 512};
  std::size_t hidden = 1024;
  std::size_t kernel = 3;
  std::size_t stride = 2;
  float slope = 0.2f;
  /// Input geometry (depth, height, width) the dense layer is sized for.
  std::array<std::size_t, 3> input_dims{9, 64, 64};
};

/// Four stride-2 zero-padded 3D convolutions, then two dense layers. No
/// terminal activation: the output is an unbounded critic score.
class Discriminator : public ParameterSet {
 public:
  explicit Discriminator(DiscriminatorConfig config);

  const DiscriminatorConfig& config() const { return config_; }
  std::size_t flatten_size() const { return flatten_size_; }

  /// [B, 1, D, H, W] -> [B, 1]
  Tensor32 forward(const Tensor32& batch) const;

 private:
  DiscriminatorConfig config_;
  std::size_t flatten_size_ = 0;
};

Discriminator build_discriminator(const DiscriminatorConfig& config, std::uint64_t seed);
Tensor32 discriminator_forward(const Discriminator& d, const Tensor32& batch);

/// Xavier-uniform fill of a kernel/weight tensor: U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
void xavier_uniform(Tensor32& weight, std::uint64_t seed);

}  // namespace ldpet
