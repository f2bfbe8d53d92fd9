#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ldpet/adam.hpp"
#include "ldpet/data.hpp"
#include "ldpet/losses.hpp"
#include "ldpet/models.hpp"

namespace ldpet {

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct CheckpointParam {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// Ordered named parameters plus provenance. The provenance carries the model
/// kind ("generator" / "discriminator"), its architecture and how it was trained.
struct Checkpoint {
  std::uint32_t version = kCheckpointFormatVersion;
  std::vector<CheckpointParam> params;
  nlohmann::json provenance = nlohmann::json::object();

  std::string model_kind() const;
  std::size_t parameter_count() const;
};

Checkpoint make_checkpoint(const ParameterSet& model, nlohmann::json provenance);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies the checkpoint's values into `model` bit for bit. Throws
/// std::invalid_argument naming the first parameter whose name or shape differs.
void init_from_checkpoint(ParameterSet& model, const Checkpoint& ckpt);

nlohmann::json generator_config_to_json(const GeneratorConfig& config);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);
/// Rebuilds the generator described by the provenance and loads its weights.
Generator generator_from_checkpoint(const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Configuration and logs

enum class TrainPhase { pretrain, wgan };
enum class PretrainLoss { mse, ssim, perceptual };

std::string to_string(TrainPhase p);
std::string to_string(PretrainLoss l);
TrainPhase parse_train_phase(const std::string& s);
PretrainLoss parse_pretrain_loss(const std::string& s);

struct TrainConfig {
  TrainPhase phase = TrainPhase::pretrain;
  PretrainLoss pretrain_loss = PretrainLoss::mse;
  GeneratorConfig generator;
  /// Generator initialisation: Xavier when empty, else this checkpoint.
  std::optional<std::filesystem::path> init_checkpoint;
  AdamHyper adam;
  std::size_t batch_size = 8;
  std::size_t epochs = 30;
  /// Patches consumed by the generator per epoch; one step uses batch_size of them.
  std::size_t patches_per_epoch = 800;
  std::size_t d_steps_per_g_step = 4;
  LossWeights weights;
  Dims3 patch{9, 32, 32};
  /// Fixed batch, drawn once, on which validation MSE is logged.
  std::size_t validation_patches = 8;
  std::uint64_t seed = 0;
  bool deterministic = true;

  std::size_t steps_per_epoch() const;
  std::size_t total_steps() const { return epochs * steps_per_epoch(); }
  void validate() const;
  nlohmann::json to_json() const;

  /// Desk-scale defaults: full-length epoch counts and learning rates over
  /// short epochs of small patches. `transfer` selects the transfer-phase values.
  static TrainConfig desk(TrainPhase phase, bool transfer = false);
  /// Batch 80, 9x64x64 patches, 169k patches per epoch.
  static TrainConfig paper_scale(TrainPhase phase, bool transfer = false);
};

struct StepRecord {
  std::size_t index = 0;  // position in the log, monotone
  std::string kind;       // "pretrain", "d" or "g"
  std::size_t g_step = 0;
  double loss = 0;
  double mse = 0;          // g / pretrain steps
  double wasserstein = 0;  // d steps: E[D(real)] - E[D(fake)]
  double penalty = 0;      // d steps
  bool operator==(const StepRecord&) const = default;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  /// Validation MSE at step 0 and after every epoch.
  std::vector<double> validation_mse;
  std::vector<double> epoch_seconds;
  std::size_t g_steps = 0;
  std::size_t d_steps = 0;
  bool diverged = false;
  std::string divergence_reason;

  /// Timings are excluded: they are the only non-reproducible part.
  nlohmann::json to_json(bool with_timing = false) const;
};

/// Normalised training pairs and the scale that normalised them.
struct TrainingSet {
  std::vector<VolumePair> pairs;
  double intensity_scale = 1.0;

  /// Divides every member by the max over the normal-dose volumes.
  static TrainingSet from_raw(const std::vector<VolumePair>& raw);
};

struct TrainResult {
  Checkpoint generator;
  Checkpoint discriminator;  // empty for pretraining
  TrainLog log;
};

/// Called with the generator checkpoint at every epoch boundary.
using EpochCallback = std::function<void(std::size_t epoch, const Checkpoint&)>;

/// Trains the generator alone on MSE, SSIM or perceptual loss.
TrainResult pretrain_generator(const TrainConfig& config, const TrainingSet& data,
                               const EpochCallback& on_epoch = {});

/// 4:1 WGAN-GP loop from the given networks. On a non-finite loss or gradient
/// the loop stops before applying the update, so the returned checkpoints hold
/// the last finite parameters.
TrainResult train_wgan(const TrainConfig& config, const TrainingSet& data, Generator generator,
                       Discriminator discriminator, const EpochCallback& on_epoch = {});

/// Generator per config: Xavier from the seed, or the init checkpoint.
Generator initial_generator(const TrainConfig& config);
DiscriminatorConfig discriminator_config_for(const TrainConfig& config);
/// Xavier discriminator sized for the config's patches.
Discriminator initial_discriminator(const TrainConfig& config);

// ---------------------------------------------------------------------------
// Inference

struct DenoiseOptions {
  std::size_t stride_z = 1;
  /// Square spatial tile edge; 0 processes whole slices.
  std::size_t spatial_tile = 0;
  std::size_t tile_overlap = 8;
};

/// Sliding depth-9 windows (the last window is always aligned to the end),
/// spatial tiling when requested, uniform averaging of overlaps. Values are
/// taken as they are, i.e. already normalised.
Volume denoise_volume(const Generator& gen, const Volume& volume, const DenoiseOptions& options = {});

/// Normalises raw values by `scale`, denoises and restores raw units.
Volume denoise_raw(const Generator& gen, const Volume& raw, double scale,
                   const DenoiseOptions& options = {});

}  // namespace ldpet
