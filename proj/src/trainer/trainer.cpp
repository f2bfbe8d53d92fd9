#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <exception>
#include <memory>
#include <mutex>
#include <thread>

#include "ldpet/ops.hpp"
#include "ldpet/random.hpp"
#include "ldpet/trainer.hpp"

namespace ldpet {

namespace {

// Seed streams of the master seed.
constexpr std::uint64_t kGeneratorInit = 0x6e4;
constexpr std::uint64_t kDiscriminatorInit = 0xd15c;
constexpr std::uint64_t kTrainBatches = 0xba7c;
constexpr std::uint64_t kValidationBatch = 0x7a1;
constexpr std::uint64_t kInterpolation = 0x1e9;

// Producer thread filling a bounded queue. Batch order is the sampler's
// order, so timing never changes what the loop sees.
class BatchStream {
 public:
  BatchStream(const std::vector<VolumePair>* pairs, Dims3 size, std::uint64_t seed, std::size_t batch,
              std::size_t capacity = 4)
      : sampler_(pairs, size, seed), batch_(batch), capacity_(capacity) {
    worker_ = std::thread([this] { run(); });
  }

  ~BatchStream() {
    {
      std::lock_guard lock(mutex_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }

  BatchStream(const BatchStream&) = delete;
  BatchStream& operator=(const BatchStream&) = delete;

  std::pair<Tensor32, Tensor32> next() {
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [this] { return !queue_.empty() || error_; });
    if (queue_.empty()) std::rethrow_exception(error_);
    auto b = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return b;
  }

 private:
  void run() {
    try {
      for (;;) {
        {
          std::unique_lock lock(mutex_);
          cv_.wait(lock, [this] { return stop_ || queue_.size() < capacity_; });
          if (stop_) return;
        }
        auto b = sampler_.next_batch(batch_);
        std::lock_guard lock(mutex_);
        queue_.push_back(std::move(b));
        cv_.notify_all();
      }
    } catch (...) {
      std::lock_guard lock(mutex_);
      error_ = std::current_exception();
      cv_.notify_all();
    }
  }

  PatchSampler sampler_;
  std::size_t batch_;
  std::size_t capacity_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<std::pair<Tensor32, Tensor32>> queue_;
  bool stop_ = false;
  std::exception_ptr error_;
  std::thread worker_;
};

bool all_finite(const GradientMap<float>& grads, const std::vector<Tensor32>& params) {
  for (const auto& p : params) {
    for (float g : grads.at(p).data()) {
      if (!std::isfinite(g)) return false;
    }
  }
  return true;
}

void require_data(const TrainingSet& data, const TrainConfig& config) {
  if (data.pairs.empty()) throw std::invalid_argument("training set is empty");
  for (const auto& p : data.pairs) {
    if (p.low.dims != p.normal.dims) throw std::invalid_argument("training pair members differ in dims");
    for (int a = 0; a < 3; ++a) {
      if (p.normal.dims[a] < config.patch[a]) {
        throw std::invalid_argument("training volume is smaller than the patch along axis " + std::to_string(a));
      }
    }
  }
}

double validation_mse(const Generator& g, const std::pair<Tensor32, Tensor32>& batch) {
  NoGradGuard guard;
  return double(mse_loss(g.forward(batch.first), batch.second).item());
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

nlohmann::json discriminator_config_to_json(const DiscriminatorConfig& c) {
  return {{"conv_channels", c.conv_channels}, {"hidden", c.hidden},         {"kernel", c.kernel},
          {"stride", c.stride},               {"slope", double(c.slope)},  {"input_dims", c.input_dims}};
}

nlohmann::json base_provenance(const TrainConfig& config, const TrainingSet& data, const TrainLog& log) {
  return {{"phase", to_string(config.phase)},
          {"config", config.to_json()},
          {"seed", config.seed},
          {"intensity_scale", data.intensity_scale},
          {"epochs_completed", log.epoch_seconds.size()},
          {"g_steps", log.g_steps},
          {"d_steps", log.d_steps},
          {"diverged", log.diverged},
          {"init", config.init_checkpoint ? config.init_checkpoint->string() : std::string("xavier")}};
}

Checkpoint generator_checkpoint(const Generator& g, const TrainConfig& config, const TrainingSet& data,
                                const TrainLog& log, const std::string& extractor) {
  auto prov = base_provenance(config, data, log);
  prov["model"] = "generator";
  prov["generator"] = generator_config_to_json(g.config());
  prov["loss"] = config.phase == TrainPhase::pretrain ? to_string(config.pretrain_loss) : std::string("adv+mse");
  if (!extractor.empty()) prov["extractor"] = extractor;
  return make_checkpoint(g, std::move(prov));
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(TrainPhase p) { return p == TrainPhase::pretrain ? "pretrain" : "wgan"; }

std::string to_string(PretrainLoss l) {
  switch (l) {
    case PretrainLoss::mse: return "mse";
    case PretrainLoss::ssim: return "ssim";
    case PretrainLoss::perceptual: return "perceptual";
  }
  return "?";
}

TrainPhase parse_train_phase(const std::string& s) {
  if (s == "pretrain") return TrainPhase::pretrain;
  if (s == "wgan") return TrainPhase::wgan;
  throw std::invalid_argument("unknown phase '" + s + "' (expected pretrain or wgan)");
}

PretrainLoss parse_pretrain_loss(const std::string& s) {
  if (s == "mse") return PretrainLoss::mse;
  if (s == "ssim") return PretrainLoss::ssim;
  if (s == "perceptual") return PretrainLoss::perceptual;
  throw std::invalid_argument("unknown pretraining loss '" + s + "' (expected mse, ssim or perceptual)");
}

std::size_t TrainConfig::steps_per_epoch() const {
  return batch_size == 0 ? 0 : (patches_per_epoch + batch_size - 1) / batch_size;
}

void TrainConfig::validate() const {
  if (!(adam.lr > 0) || !std::isfinite(adam.lr)) throw std::invalid_argument("adam learning rate must be > 0");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1)) {
    throw std::invalid_argument("adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0)) throw std::invalid_argument("adam epsilon must be > 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (d_steps_per_g_step < 1) throw std::invalid_argument("d_steps_per_g_step must be >= 1");
  if (patches_per_epoch < 1) throw std::invalid_argument("patches_per_epoch must be >= 1");
  if (validation_patches < 1) throw std::invalid_argument("validation_patches must be >= 1");
  if (patch[0] != generator.depth_window) {
    throw std::invalid_argument("patch depth " + std::to_string(patch[0]) + " must equal the generator window " +
                                std::to_string(generator.depth_window));
  }
  weights.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"phase", to_string(phase)},
          {"pretrain_loss", to_string(pretrain_loss)},
          {"generator", generator_config_to_json(generator)},
          {"init", init_checkpoint ? init_checkpoint->string() : std::string("xavier")},
          {"adam", {{"lr", adam.lr}, {"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"patches_per_epoch", patches_per_epoch},
          {"steps_per_epoch", steps_per_epoch()},
          {"d_steps_per_g_step", d_steps_per_g_step},
          {"lambda_gp", weights.lambda_gp},
          {"lambda_m", std::isinf(weights.lambda_m) ? nlohmann::json("inf") : nlohmann::json(weights.lambda_m)},
          {"patch", patch},
          {"validation_patches", validation_patches},
          {"seed", seed},
          {"deterministic", deterministic}};
}

TrainConfig TrainConfig::desk(TrainPhase phase, bool transfer) {
  TrainConfig c;
  c.phase = phase;
  c.adam.lr = transfer ? 1e-5 : 1e-4;
  // Full-length epoch counts; desk epochs are short (800 patches).
  c.epochs = phase == TrainPhase::pretrain ? 30 : (transfer ? 10 : 40);
  return c;
}

TrainConfig TrainConfig::paper_scale(TrainPhase phase, bool transfer) {
  TrainConfig c = desk(phase, transfer);
  c.batch_size = 80;
  c.patch = {9, 64, 64};
  c.patches_per_epoch = 169000;
  return c;
}

nlohmann::json TrainLog::to_json(bool with_timing) const {
  nlohmann::json steps_j = nlohmann::json::array();
  for (const auto& s : steps) {
    nlohmann::json j = {{"index", s.index}, {"kind", s.kind}, {"g_step", s.g_step}, {"loss", s.loss}};
    if (s.kind == "d") {
      j["wasserstein"] = s.wasserstein;
      j["penalty"] = s.penalty;
    } else {
      j["mse"] = s.mse;
    }
    steps_j.push_back(std::move(j));
  }
  nlohmann::json out = {{"steps", steps_j},
                        {"validation_mse", validation_mse},
                        {"g_steps", g_steps},
                        {"d_steps", d_steps},
                        {"diverged", diverged},
                        {"divergence_reason", divergence_reason}};
  if (with_timing) out["epoch_seconds"] = epoch_seconds;
  return out;
}

TrainingSet TrainingSet::from_raw(const std::vector<VolumePair>& raw) {
  if (raw.empty()) throw std::invalid_argument("training set is empty");
  TrainingSet set;
  set.intensity_scale = normalization_scale(raw);
  for (const auto& p : raw) set.pairs.push_back(normalize_pair(p, set.intensity_scale));
  return set;
}

Generator initial_generator(const TrainConfig& config) {
  Generator g = build_generator(config.generator, derive_seed(config.seed, kGeneratorInit));
  if (config.init_checkpoint) {
    const Checkpoint ckpt = load_checkpoint(*config.init_checkpoint);
    if (ckpt.model_kind() != "generator") {
      throw std::invalid_argument(config.init_checkpoint->string() + " holds a " + ckpt.model_kind() +
                                  ", not a generator");
    }
    init_from_checkpoint(g, ckpt);
  }
  return g;
}

DiscriminatorConfig discriminator_config_for(const TrainConfig& config) {
  DiscriminatorConfig d;
  d.input_dims = {config.patch[0], config.patch[1], config.patch[2]};
  return d;
}

Discriminator initial_discriminator(const TrainConfig& config) {
  return build_discriminator(discriminator_config_for(config), derive_seed(config.seed, kDiscriminatorInit));
}

TrainResult pretrain_generator(const TrainConfig& config, const TrainingSet& data, const EpochCallback& on_epoch) {
  config.validate();
  if (config.phase != TrainPhase::pretrain) throw std::invalid_argument("pretrain_generator needs phase=pretrain");
  require_data(data, config);

  Generator g = initial_generator(config);
  auto params = g.parameters();
  AdamState<float> state(params, config.adam);
  std::unique_ptr<RandomConvPyramid<float>> extractor;
  if (config.pretrain_loss == PretrainLoss::perceptual) extractor = std::make_unique<RandomConvPyramid<float>>();
  const std::string extractor_id = extractor ? extractor->id() : "";

  const auto val = PatchSampler(&data.pairs, config.patch, derive_seed(config.seed, kValidationBatch))
                       .next_batch(config.validation_patches);
  TrainResult result;
  TrainLog& log = result.log;
  log.validation_mse.push_back(validation_mse(g, val));

  BatchStream stream(&data.pairs, config.patch, derive_seed(config.seed, kTrainBatches), config.batch_size);
  for (std::size_t epoch = 0; epoch < config.epochs && !log.diverged; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t s = 0; s < config.steps_per_epoch(); ++s) {
      const auto [low, normal] = stream.next();
      const Tensor32 out = g.forward(low);
      Tensor32 loss;
      switch (config.pretrain_loss) {
        case PretrainLoss::mse: loss = mse_loss(out, normal); break;
        case PretrainLoss::ssim: loss = ssim_loss(out, normal); break;
        case PretrainLoss::perceptual: loss = perceptual_loss(out, normal, *extractor); break;
      }
      double mse;
      {
        NoGradGuard guard;
        mse = double(mse_loss(out.detach(), normal).item());
      }
      const double value = double(loss.item());
      const auto grads = backward(loss, params);
      if (!std::isfinite(value) || !all_finite(grads, params)) {
        log.diverged = true;
        log.divergence_reason = "non-finite pretraining loss or gradient at step " + std::to_string(log.g_steps);
        break;
      }
      adam_step(params, grads, state);
      log.steps.push_back({log.steps.size(), "pretrain", log.g_steps, value, mse, 0, 0});
      ++log.g_steps;
    }
    if (log.diverged) break;
    log.validation_mse.push_back(validation_mse(g, val));
    log.epoch_seconds.push_back(seconds_since(t0));
    if (on_epoch) on_epoch(epoch + 1, generator_checkpoint(g, config, data, log, extractor_id));
  }
  result.generator = generator_checkpoint(g, config, data, log, extractor_id);
  return result;
}

TrainResult train_wgan(const TrainConfig& config, const TrainingSet& data, Generator g, Discriminator d,
                       const EpochCallback& on_epoch) {
  config.validate();
  if (config.phase != TrainPhase::wgan) throw std::invalid_argument("train_wgan needs phase=wgan");
  require_data(data, config);
  if (d.config().input_dims != std::array<std::size_t, 3>{config.patch[0], config.patch[1], config.patch[2]}) {
    throw std::invalid_argument("discriminator input geometry does not match the patch size");
  }

  auto g_params = g.parameters();
  auto d_params = d.parameters();
  AdamState<float> g_state(g_params, config.adam);
  AdamState<float> d_state(d_params, config.adam);
  const Critic<float> critic = [&d](const Tensor32& x) { return d.forward(x); };
  const std::uint64_t interp_seed = derive_seed(config.seed, kInterpolation);

  const auto val = PatchSampler(&data.pairs, config.patch, derive_seed(config.seed, kValidationBatch))
                       .next_batch(config.validation_patches);
  TrainResult result;
  TrainLog& log = result.log;
  log.validation_mse.push_back(validation_mse(g, val));

  auto diverge = [&log](const std::string& why) {
    log.diverged = true;
    log.divergence_reason = why;
  };

  BatchStream stream(&data.pairs, config.patch, derive_seed(config.seed, kTrainBatches), config.batch_size);
  for (std::size_t epoch = 0; epoch < config.epochs && !log.diverged; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t s = 0; s < config.steps_per_epoch() && !log.diverged; ++s) {
      for (std::size_t k = 0; k < config.d_steps_per_g_step; ++k) {
        const auto [low, normal] = stream.next();
        Tensor32 fake;
        {
          NoGradGuard guard;
          fake = g.forward(low);
        }
        const Tensor32 v_hat = interpolate_samples(fake, normal, derive_seed(interp_seed, log.d_steps));
        const Tensor32 gap = wasserstein_gap(critic, fake, normal);
        const Tensor32 penalty = gradient_penalty(critic, v_hat, config.weights.lambda_gp);
        const Tensor32 loss = add(gap, penalty);
        const double value = double(loss.item());
        const auto grads = backward(loss, d_params);
        if (!std::isfinite(value) || !all_finite(grads, d_params)) {
          diverge("non-finite discriminator loss or gradient at D step " + std::to_string(log.d_steps));
          break;
        }
        adam_step(d_params, grads, d_state);
        log.steps.push_back({log.steps.size(), "d", log.g_steps, value, 0, -double(gap.item()),
                             double(penalty.item())});
        ++log.d_steps;
      }
      if (log.diverged) break;

      const auto [low, normal] = stream.next();
      const Tensor32 out = g.forward(low);
      const Tensor32 loss = generator_loss(critic, out, normal, config.weights);
      double mse;
      {
        NoGradGuard guard;
        mse = double(mse_loss(out.detach(), normal).item());
      }
      const double value = double(loss.item());
      const auto grads = backward(loss, g_params);
      if (!std::isfinite(value) || !all_finite(grads, g_params)) {
        diverge("non-finite generator loss or gradient at G step " + std::to_string(log.g_steps));
        break;
      }
      adam_step(g_params, grads, g_state);
      log.steps.push_back({log.steps.size(), "g", log.g_steps, value, mse, 0, 0});
      ++log.g_steps;
    }
    if (log.diverged) break;
    log.validation_mse.push_back(validation_mse(g, val));
    log.epoch_seconds.push_back(seconds_since(t0));
    if (on_epoch) on_epoch(epoch + 1, generator_checkpoint(g, config, data, log, ""));
  }

  result.generator = generator_checkpoint(g, config, data, log, "");
  auto d_prov = base_provenance(config, data, log);
  d_prov["model"] = "discriminator";
  d_prov["discriminator"] = discriminator_config_to_json(d.config());
  result.discriminator = make_checkpoint(d, std::move(d_prov));
  return result;
}

// ---------------------------------------------------------------------------
// Inference

namespace {

// Window starts covering [0, extent) with the last window flush with the end.
std::vector<std::size_t> window_starts(std::size_t extent, std::size_t window, std::size_t stride) {
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + window <= extent; s += stride) starts.push_back(s);
  if (starts.empty() || starts.back() + window != extent) starts.push_back(extent - window);
  return starts;
}

}  // namespace

Volume denoise_volume(const Generator& gen, const Volume& volume, const DenoiseOptions& options) {
  volume.validate();
  const std::size_t depth = gen.config().depth_window;
  const auto [D, H, W] = volume.dims;
  if (D < depth) {
    throw std::invalid_argument("denoise: volume depth " + std::to_string(D) + " is below the window depth " +
                                std::to_string(depth));
  }
  if (options.stride_z < 1) throw std::invalid_argument("denoise: stride_z must be >= 1");
  std::size_t th = H, tw = W, step_y = H, step_x = W;
  if (options.spatial_tile > 0) {
    if (options.spatial_tile <= options.tile_overlap) {
      throw std::invalid_argument("denoise: spatial tile must exceed its overlap");
    }
    if (options.tile_overlap < 8) throw std::invalid_argument("denoise: tile overlap must be >= 8 voxels");
    th = std::min(H, options.spatial_tile);
    tw = std::min(W, options.spatial_tile);
    step_y = step_x = options.spatial_tile - options.tile_overlap;
  }
  const auto zs = window_starts(D, depth, options.stride_z);
  const auto ys = window_starts(H, th, step_y);
  const auto xs = window_starts(W, tw, step_x);

  std::vector<double> sum(volume.numel(), 0.0);
  std::vector<std::uint32_t> hits(volume.numel(), 0);
  NoGradGuard guard;
  for (std::size_t z0 : zs)
    for (std::size_t y0 : ys)
      for (std::size_t x0 : xs) {
        const Tensor32 tile = crop(volume, {z0, y0, x0}, {depth, th, tw});
        const Tensor32 out = gen.forward(reshape(tile, {1, 1, depth, th, tw}));
        const auto o = out.data();
        for (std::size_t z = 0; z < depth; ++z)
          for (std::size_t y = 0; y < th; ++y)
            for (std::size_t x = 0; x < tw; ++x) {
              const std::size_t i = volume.index(z0 + z, y0 + y, x0 + x);
              sum[i] += double(o[(z * th + y) * tw + x]);
              ++hits[i];
            }
      }

  Volume out = volume;
  for (std::size_t i = 0; i < out.numel(); ++i) out.values[i] = sum[i] / double(hits[i]);
  return out;
}

Volume denoise_raw(const Generator& gen, const Volume& raw, double scale, const DenoiseOptions& options) {
  Volume out = denormalize(denoise_volume(gen, normalize(raw, scale), options), scale);
  out.provenance = raw.provenance;
  return out;
}

}  // namespace ldpet
