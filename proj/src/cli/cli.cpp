#include "ldpet/cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <regex>
#include <sstream>
#include <system_error>

#include <CLI11.hpp>

#include "ldpet/random.hpp"
#include "ldpet/trainer.hpp"

namespace ldpet::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Missing or malformed input data (exit code 3).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training stopped on a non-finite value; outputs were still written.
struct Diverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

Dims3 parse_dims(const std::string& text, const std::string& what) {
  Dims3 d{};
  std::stringstream ss(text);
  std::string part;
  std::size_t n = 0;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (n == 3 || part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw std::invalid_argument(what + " must be three positive integers 'z,y,x', got '" + text + "'");
    }
    d[n++] = std::stoul(part);
  }
  if (n != 3 || d[0] == 0 || d[1] == 0 || d[2] == 0) {
    throw std::invalid_argument(what + " must be three positive integers 'z,y,x', got '" + text + "'");
  }
  return d;
}

double parse_lambda(const std::string& text) {
  const std::string t = trim(text);
  if (t == "inf" || t == "infinity" || t == "Inf") return LossWeights::mse_only;
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(t, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != t.size()) throw std::invalid_argument("--lambda-m: not a number: '" + text + "'");
  return v;
}

json number_or_inf(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

Volume to_raw(Volume v) {
  if (v.intensity_scale != 1.0) return denormalize(v, v.intensity_scale);
  return v;
}

void write_json(const json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::system_error(errno, std::generic_category(), "cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw std::system_error(errno, std::generic_category(), "write failed: " + path.string());
}

fs::path sibling_manifest(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

// ---------------------------------------------------------------------------
// Manifest

class Manifest {
 public:
  Manifest(std::string command, const std::vector<std::string>& argv) : t0_(Clock::now()) {
    j_["tool"] = "ldpet";
    j_["command"] = std::move(command);
    j_["argv"] = argv;
    j_["options"] = json::object();
    j_["config"] = json::object();
    j_["seeds"] = json::object();
    j_["inputs"] = json::array();
    j_["outputs"] = json::array();
    j_["timings"] = json::object();
    j_["status"] = "running";
  }

  json& operator[](const char* key) { return j_[key]; }
  void input(const fs::path& p) { j_["inputs"].push_back({{"path", p.string()}, {"git_blob", git_blob_hash(p)}}); }
  void output(const fs::path& p) { j_["outputs"].push_back({{"path", p.string()}, {"git_blob", git_blob_hash(p)}}); }
  void timing(const std::string& name, double seconds) { j_["timings"][name] = seconds; }

  void finish(const std::string& status, int exit_code) {
    j_["status"] = status;
    j_["exit_code"] = exit_code;
    j_["timings"]["total_seconds"] = seconds_since(t0_);
  }
  void write(const fs::path& path) const { write_json(j_, path); }

 private:
  Clock::time_point t0_;
  json j_;
};

/// Where the manifest goes and what it says, shared with the error handler.
struct RunState {
  std::optional<Manifest> manifest;
  fs::path manifest_path;
};

// ---------------------------------------------------------------------------
// Config files

void apply_config(CLI::App* sub, const fs::path& path, std::initializer_list<const char*> reserved) {
  for (const auto& [key, value] : read_key_value_file(path)) {
    for (const char* r : reserved) {
      if (key == r) throw std::invalid_argument(path.string() + ": key '" + key + "' is not allowed in a config file");
    }
    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr) {
      throw std::invalid_argument(path.string() + ": unknown key '" + key + "' for command " + sub->get_name());
    }
    if (opt->count() > 0) continue;  // explicit flags win
    opt->add_result(value);
    opt->run_callback();
  }
}

/// Options that were given explicitly or through the config file.
json explicit_options(const CLI::App* sub) {
  json j = json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    if (opt->count() == 0 || opt->get_name().empty()) continue;
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config" || name == "grid") continue;
    const auto& r = opt->results();
    j[name] = r.size() == 1 ? json(r.front()) : json(r);
  }
  return j;
}

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  std::vector<VolumePair> train;
  std::vector<VolumePair> test;
  std::vector<fs::path> files;
};

Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw std::system_error(std::make_error_code(std::errc::no_such_file_or_directory),
                            "data directory " + dir.string());
  }
  static const std::regex name_re(R"((train|test)_(\d+)_(low|normal)\.pvol)");
  std::map<std::pair<std::string, std::size_t>, std::map<std::string, fs::path>> found;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (!std::regex_match(name, m, name_re)) continue;
    found[{m[1].str(), std::stoul(m[2].str())}][m[3].str()] = entry.path();
  }
  Dataset ds;
  for (const auto& [key, members] : found) {
    if (members.size() != 2) {
      const std::string missing = members.count("low") ? "normal" : "low";
      throw IoError(dir.string() + ": " + key.first + " pair " + std::to_string(key.second) + " has no " +
                    missing + "-dose volume");
    }
    VolumePair p{to_raw(read_volume(members.at("low"))), to_raw(read_volume(members.at("normal")))};
    if (p.low.dims != p.normal.dims) {
      throw IoError(dir.string() + ": " + key.first + " pair " + std::to_string(key.second) +
                    " members differ in dims");
    }
    ds.files.push_back(members.at("low"));
    ds.files.push_back(members.at("normal"));
    (key.first == "train" ? ds.train : ds.test).push_back(std::move(p));
  }
  return ds;
}

TrainingSet training_set(const Dataset& ds, const fs::path& dir) {
  if (ds.train.empty()) throw IoError(dir.string() + ": no train_NNN_low/normal.pvol pairs");
  return TrainingSet::from_raw(ds.train);
}

// ---------------------------------------------------------------------------
// Training options shared by pretrain, train and ablate

struct TrainOptions {
  std::string variant = "hybrid";
  std::size_t batch_size = 0;
  std::size_t patches_per_epoch = 0;
  std::size_t validation_patches = 0;
  std::string patch;
  std::uint64_t seed = 0;
  bool paper_scale = false;
  bool deterministic = true;

  CLI::Option* o_variant = nullptr;
  CLI::Option* o_batch = nullptr;
  CLI::Option* o_ppe = nullptr;
  CLI::Option* o_vp = nullptr;
  CLI::Option* o_patch = nullptr;

  void add(CLI::App* sub) {
    o_variant = sub->add_option("--variant", variant, "Generator variant: hybrid, pure2d or pure3d");
    o_batch = sub->add_option("--batch-size", batch_size, "Patches per optimiser step");
    o_ppe = sub->add_option("--patches-per-epoch", patches_per_epoch, "Generator patches per epoch");
    o_vp = sub->add_option("--validation-patches", validation_patches, "Size of the fixed validation batch");
    o_patch = sub->add_option("--patch", patch, "Patch size z,y,x");
    sub->add_option("--seed", seed, "Master seed");
    sub->add_flag("--paper-scale", paper_scale, "Use batch 80, 9x64x64 patches and full-size epochs");
    sub->add_option("--deterministic", deterministic, "Deterministic mode (true/false)");
  }

  TrainConfig base(TrainPhase phase, bool transfer) const {
    TrainConfig c = paper_scale ? TrainConfig::paper_scale(phase, transfer) : TrainConfig::desk(phase, transfer);
    c.generator = GeneratorConfig::for_variant(parse_generator_variant(variant));
    if (*o_batch) c.batch_size = batch_size;
    if (*o_ppe) c.patches_per_epoch = patches_per_epoch;
    if (*o_vp) c.validation_patches = validation_patches;
    if (*o_patch) c.patch = parse_dims(patch, "--patch");
    c.seed = seed;
    c.deterministic = deterministic;
    return c;
  }
};

EpochCallback progress(const std::string& tag, std::size_t epochs) {
  return [tag, epochs](std::size_t epoch, const Checkpoint&) {
    std::cerr << tag << ": epoch " << epoch << "/" << epochs << " done" << std::endl;
  };
}

void record_training(Manifest& m, const TrainConfig& c, const TrainLog& log) {
  m["config"] = c.to_json();
  m["seeds"]["master"] = c.seed;
  m["train_log"] = log.to_json();
  m["diverged"] = log.diverged;
  if (log.diverged) m["divergence_reason"] = log.divergence_reason;
  double total = 0;
  for (double s : log.epoch_seconds) total += s;
  m.timing("training_seconds", total);
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
  std::string out;
  std::size_t pairs = 9;
  std::size_t test_pairs = 0;
  double dose = 0.2;
  std::uint64_t seed = 0;
  std::string spec;
  std::string dims = "32,96,96";
  CLI::Option* o_test = nullptr;
  CLI::Option* o_dims = nullptr;
};

void apply_spec_file(const fs::path& path, PhantomSpec& spec, AcquisitionModel& acq, Dims3& dims) {
  std::ifstream in(path);
  if (!in) throw std::system_error(errno, std::generic_category(), "cannot open spec " + path.string());
  json j = json::parse(in);
  if (!j.is_object()) throw std::invalid_argument(path.string() + ": spec must be a JSON object");
  if (j.contains("dims")) {
    const auto v = j.at("dims").get<std::vector<std::size_t>>();
    if (v.size() != 3) throw std::invalid_argument(path.string() + ": dims must have three entries");
    dims = {v[0], v[1], v[2]};
  }
  spec = PhantomSpec::standard(dims);
  for (const auto& [key, value] : j.items()) {
    if (key == "dims") continue;
    if (key == "lesions") {
      for (const auto& [lk, lv] : value.items()) {
        if (lk == "count") spec.lesions.count = lv.get<std::size_t>();
        else if (lk == "radius_min") spec.lesions.radius_min = lv.get<double>();
        else if (lk == "radius_max") spec.lesions.radius_max = lv.get<double>();
        else if (lk == "multiplier") spec.lesions.multiplier = lv.get<double>();
        else throw std::invalid_argument(path.string() + ": unknown lesion key '" + lk + "'");
      }
    } else if (key == "organ_jitter") {
      spec.organ_jitter = value.get<double>();
    } else if (key == "texture_sigma") {
      spec.texture_sigma = value.get<double>();
    } else if (key == "texture_amplitude") {
      spec.texture_amplitude = value.get<double>();
    } else if (key == "psf_sigma") {
      spec.psf_sigma = value.get<double>();
      acq.psf_sigma = spec.psf_sigma;
    } else if (key == "sensitivity") {
      acq.sensitivity = value.get<double>();
    } else {
      throw std::invalid_argument(path.string() + ": unknown spec key '" + key + "'");
    }
  }
}

int cmd_gen_data(const GenDataArgs& a, RunState& st) {
  if (a.out.empty()) throw std::invalid_argument("--out is required");
  if (!(a.dose > 0.0 && a.dose <= 1.0)) {
    throw std::invalid_argument("--dose must lie in (0, 1], got " + std::to_string(a.dose));
  }
  if (a.pairs == 0) throw std::invalid_argument("--pairs must be positive");
  const std::size_t test_pairs =
      *a.o_test ? a.test_pairs : static_cast<std::size_t>(std::llround(static_cast<double>(a.pairs) * 2.0 / 9.0));
  if (test_pairs > a.pairs) throw std::invalid_argument("--test-pairs exceeds --pairs");

  const fs::path out(a.out);
  st.manifest_path = out / "manifest.json";
  Manifest& m = *st.manifest;

  Dims3 dims = parse_dims(a.dims, "--dims");
  PhantomSpec spec = PhantomSpec::standard(dims);
  AcquisitionModel acq;
  if (!a.spec.empty()) {
    m.input(a.spec);
    apply_spec_file(a.spec, spec, acq, dims);
    if (*a.o_dims) {  // flag beats file
      dims = parse_dims(a.dims, "--dims");
      const PhantomSpec from_file = spec;
      spec = PhantomSpec::standard(dims);
      spec.lesions = from_file.lesions;
      spec.organ_jitter = from_file.organ_jitter;
      spec.texture_sigma = from_file.texture_sigma;
      spec.texture_amplitude = from_file.texture_amplitude;
      spec.psf_sigma = from_file.psf_sigma;
    }
  }
  spec.validate();

  fs::create_directories(out);
  m["config"] = {{"pairs", a.pairs}, {"test_pairs", test_pairs}, {"dose", a.dose}, {"dims", dims},
                 {"sensitivity", acq.sensitivity}, {"psf_sigma", acq.psf_sigma},
                 {"lesions", spec.lesions.count}, {"organ_jitter", spec.organ_jitter},
                 {"texture_sigma", spec.texture_sigma}, {"texture_amplitude", spec.texture_amplitude}};
  m["seeds"]["master"] = a.seed;
  json pair_seeds = json::array();
  const std::size_t train_pairs = a.pairs - test_pairs;
  for (std::size_t k = 0; k < a.pairs; ++k) {
    const std::uint64_t s_phantom = derive_seed(a.seed, 1000 + k);
    const std::uint64_t s_low = derive_seed(a.seed, 2000 + k);
    const std::uint64_t s_normal = derive_seed(a.seed, 3000 + k);
    pair_seeds.push_back({{"phantom", s_phantom}, {"low", s_low}, {"normal", s_normal}});

    const Volume activity = generate_phantom(spec, s_phantom);
    Volume low = simulate_acquisition(activity, a.dose, s_low, acq);
    Volume normal = simulate_acquisition(activity, 1.0, s_normal, acq);
    const bool is_test = k >= train_pairs;
    const std::size_t idx = is_test ? k - train_pairs : k;
    char stem[32];
    std::snprintf(stem, sizeof stem, "%s_%03zu", is_test ? "test" : "train", idx);
    low.provenance = {{"pair", k}, {"role", "low"}, {"dose", a.dose}, {"seed", a.seed}};
    normal.provenance = {{"pair", k}, {"role", "normal"}, {"dose", 1.0}, {"seed", a.seed}};
    const fs::path lp = out / (std::string(stem) + "_low.pvol");
    const fs::path np = out / (std::string(stem) + "_normal.pvol");
    write_volume(low, lp);
    write_volume(normal, np);
    m.output(lp);
    m.output(np);
    std::cerr << "gen-data: wrote " << stem << std::endl;
  }
  m["seeds"]["pairs"] = pair_seeds;
  return kOk;
}

// ---------------------------------------------------------------------------
// pretrain / train

struct PretrainArgs {
  std::string data, out, loss = "mse";
  std::size_t epochs = 0;
  double lr = 0;
  CLI::Option* o_epochs = nullptr;
  CLI::Option* o_lr = nullptr;
  TrainOptions common;
};

int cmd_pretrain(const PretrainArgs& a, RunState& st) {
  if (a.data.empty()) throw std::invalid_argument("--data is required");
  if (a.out.empty()) throw std::invalid_argument("--out is required");
  st.manifest_path = sibling_manifest(a.out);
  Manifest& m = *st.manifest;

  TrainConfig c = a.common.base(TrainPhase::pretrain, false);
  c.pretrain_loss = parse_pretrain_loss(a.loss);
  if (*a.o_epochs) c.epochs = a.epochs;
  if (*a.o_lr) c.adam.lr = a.lr;
  c.validate();

  const Dataset ds = load_dataset(a.data);
  for (const auto& f : ds.files) m.input(f);
  const TrainingSet set = training_set(ds, a.data);

  const TrainResult r = pretrain_generator(c, set, progress("pretrain", c.epochs));
  save_checkpoint(r.generator, a.out);
  m.output(a.out);
  record_training(m, c, r.log);
  if (r.log.diverged) throw Diverged("pretraining diverged: " + r.log.divergence_reason);
  return kOk;
}

struct TrainArgs {
  std::string data, out, d_out, init = "scratch", lambda_m = "1e7";
  double lambda_gp = 10;
  std::size_t epochs = 0, d_steps = 4;
  double lr = 0;
  CLI::Option* o_epochs = nullptr;
  CLI::Option* o_lr = nullptr;
  CLI::Option* o_lambda_gp = nullptr;
  CLI::Option* o_d_steps = nullptr;
  TrainOptions common;
};

int cmd_train(const TrainArgs& a, RunState& st) {
  if (a.data.empty()) throw std::invalid_argument("--data is required");
  if (a.out.empty()) throw std::invalid_argument("--out is required");
  st.manifest_path = sibling_manifest(a.out);
  Manifest& m = *st.manifest;

  const bool transfer = a.init != "scratch";
  TrainConfig c = a.common.base(TrainPhase::wgan, transfer);
  if (transfer) {
    const fs::path init(a.init);
    const Checkpoint ckpt = load_checkpoint(init);
    m.input(init);
    if (ckpt.model_kind() != "generator") {
      throw std::invalid_argument("--init " + a.init + " holds a " + ckpt.model_kind() + ", not a generator");
    }
    const GeneratorConfig g = generator_config_from_json(ckpt.provenance.at("generator"));
    if (*a.common.o_variant && g.variant != c.generator.variant) {
      throw std::invalid_argument("--variant " + a.common.variant + " conflicts with the " + to_string(g.variant) +
                                  " generator in " + a.init);
    }
    c.generator = g;
    c.init_checkpoint = init;
  }
  c.weights.lambda_m = parse_lambda(a.lambda_m);
  if (*a.o_lambda_gp) c.weights.lambda_gp = a.lambda_gp;
  if (*a.o_d_steps) c.d_steps_per_g_step = a.d_steps;
  if (*a.o_epochs) c.epochs = a.epochs;
  if (*a.o_lr) c.adam.lr = a.lr;
  c.validate();

  const Dataset ds = load_dataset(a.data);
  for (const auto& f : ds.files) m.input(f);
  const TrainingSet set = training_set(ds, a.data);

  TrainResult r = train_wgan(c, set, initial_generator(c), initial_discriminator(c), progress("train", c.epochs));
  save_checkpoint(r.generator, a.out);
  m.output(a.out);
  if (!a.d_out.empty()) {
    save_checkpoint(r.discriminator, a.d_out);
    m.output(a.d_out);
  }
  record_training(m, c, r.log);
  if (r.log.diverged) throw Diverged("training diverged: " + r.log.divergence_reason);
  return kOk;
}

// ---------------------------------------------------------------------------
// denoise / evaluate

struct DenoiseArgs {
  std::string ckpt, in, out;
  std::size_t stride_z = 1, tile = 0, tile_overlap = 8;
};

int cmd_denoise(const DenoiseArgs& a, RunState& st) {
  if (a.ckpt.empty() || a.in.empty() || a.out.empty()) {
    throw std::invalid_argument("--ckpt, --in and --out are required");
  }
  st.manifest_path = sibling_manifest(a.out);
  Manifest& m = *st.manifest;
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  m.input(a.ckpt);
  const Generator gen = generator_from_checkpoint(ckpt);
  const double scale = ckpt.provenance.value("intensity_scale", 1.0);
  const Volume in = to_raw(read_volume(a.in));
  m.input(a.in);

  DenoiseOptions opt;
  opt.stride_z = a.stride_z;
  opt.spatial_tile = a.tile;
  opt.tile_overlap = a.tile_overlap;
  m["config"] = {{"stride_z", opt.stride_z}, {"tile", opt.spatial_tile}, {"tile_overlap", opt.tile_overlap},
                 {"intensity_scale", scale}};
  Volume out = denoise_raw(gen, in, scale, opt);
  out.provenance = {{"denoised_from", a.in}, {"checkpoint", git_blob_hash(a.ckpt)}};
  write_volume(out, a.out);
  m.output(a.out);
  return kOk;
}

struct EvaluateArgs {
  std::string ref, test, out;
};

int cmd_evaluate(const EvaluateArgs& a, RunState& st) {
  if (a.ref.empty() || a.test.empty() || a.out.empty()) {
    throw std::invalid_argument("--ref, --test and --out are required");
  }
  st.manifest_path = sibling_manifest(a.out);
  Manifest& m = *st.manifest;
  const Volume ref = to_raw(read_volume(a.ref));
  const Volume test = to_raw(read_volume(a.test));
  m.input(a.ref);
  m.input(a.test);
  if (ref.dims != test.dims) throw std::invalid_argument("--ref and --test differ in dims");
  const MetricReport report = evaluate_volume(ref, test);
  write_json(report.to_json(), a.out);
  m.output(a.out);
  m["config"] = {{"metric_constants", report.constants}, {"fingerprint", report.fingerprint}};
  std::cout << format_table({summarize(fs::path(a.test).filename().string(), {report})});
  std::cout << "constants fingerprint " << report.fingerprint << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
  std::string data, out, lambda_m = "1e7";
  std::size_t pretrain_epochs = 0, wgan_epochs = 0, transfer_epochs = 0, stride_z = 1, d_steps = 4;
  double pretrain_lr = 0, wgan_lr = 0, transfer_lr = 0, lambda_gp = 10;
  CLI::Option* o_pe = nullptr;
  CLI::Option* o_we = nullptr;
  CLI::Option* o_te = nullptr;
  CLI::Option* o_plr = nullptr;
  CLI::Option* o_wlr = nullptr;
  CLI::Option* o_tlr = nullptr;
  TrainOptions common;
};

struct RowPlan {
  std::string label, structure, loss, method;
};

const std::vector<RowPlan>& row_plans() {
  static const std::vector<RowPlan> rows = {
      {"Low-dose", "-", "-", "-"},
      {"Pure 2D network", "2D", "L_MSE", "Direct"},
      {"Pure 3D network", "3D", "L_MSE", "Direct"},
      {"Hybrid 2D and 3D network", "2D&3D", "L_MSE", "Direct"},
      {"WGAN", "2D&3D", "L_adv", "Direct"},
      {"WGAN (MSE)", "2D&3D", "L_adv+L_MSE", "Direct"},
      {"PT-WGAN (MSE)", "2D&3D", "L_adv+L_MSE", "Transfer"},
      {"PT-WGAN (SSIM)", "2D&3D", "L_adv+L_MSE", "Transfer"},
      {"PT-WGAN (Perceptual)", "2D&3D", "L_adv+L_MSE", "Transfer"},
  };
  return rows;
}

int cmd_ablate(const AblateArgs& a, RunState& st) {
  if (a.data.empty()) throw std::invalid_argument("data is required (--data or the grid file)");
  if (a.out.empty()) throw std::invalid_argument("out is required (--out or the grid file)");
  const fs::path out(a.out);
  st.manifest_path = out / "manifest.json";
  Manifest& m = *st.manifest;

  auto pretrain_cfg = [&](GeneratorVariant v, PretrainLoss loss) {
    TrainConfig c = a.common.base(TrainPhase::pretrain, false);
    c.generator = GeneratorConfig::for_variant(v);
    c.pretrain_loss = loss;
    if (*a.o_pe) c.epochs = a.pretrain_epochs;
    if (*a.o_plr) c.adam.lr = a.pretrain_lr;
    c.validate();
    return c;
  };
  auto wgan_cfg = [&](bool transfer, double lambda_m) {
    TrainConfig c = a.common.base(TrainPhase::wgan, transfer);
    c.generator = GeneratorConfig::for_variant(GeneratorVariant::hybrid);
    c.weights.lambda_m = lambda_m;
    c.weights.lambda_gp = a.lambda_gp;
    c.d_steps_per_g_step = a.d_steps;
    if (transfer) {
      if (*a.o_te) c.epochs = a.transfer_epochs;
      if (*a.o_tlr) c.adam.lr = a.transfer_lr;
    } else {
      if (*a.o_we) c.epochs = a.wgan_epochs;
      if (*a.o_wlr) c.adam.lr = a.wgan_lr;
    }
    c.validate();
    return c;
  };
  const double lambda_m = parse_lambda(a.lambda_m);
  // Validate every run up front so a bad grid fails before any training.
  (void)pretrain_cfg(GeneratorVariant::hybrid, PretrainLoss::mse);
  (void)wgan_cfg(false, lambda_m);
  (void)wgan_cfg(true, lambda_m);

  const Dataset ds = load_dataset(a.data);
  for (const auto& f : ds.files) m.input(f);
  const TrainingSet set = training_set(ds, a.data);
  if (ds.test.empty()) throw IoError(a.data + ": no test_NNN_low/normal.pvol pairs to evaluate on");
  fs::create_directories(out);

  json runs = json::object();
  DenoiseOptions dopt;
  dopt.stride_z = a.stride_z;

  auto evaluate = [&](const Checkpoint& ckpt) {
    const Generator g = generator_from_checkpoint(ckpt);
    std::vector<MetricReport> reports;
    for (const auto& p : ds.test) reports.push_back(evaluate_volume(p.normal, denoise_raw(g, p.low, set.intensity_scale, dopt)));
    return reports;
  };
  auto save = [&](const Checkpoint& ckpt, const std::string& name) {
    const fs::path p = out / (name + ".ptwg");
    save_checkpoint(ckpt, p);
    m.output(p);
    return p;
  };
  auto pretrain = [&](const std::string& name, GeneratorVariant v, PretrainLoss loss) {
    const TrainConfig c = pretrain_cfg(v, loss);
    const auto t0 = Clock::now();
    TrainResult r = pretrain_generator(c, set, progress("ablate " + name, c.epochs));
    m.timing(name, seconds_since(t0));
    runs[name] = {{"config", c.to_json()}, {"log", r.log.to_json()}};
    save(r.generator, name);
    return r;
  };
  auto wgan = [&](const std::string& name, std::optional<fs::path> init, double lm) {
    TrainConfig c = wgan_cfg(init.has_value(), lm);
    c.init_checkpoint = init;
    const auto t0 = Clock::now();
    TrainResult r = train_wgan(c, set, initial_generator(c), initial_discriminator(c), progress("ablate " + name, c.epochs));
    m.timing(name, seconds_since(t0));
    runs[name] = {{"config", c.to_json()}, {"log", r.log.to_json()}};
    save(r.generator, name);
    return r;
  };

  std::vector<TableRow> rows;
  json row_reports = json::array();
  auto add_row = [&](std::size_t i, const std::vector<MetricReport>& reports, bool diverged) {
    const RowPlan& plan = row_plans()[i];
    TableRow row = summarize(plan.label, reports);
    row.structure = plan.structure;
    row.loss = plan.loss;
    row.method = plan.method;
    row.diverged = diverged;
    rows.push_back(row);
    json per = json::array();
    for (const auto& r : reports) per.push_back(r.to_json());
    row_reports.push_back(per);
    std::cerr << "ablate: row '" << plan.label << "' done" << std::endl;
  };

  {
    std::vector<MetricReport> reports;
    for (const auto& p : ds.test) reports.push_back(evaluate_volume(p.normal, p.low));
    add_row(0, reports, false);
  }
  const auto pure2d = pretrain("pure2d_mse", GeneratorVariant::pure2d, PretrainLoss::mse);
  add_row(1, evaluate(pure2d.generator), pure2d.log.diverged);
  const auto pure3d = pretrain("pure3d_mse", GeneratorVariant::pure3d, PretrainLoss::mse);
  add_row(2, evaluate(pure3d.generator), pure3d.log.diverged);
  const auto hybrid = pretrain("hybrid_mse", GeneratorVariant::hybrid, PretrainLoss::mse);
  add_row(3, evaluate(hybrid.generator), hybrid.log.diverged);
  const auto adv = wgan("wgan_adv", std::nullopt, 0.0);
  add_row(4, evaluate(adv.generator), adv.log.diverged);
  const auto adv_mse = wgan("wgan_mse", std::nullopt, lambda_m);
  add_row(5, evaluate(adv_mse.generator), adv_mse.log.diverged);
  const auto pt_mse = wgan("ptwgan_mse", out / "hybrid_mse.ptwg", lambda_m);
  add_row(6, evaluate(pt_mse.generator), hybrid.log.diverged || pt_mse.log.diverged);
  const auto ssim = pretrain("hybrid_ssim", GeneratorVariant::hybrid, PretrainLoss::ssim);
  const auto pt_ssim = wgan("ptwgan_ssim", out / "hybrid_ssim.ptwg", lambda_m);
  add_row(7, evaluate(pt_ssim.generator), ssim.log.diverged || pt_ssim.log.diverged);
  const auto perc = pretrain("hybrid_perceptual", GeneratorVariant::hybrid, PretrainLoss::perceptual);
  const auto pt_perc = wgan("ptwgan_perceptual", out / "hybrid_perceptual.ptwg", lambda_m);
  add_row(8, evaluate(pt_perc.generator), perc.log.diverged || pt_perc.log.diverged);

  json table = json::array();
  bool any_diverged = false;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    json r = rows[i].to_json();
    r["reports"] = row_reports[i];
    table.push_back(r);
    any_diverged = any_diverged || rows[i].diverged;
  }
  const json doc = {{"rows", table}, {"intensity_scale", set.intensity_scale},
                    {"fingerprint", MetricConstants{}.fingerprint()}};
  const fs::path ablation = out / "ablation.json";
  write_json(doc, ablation);
  m.output(ablation);
  const std::string text = format_table(rows);
  {
    const fs::path tp = out / "table.txt";
    std::ofstream t(tp);
    if (!t) throw std::system_error(errno, std::generic_category(), "cannot write " + tp.string());
    t << text;
    t.close();
    m.output(tp);
  }
  std::cout << text;
  m["config"] = {{"lambda_m", number_or_inf(lambda_m)}, {"stride_z", a.stride_z}, {"runs", runs}};
  m["seeds"]["master"] = a.common.seed;
  m["diverged"] = any_diverged;
  if (any_diverged) throw Diverged("one or more ablation rows diverged");
  return kOk;
}

// ---------------------------------------------------------------------------
// replay

int run_impl(const std::vector<std::string>& args);

int cmd_replay(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::system_error(errno, std::generic_category(), "cannot open " + manifest_path);
  const json j = json::parse(in);
  std::vector<std::string> args = {j.at("command").get<std::string>()};
  for (const auto& [key, value] : j.at("options").items()) {
    const auto values = value.is_array() ? value.get<std::vector<std::string>>()
                                         : std::vector<std::string>{value.get<std::string>()};
    for (const auto& v : values) args.push_back("--" + key + "=" + v);
  }
  std::cerr << "replay:";
  for (const auto& a : args) std::cerr << " " << a;
  std::cerr << std::endl;
  return run_impl(args);
}

// ---------------------------------------------------------------------------

int run_impl(const std::vector<std::string>& args) {
  CLI::App app{"Low-dose PET denoising with a hybrid 2D/3D WGAN", "ldpet"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every command");

  std::string config_path;
  auto add_config = [&](CLI::App* sub, const char* name = "--config") {
    sub->add_option(name, config_path, "Flat key = value file; explicit flags take precedence");
  };

  GenDataArgs gd;
  CLI::App* s_gen = app.add_subcommand("gen-data", "Generate paired phantom volumes");
  s_gen->add_option("--out", gd.out, "Output directory");
  s_gen->add_option("--pairs", gd.pairs, "Number of pairs (default 9)");
  gd.o_test = s_gen->add_option("--test-pairs", gd.test_pairs, "Pairs held out for testing (default 2/9 of pairs)");
  s_gen->add_option("--dose", gd.dose, "Low-dose fraction in (0, 1]");
  s_gen->add_option("--seed", gd.seed, "Master seed");
  s_gen->add_option("--spec", gd.spec, "Phantom spec JSON");
  gd.o_dims = s_gen->add_option("--dims", gd.dims, "Volume dims z,y,x");
  add_config(s_gen);

  PretrainArgs pa;
  CLI::App* s_pre = app.add_subcommand("pretrain", "Train the generator alone");
  s_pre->add_option("--data", pa.data, "Dataset directory");
  s_pre->add_option("--out", pa.out, "Generator checkpoint to write");
  s_pre->add_option("--loss", pa.loss, "mse, ssim or perceptual");
  pa.o_epochs = s_pre->add_option("--epochs", pa.epochs, "Epochs (default 30)");
  pa.o_lr = s_pre->add_option("--lr", pa.lr, "Adam learning rate (default 1e-4)");
  pa.common.add(s_pre);
  add_config(s_pre);

  TrainArgs ta;
  CLI::App* s_train = app.add_subcommand("train", "WGAN training, from scratch or a checkpoint");
  s_train->add_option("--data", ta.data, "Dataset directory");
  s_train->add_option("--init", ta.init, "'scratch' or a generator checkpoint");
  s_train->add_option("--lambda-m", ta.lambda_m, "MSE weight; 'inf' trains on MSE alone");
  ta.o_lambda_gp = s_train->add_option("--lambda-gp", ta.lambda_gp, "Gradient penalty weight");
  ta.o_d_steps = s_train->add_option("--d-steps", ta.d_steps, "Critic steps per generator step");
  ta.o_epochs = s_train->add_option("--epochs", ta.epochs, "Epochs (default 40, or 10 with --init)");
  ta.o_lr = s_train->add_option("--lr", ta.lr, "Adam learning rate (default 1e-4, or 1e-5 with --init)");
  s_train->add_option("--out", ta.out, "Generator checkpoint to write");
  s_train->add_option("--d-out", ta.d_out, "Discriminator checkpoint to write");
  ta.common.add(s_train);
  add_config(s_train);

  DenoiseArgs da;
  CLI::App* s_den = app.add_subcommand("denoise", "Apply a generator checkpoint to a volume");
  s_den->add_option("--ckpt", da.ckpt, "Generator checkpoint");
  s_den->add_option("--in", da.in, "Input PVOL");
  s_den->add_option("--out", da.out, "Output PVOL");
  s_den->add_option("--stride-z", da.stride_z, "Depth stride between windows");
  s_den->add_option("--tile", da.tile, "Spatial tile edge (0 = whole slices)");
  s_den->add_option("--tile-overlap", da.tile_overlap, "Tile overlap (>= 8)");
  add_config(s_den);

  EvaluateArgs ea;
  CLI::App* s_eval = app.add_subcommand("evaluate", "Score a volume against a reference");
  s_eval->add_option("--ref", ea.ref, "Reference PVOL");
  s_eval->add_option("--test", ea.test, "Test PVOL");
  s_eval->add_option("--out", ea.out, "Report JSON");
  add_config(s_eval);

  AblateArgs aa;
  CLI::App* s_abl = app.add_subcommand("ablate", "Run the structure x loss x method comparison");
  s_abl->add_option("--data", aa.data, "Dataset directory");
  s_abl->add_option("--out", aa.out, "Output directory");
  aa.o_pe = s_abl->add_option("--pretrain-epochs", aa.pretrain_epochs, "Epochs of every generator-only run");
  aa.o_we = s_abl->add_option("--wgan-epochs", aa.wgan_epochs, "Epochs of WGAN runs from scratch");
  aa.o_te = s_abl->add_option("--transfer-epochs", aa.transfer_epochs, "Epochs of transfer-initialised WGAN runs");
  aa.o_plr = s_abl->add_option("--pretrain-lr", aa.pretrain_lr, "Learning rate of generator-only runs");
  aa.o_wlr = s_abl->add_option("--wgan-lr", aa.wgan_lr, "Learning rate of WGAN runs from scratch");
  aa.o_tlr = s_abl->add_option("--transfer-lr", aa.transfer_lr, "Learning rate of transfer runs");
  s_abl->add_option("--lambda-m", aa.lambda_m, "MSE weight of the adv+MSE rows");
  s_abl->add_option("--lambda-gp", aa.lambda_gp, "Gradient penalty weight");
  s_abl->add_option("--d-steps", aa.d_steps, "Critic steps per generator step");
  s_abl->add_option("--stride-z", aa.stride_z, "Depth stride when denoising test volumes");
  aa.common.add(s_abl);
  add_config(s_abl, "--grid");

  std::string replay_path;
  CLI::App* s_replay = app.add_subcommand("replay", "Re-run a command from its manifest");
  s_replay->add_option("manifest", replay_path, "Manifest JSON")->required();

  RunState st;
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  CLI::App* sub = app.get_subcommands().front();
  if (sub == s_replay) return cmd_replay(replay_path);

  if (!config_path.empty()) apply_config(sub, config_path, {"config", "grid", "help"});
  st.manifest.emplace(sub->get_name(), args);
  (*st.manifest)["options"] = explicit_options(sub);
  if (!config_path.empty()) (*st.manifest)["config_file"] = {{"path", config_path}, {"git_blob", git_blob_hash(config_path)}};

  int code = kFailure;
  std::string status = "ok";
  std::string error;
  try {
    if (sub == s_gen) code = cmd_gen_data(gd, st);
    else if (sub == s_pre) code = cmd_pretrain(pa, st);
    else if (sub == s_train) code = cmd_train(ta, st);
    else if (sub == s_den) code = cmd_denoise(da, st);
    else if (sub == s_eval) code = cmd_evaluate(ea, st);
    else if (sub == s_abl) code = cmd_ablate(aa, st);
  } catch (const Diverged& e) {
    code = kDiverged;
    status = "diverged";
    error = e.what();
  } catch (const std::invalid_argument& e) {
    code = kConfigError;
    status = "config_error";
    error = e.what();
  } catch (const CLI::Error& e) {
    code = kConfigError;
    status = "config_error";
    error = e.what();
  } catch (const std::system_error& e) {
    code = kIoError;
    status = "io_error";
    error = e.what();
  } catch (const FormatError& e) {
    code = kIoError;
    status = "io_error";
    error = e.what();
  } catch (const IoError& e) {
    code = kIoError;
    status = "io_error";
    error = e.what();
  } catch (const json::exception& e) {
    code = kIoError;
    status = "io_error";
    error = e.what();
  } catch (const std::exception& e) {
    code = kFailure;
    status = "error";
    error = e.what();
  }
  if (!error.empty()) {
    std::cerr << "ldpet " << sub->get_name() << ": " << error << std::endl;
    (*st.manifest)["error"] = error;
  }
  if (!st.manifest_path.empty()) {
    st.manifest->finish(status, code);
    try {
      st.manifest->write(st.manifest_path);
    } catch (const std::exception& e) {
      std::cerr << "ldpet: could not write manifest: " << e.what() << std::endl;
      if (code == kOk) code = kIoError;
    }
  }
  return code;
}

}  // namespace

// ---------------------------------------------------------------------------

int run(const std::vector<std::string>& args) {
  try {
    return run_impl(args);
  } catch (const std::invalid_argument& e) {
    std::cerr << "ldpet: " << e.what() << std::endl;
    return kConfigError;
  } catch (const std::system_error& e) {
    std::cerr << "ldpet: " << e.what() << std::endl;
    return kIoError;
  } catch (const FormatError& e) {
    std::cerr << "ldpet: " << e.what() << std::endl;
    return kIoError;
  } catch (const json::exception& e) {
    std::cerr << "ldpet: " << e.what() << std::endl;
    return kIoError;
  } catch (const std::exception& e) {
    std::cerr << "ldpet: " << e.what() << std::endl;
    return kFailure;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

std::map<std::string, std::string> read_key_value_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::system_error(errno, std::generic_category(), "cannot open config " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    std::replace(key.begin(), key.end(), '_', '-');
    if (key.empty() || value.empty()) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": empty key or value");
    }
    if (kv.count(key)) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    kv[key] = value;
  }
  return kv;
}

std::string git_blob_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::system_error(errno, std::generic_category(), "cannot open " + path.string());
  const std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string header = "blob " + std::to_string(content.size()) + std::string(1, '\0');

  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx, content.data(), content.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("SHA-1 failed for " + path.string());
  }
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

json TableRow::to_json() const {
  return {{"label", label},        {"structure", structure},   {"loss", loss},
          {"method", method},      {"psnr", number_or_inf(psnr)}, {"nrmse", nrmse},
          {"rfsim", rfsim},        {"vif", vif},               {"diverged", diverged}};
}

TableRow summarize(std::string label, const std::vector<MetricReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("summarize: no reports for '" + label + "'");
  TableRow row;
  row.label = std::move(label);
  row.structure = row.loss = row.method = "-";
  const double n = static_cast<double>(reports.size());
  for (const auto& r : reports) {
    row.psnr += r.psnr / n;
    row.nrmse += r.nrmse / n;
    row.rfsim += r.rfsim / n;
    row.vif += r.vif / n;
  }
  return row;
}

std::string format_table(const std::vector<TableRow>& rows) {
  auto fmt = [](double v, int prec) {
    if (std::isinf(v)) return std::string(v > 0 ? "inf" : "-inf");
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return std::string(buf);
  };
  std::vector<std::vector<std::string>> cells = {
      {"", "Structure", "Loss Function", "Training Method", "PSNR", "NRMSE (%)", "RFSIM", "VIF"}};
  for (const auto& r : rows) {
    cells.push_back({r.label + (r.diverged ? " [diverged]" : ""), r.structure, r.loss, r.method, fmt(r.psnr, 3),
                     fmt(r.nrmse, 3), fmt(r.rfsim, 4), fmt(r.vif, 4)});
  }
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::string out;
  for (const auto& row : cells) {
    std::string line;
    for (std::size_t c = 0; c < row.size(); ++c) {
      const std::string pad(width[c] - row[c].size(), ' ');
      // Labels left-aligned, everything else right-aligned.
      line += c == 0 ? row[c] + pad : pad + row[c];
      if (c + 1 < row.size()) line += "  ";
    }
    out += line + "\n";
  }
  return out;
}

const std::vector<std::string>& ablation_labels() {
  static const std::vector<std::string> labels = [] {
    std::vector<std::string> v;
    for (const auto& p : row_plans()) v.push_back(p.label);
    return v;
  }();
  return labels;
}

}  // namespace ldpet::cli
