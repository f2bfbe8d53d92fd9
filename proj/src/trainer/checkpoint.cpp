#include <cstring>
#include <fstream>
#include <limits>
#include <system_error>

#include "ldpet/trainer.hpp"

namespace ldpet {

namespace {

constexpr char kMagic[4] = {'P', 'T', 'W', 'G'};

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(std::uint8_t(v));
  out.push_back(std::uint8_t(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

// Bounds-checked little-endian cursor; every failure names the offset.
class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const std::string& what) const {
    if (remaining() < n) {
      throw FormatError("PTWG: truncated " + what + " at offset " + std::to_string(pos_) + ": expected " +
                        std::to_string(n) + " bytes, got " + std::to_string(remaining()));
    }
  }

  std::uint64_t uint(std::size_t width, const std::string& what) {
    need(width, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= std::uint64_t(bytes_[pos_ + i]) << (8 * i);
    pos_ += width;
    return v;
  }

  const std::uint8_t* take(std::size_t n, const std::string& what) {
    need(n, what);
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string Checkpoint::model_kind() const { return provenance.value("model", std::string("unknown")); }

std::size_t Checkpoint::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.values.size();
  return n;
}

Checkpoint make_checkpoint(const ParameterSet& model, nlohmann::json provenance) {
  Checkpoint ckpt;
  ckpt.provenance = std::move(provenance);
  for (const auto& np : model.named_parameters()) {
    const auto d = np.value.data();
    ckpt.params.push_back({np.name, np.value.shape(), std::vector<float>(d.begin(), d.end())});
  }
  return ckpt;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.version != kCheckpointFormatVersion) {
    throw std::invalid_argument("checkpoint: cannot encode version " + std::to_string(ckpt.version));
  }
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, ckpt.version);
  put_u32(out, std::uint32_t(ckpt.params.size()));
  for (const auto& p : ckpt.params) {
    if (p.name.size() > std::numeric_limits<std::uint16_t>::max()) throw std::invalid_argument("checkpoint: name too long");
    if (p.shape.size() > 255) throw std::invalid_argument("checkpoint: rank too large for " + p.name);
    if (shape_numel(p.shape) != p.values.size()) {
      throw std::invalid_argument("checkpoint: " + p.name + " holds " + std::to_string(p.values.size()) +
                                  " values for shape " + shape_str(p.shape));
    }
    put_u16(out, std::uint16_t(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    out.push_back(std::uint8_t(p.shape.size()));
    for (std::size_t d : p.shape) put_u32(out, std::uint32_t(d));
    const std::size_t at = out.size();
    out.resize(at + 4 * p.values.size());
    std::memcpy(out.data() + at, p.values.data(), 4 * p.values.size());
  }
  const std::string text = ckpt.provenance.dump();
  put_u32(out, std::uint32_t(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(4, "magic"), kMagic, 4) != 0) throw FormatError("PTWG: bad magic at offset 0");
  Checkpoint ckpt;
  ckpt.version = std::uint32_t(r.uint(4, "version"));
  if (ckpt.version != kCheckpointFormatVersion) {
    throw FormatError("PTWG: unsupported version " + std::to_string(ckpt.version) + " at offset 4 (reader supports " +
                      std::to_string(kCheckpointFormatVersion) + ")");
  }
  const std::size_t count = r.uint(4, "parameter count");
  for (std::size_t i = 0; i < count; ++i) {
    CheckpointParam p;
    const std::size_t name_len = r.uint(2, "name length");
    const auto* name = r.take(name_len, "parameter name");
    p.name.assign(reinterpret_cast<const char*>(name), name_len);
    const std::size_t rank = r.uint(1, "rank of " + p.name);
    std::uint64_t numel = 1;
    for (std::size_t a = 0; a < rank; ++a) {
      const std::uint64_t d = r.uint(4, "dims of " + p.name);
      if (d == 0) throw FormatError("PTWG: zero extent in " + p.name + " at offset " + std::to_string(r.offset() - 4));
      if (numel > (std::numeric_limits<std::uint64_t>::max() / 4) / d) throw FormatError("PTWG: size overflow in " + p.name);
      numel *= d;
      p.shape.push_back(std::size_t(d));
    }
    const std::string what = "values of " + p.name;
    r.need(std::size_t(numel) * 4, what);
    p.values.resize(std::size_t(numel));
    std::memcpy(p.values.data(), r.take(std::size_t(numel) * 4, what), std::size_t(numel) * 4);
    ckpt.params.push_back(std::move(p));
  }
  const std::size_t json_len = r.uint(4, "provenance length");
  const std::size_t json_at = r.offset();
  const auto* text = r.take(json_len, "provenance");
  try {
    ckpt.provenance = nlohmann::json::parse(text, text + json_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("PTWG: corrupted provenance at offset " + std::to_string(json_at) + ": " + e.what());
  }
  if (r.remaining() != 0) {
    throw FormatError("PTWG: " + std::to_string(r.remaining()) + " trailing bytes at offset " + std::to_string(r.offset()));
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::system_error(errno, std::generic_category(), "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw std::system_error(errno, std::generic_category(), "write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::system_error(errno, std::generic_category(), "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void init_from_checkpoint(ParameterSet& model, const Checkpoint& ckpt) {
  auto& params = model.named_parameters();
  const std::size_t n = std::min(params.size(), ckpt.params.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& want = params[i];
    const auto& have = ckpt.params[i];
    if (want.name != have.name || want.value.shape() != have.shape) {
      throw std::invalid_argument("checkpoint mismatch at parameter " + std::to_string(i) + ": model has " +
                                  want.name + " " + shape_str(want.value.shape()) + ", checkpoint has " + have.name +
                                  " " + shape_str(have.shape));
    }
  }
  if (params.size() != ckpt.params.size()) {
    const bool model_longer = params.size() > ckpt.params.size();
    const std::string first = model_longer ? params[n].name : ckpt.params[n].name;
    throw std::invalid_argument("checkpoint mismatch: model has " + std::to_string(params.size()) +
                                " parameters, checkpoint has " + std::to_string(ckpt.params.size()) +
                                "; first unmatched is " + first);
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto dst = params[i].value.mutable_data();
    std::copy(ckpt.params[i].values.begin(), ckpt.params[i].values.end(), dst.begin());
  }
}

nlohmann::json generator_config_to_json(const GeneratorConfig& c) {
  nlohmann::json skips = nlohmann::json::array();
  for (const auto& s : c.skip_plan) skips.push_back({s.source, s.target});
  return {{"variant", to_string(c.variant)},
          {"channels", c.channels},
          {"depth_window", c.depth_window},
          {"kernel", c.kernel},
          {"skip_plan", skips}};
}

GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  try {
    c.variant = parse_generator_variant(j.at("variant").get<std::string>());
    c.channels = j.at("channels").get<std::size_t>();
    c.depth_window = j.at("depth_window").get<std::size_t>();
    c.kernel = j.at("kernel").get<std::size_t>();
    c.skip_plan.clear();
    for (const auto& s : j.at("skip_plan")) c.skip_plan.push_back({s.at(0).get<int>(), s.at(1).get<int>()});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("generator config: ") + e.what());
  }
  return c;
}

Generator generator_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.model_kind() != "generator") {
    throw std::invalid_argument("checkpoint holds a " + ckpt.model_kind() + ", not a generator");
  }
  if (!ckpt.provenance.contains("generator")) throw FormatError("checkpoint provenance lacks the generator config");
  Generator gen(generator_config_from_json(ckpt.provenance["generator"]));
  init_from_checkpoint(gen, ckpt);
  return gen;
}

}  // namespace ldpet
