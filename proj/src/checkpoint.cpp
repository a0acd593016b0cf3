#include "l2p/checkpoint.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace l2p {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr char kMagic[8] = {'L', '2', 'P', 'C', 'K', 'P', 'T', '1'};

void put_u64_le(std::ofstream& f, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  f.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64_le(std::ifstream& f) {
  unsigned char b[8];
  f.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void write_doubles_le(std::ofstream& f, std::span<const double> vals) {
  for (double d : vals) {
    const auto bits = std::bit_cast<std::uint64_t>(d);
    put_u64_le(f, bits);
  }
}

void read_doubles_le(std::ifstream& f, std::span<double> vals) {
  for (double& d : vals) d = std::bit_cast<double>(get_u64_le(f));
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const SgdOptimizer& optimizer,
                     int epoch, std::uint64_t seed, const std::string& config_text,
                     const std::string& config_digest) {
  ordered_json manifest;
  manifest["format_version"] = 1;
  manifest["spec"] = model.spec_text();
  manifest["input_shape"] = model.input_shape();
  manifest["theta0"] = model.theta0();
  manifest["theta_min"] = model.theta_min();
  manifest["spec_hash"] = hex64(model.spec_hash());
  manifest["epoch"] = epoch;
  manifest["seed"] = seed;
  manifest["config_digest"] = config_digest;
  manifest["config"] = config_text;

  ordered_json rng = ordered_json::object();
  ordered_json enabled = ordered_json::object();
  for (const auto& pl : model.perturb_layers()) {
    rng[pl.name] = pl.rng.serialize();
    enabled[pl.name] = pl.enabled;
  }
  manifest["noise_rng"] = rng;
  manifest["noise_enabled"] = enabled;

  ordered_json tensors = ordered_json::array();
  std::uint64_t offset = 0;
  const auto& params = model.params();
  for (const auto& name : params.names()) {
    const auto& t = params.at(name);
    tensors.push_back({{"name", name},
                       {"kind", "param"},
                       {"shape", t.shape()},
                       {"offset", offset},
                       {"count", t.size()}});
    offset += t.size();
  }
  for (const auto& [name, vel] : optimizer.velocities()) {
    tensors.push_back({{"name", name},
                       {"kind", "velocity"},
                       {"shape", ordered_json::array()},
                       {"offset", offset},
                       {"count", vel.size()}});
    offset += vel.size();
  }
  manifest["tensors"] = tensors;

  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
  f.write(kMagic, sizeof(kMagic));
  const std::string mtext = manifest.dump();
  put_u64_le(f, mtext.size());
  f.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  for (const auto& name : params.names()) write_doubles_le(f, params.at(name).data());
  for (const auto& [name, vel] : optimizer.velocities())
    write_doubles_le(f, {vel.data(), vel.size()});
  if (!f) throw std::runtime_error("checkpoint: short write to " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const std::uint64_t mlen = get_u64_le(f);
  std::string mtext(mlen, '\0');
  f.read(mtext.data(), static_cast<std::streamsize>(mlen));
  if (!f) throw std::runtime_error("checkpoint: truncated manifest in " + path);
  ordered_json manifest = ordered_json::parse(mtext);
  if (manifest.at("format_version").get<int>() != 1)
    throw std::runtime_error("checkpoint: unsupported format version");

  const auto spec = spec_from_text(manifest.at("spec").get<std::string>());
  Shape input = manifest.at("input_shape").get<Shape>();
  const double theta0 = manifest.at("theta0").get<double>();
  const double theta_min = manifest.at("theta_min").get<double>();
  const std::uint64_t seed = manifest.at("seed").get<std::uint64_t>();

  LoadedCheckpoint out{
      .model = build_model(spec, input, derive_seed(seed, "model"), theta0, theta_min),
      .optimizer = {},
      .epoch = manifest.at("epoch").get<int>(),
      .seed = seed,
      .config_text = manifest.at("config").get<std::string>(),
      .config_digest = manifest.at("config_digest").get<std::string>()};

  if (hex64(out.model.spec_hash()) != manifest.at("spec_hash").get<std::string>())
    throw std::runtime_error("checkpoint: model spec hash mismatch in " + path);

  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::string kind = entry.at("kind").get<std::string>();
    const std::size_t count = entry.at("count").get<std::size_t>();
    if (kind == "param") {
      auto& t = out.model.params().at(name);
      if (t.size() != count)
        throw std::runtime_error("checkpoint: tensor size mismatch for " + name);
      read_doubles_le(f, t.raw_data());
    } else {
      std::vector<double> vel(count);
      read_doubles_le(f, {vel.data(), vel.size()});
      out.optimizer.load_velocity(name, std::move(vel));
    }
    if (!f) throw std::runtime_error("checkpoint: truncated payload in " + path);
  }

  const auto& rng = manifest.at("noise_rng");
  const auto& enabled = manifest.at("noise_enabled");
  for (auto& pl : out.model.perturb_layers()) {
    pl.rng = RngStream::deserialize(rng.at(pl.name).get<std::string>());
    pl.enabled = enabled.at(pl.name).get<bool>();
  }
  return out;
}

std::string file_digest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("file_digest: cannot open " + path);
  std::uint64_t h = 1469598103934665603ull;
  char buf[65536];
  while (f) {
    f.read(buf, sizeof(buf));
    const std::streamsize n = f.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return hex64(h);
}

}  // namespace l2p
