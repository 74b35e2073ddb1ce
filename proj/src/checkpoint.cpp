#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <utility>

#include <json.hpp>

#include "contourseg/network.hpp"

// Tensor payloads are written as raw 64-bit little-endian words.
static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace contourseg {

namespace {

constexpr char kMagic[4] = {'C', 'S', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void write_bytes(std::ostream& out, const void* data, std::size_t size) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
}

void write_u32(std::ostream& out, std::uint32_t v) { write_bytes(out, &v, sizeof v); }
void write_u64(std::ostream& out, std::uint64_t v) { write_bytes(out, &v, sizeof v); }

void read_bytes(std::istream& in, void* data, std::size_t size, const char* what) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(size));
  if (static_cast<std::size_t>(in.gcount()) != size) {
    throw DataError(std::string("checkpoint truncated while reading ") + what);
  }
}

std::uint32_t read_u32(std::istream& in, const char* what) {
  std::uint32_t v = 0;
  read_bytes(in, &v, sizeof v, what);
  return v;
}

std::uint64_t read_u64(std::istream& in, const char* what) {
  std::uint64_t v = 0;
  read_bytes(in, &v, sizeof v, what);
  return v;
}

std::string read_string(std::istream& in, const char* what) {
  const std::uint64_t len = read_u64(in, what);
  if (len > (1ULL << 32)) throw DataError(std::string("implausible length for ") + what);
  std::string s(static_cast<std::size_t>(len), '\0');
  if (len > 0) read_bytes(in, s.data(), s.size(), what);
  return s;
}

}  // namespace

std::string network_config_json(const NetworkConfig& cfg) {
  nlohmann::json j;
  j["in_channels"] = cfg.in_channels;
  j["num_classes"] = cfg.num_classes;
  j["base_channels"] = cfg.base_channels;
  j["levels"] = cfg.levels;
  j["rfb_branch_kernels"] = cfg.rfb_branch_kernels;
  j["ham_kernel"] = cfg.ham_kernel;
  j["ham_sigma"] = cfg.ham_sigma;
  return j.dump();
}

NetworkConfig network_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad network config JSON: ") + e.what());
  }
  NetworkConfig cfg;
  try {
    cfg.in_channels = j.value("in_channels", cfg.in_channels);
    cfg.num_classes = j.value("num_classes", cfg.num_classes);
    cfg.base_channels = j.value("base_channels", cfg.base_channels);
    cfg.levels = j.value("levels", cfg.levels);
    cfg.rfb_branch_kernels = j.value("rfb_branch_kernels", cfg.rfb_branch_kernels);
    cfg.ham_kernel = j.value("ham_kernel", cfg.ham_kernel);
    cfg.ham_sigma = j.value("ham_sigma", cfg.ham_sigma);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad network config JSON: ") + e.what());
  }
  return cfg;
}

void save_checkpoint(const std::string& path, const NetworkConfig& cfg,
                     const ModelParams& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);

  write_bytes(out, kMagic, sizeof kMagic);
  write_u32(out, kVersion);
  const std::string config = network_config_json(cfg);
  write_u64(out, config.size());
  write_bytes(out, config.data(), config.size());
  write_u64(out, params.items.size());
  for (const auto& [name, t] : params.items) {
    write_u64(out, name.size());
    write_bytes(out, name.data(), name.size());
    write_u64(out, t.ndim());
    for (std::size_t d : t.shape()) write_u64(out, d);
    write_bytes(out, t.data().data(), t.numel() * sizeof(double));
  }
  out.flush();
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);

  char magic[4] = {};
  read_bytes(in, magic, sizeof magic, "magic");
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw DataError("not a checkpoint file: " + path);
  }
  const std::uint32_t version = read_u32(in, "version");
  if (version != kVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }

  Checkpoint ckpt;
  ckpt.config = network_config_from_json(read_string(in, "config"));
  const std::uint64_t count = read_u64(in, "tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = read_string(in, "tensor name");
    const std::uint64_t ndim = read_u64(in, "tensor rank");
    if (ndim > 8) throw DataError("implausible tensor rank in checkpoint");
    Shape shape(static_cast<std::size_t>(ndim));
    for (auto& d : shape) d = static_cast<std::size_t>(read_u64(in, "tensor extent"));
    std::vector<double> values(shape_numel(shape));
    read_bytes(in, values.data(), values.size() * sizeof(double), "tensor values");
    ckpt.params.add(name, Tensor::from_data(std::move(shape), std::move(values)));
  }
  return ckpt;
}

PdaNet load_pdanet(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  return PdaNet(std::move(ckpt.config), std::move(ckpt.params));
}

}  // namespace contourseg
