#include "contourseg/dataset_io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <utility>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "volume serialization assumes a little-endian host");

namespace contourseg {

namespace {

constexpr char kMagic[4] = {'C', 'S', 'V', '1'};
constexpr std::uint8_t kIntensityDtype = 1;  // f64
constexpr std::uint8_t kLabelDtype = 2;      // u16

void write_bytes(std::ostream& out, const void* data, std::size_t size) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
}

void read_bytes(std::istream& in, void* data, std::size_t size, const std::string& what) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(size));
  if (static_cast<std::size_t>(in.gcount()) != size) {
    throw DataError("volume file truncated while reading " + what);
  }
}

std::uint64_t read_u64(std::istream& in, const std::string& what) {
  std::uint64_t v = 0;
  read_bytes(in, &v, sizeof v, what);
  return v;
}

const std::vector<std::string>& split_names() {
  static const std::vector<std::string> names = {"train", "val", "test"};
  return names;
}

bool known_split(const std::string& split) {
  for (const std::string& name : split_names()) {
    if (name == split) return true;
  }
  return false;
}

}  // namespace

void save_sample(const std::string& path, const Sample& sample) {
  if (!sample.intensity.defined() || sample.intensity.ndim() != 4 ||
      sample.intensity.extent(0) != 1) {
    throw ShapeError("save_sample: intensity must be a [1,D,H,W] tensor");
  }
  const Dims3& dims = sample.labels.dims;
  if (sample.intensity.extent(1) != dims.d || sample.intensity.extent(2) != dims.h ||
      sample.intensity.extent(3) != dims.w) {
    throw ShapeError("save_sample: intensity shape does not match labels " + dims.str());
  }
  sample.labels.validate("save_sample");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open volume file for writing: " + path);
  write_bytes(out, kMagic, sizeof kMagic);
  const std::uint64_t header[3] = {dims.d, dims.h, dims.w};
  write_bytes(out, header, sizeof header);
  const std::uint32_t num_classes = static_cast<std::uint32_t>(sample.labels.num_classes);
  write_bytes(out, &num_classes, sizeof num_classes);
  write_bytes(out, &kIntensityDtype, 1);
  write_bytes(out, &kLabelDtype, 1);
  const auto intensity = sample.intensity.data();
  write_bytes(out, intensity.data(), intensity.size() * sizeof(double));
  write_bytes(out, sample.labels.labels.data(), sample.labels.labels.size() * sizeof(std::uint16_t));
  if (!out) throw DataError("failed while writing volume file: " + path);
}

Sample load_sample(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open volume file: " + path);
  char magic[4] = {};
  read_bytes(in, magic, sizeof magic, "magic");
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw DataError("not a CSV1 volume file: " + path);
  }
  Dims3 dims;
  dims.d = read_u64(in, "depth");
  dims.h = read_u64(in, "height");
  dims.w = read_u64(in, "width");
  if (dims.numel() == 0 || dims.numel() > (1ULL << 32)) {
    throw DataError("implausible volume dims " + dims.str() + " in " + path);
  }
  std::uint32_t num_classes = 0;
  read_bytes(in, &num_classes, sizeof num_classes, "num_classes");
  std::uint8_t dtypes[2] = {};
  read_bytes(in, dtypes, sizeof dtypes, "dtype codes");
  if (dtypes[0] != kIntensityDtype || dtypes[1] != kLabelDtype) {
    throw DataError("unsupported dtype codes in " + path);
  }
  std::vector<double> vox(dims.numel());
  read_bytes(in, vox.data(), vox.size() * sizeof(double), "intensity block");
  for (double v : vox) {
    if (!std::isfinite(v)) throw DataError("non-finite intensity value in " + path);
  }
  LabelVolume labels = LabelVolume::zeros(dims, static_cast<int>(num_classes));
  read_bytes(in, labels.labels.data(), labels.labels.size() * sizeof(std::uint16_t),
             "label block");
  labels.validate(("load_sample " + path).c_str());
  Tensor intensity = Tensor::from_data({1, dims.d, dims.h, dims.w}, std::move(vox));
  return {std::move(intensity), std::move(labels)};
}

std::vector<std::string> DatasetManifest::files_for(const std::string& split) const {
  std::vector<std::string> out;
  for (const ManifestEntry& entry : entries) {
    if (entry.split != split) continue;
    out.push_back(base_dir.empty()
                      ? entry.file
                      : (std::filesystem::path(base_dir) / entry.file).string());
  }
  return out;
}

void save_manifest(const std::string& path, const DatasetManifest& manifest) {
  nlohmann::json j;
  j["format"] = "CSV1";
  j["num_classes"] = manifest.num_classes;
  j["shape"] = {manifest.shape.d, manifest.shape.h, manifest.shape.w};
  nlohmann::json volumes = nlohmann::json::array();
  for (const ManifestEntry& entry : manifest.entries) {
    if (!known_split(entry.split)) {
      throw UsageError("unknown split assignment: " + entry.split);
    }
    volumes.push_back({{"file", entry.file}, {"split", entry.split}});
  }
  j["volumes"] = std::move(volumes);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open manifest for writing: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw DataError("failed while writing manifest: " + path);
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path);
  nlohmann::json j;
  try {
    in >> j;
    DatasetManifest manifest;
    if (j.at("format").get<std::string>() != "CSV1") {
      throw DataError("unsupported dataset format in " + path);
    }
    manifest.num_classes = j.at("num_classes").get<int>();
    const auto shape = j.at("shape");
    if (!shape.is_array() || shape.size() != 3) {
      throw DataError("manifest shape must have three dims in " + path);
    }
    manifest.shape = {shape[0].get<std::size_t>(), shape[1].get<std::size_t>(),
                      shape[2].get<std::size_t>()};
    for (const auto& item : j.at("volumes")) {
      ManifestEntry entry{item.at("file").get<std::string>(),
                          item.at("split").get<std::string>()};
      if (!known_split(entry.split)) {
        throw DataError("unknown split \"" + entry.split + "\" in " + path);
      }
      manifest.entries.push_back(std::move(entry));
    }
    manifest.base_dir = std::filesystem::path(path).parent_path().string();
    return manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + path + ": " + e.what());
  }
}

DatasetManifest write_dataset(const std::string& dir, const DatasetSpec& spec,
                              int num_train, int num_val, int num_test) {
  if (num_train < 0 || num_val < 0 || num_test < 0 ||
      num_train + num_val + num_test != spec.num_volumes) {
    throw UsageError("split sizes must be non-negative and sum to num_volumes");
  }
  const std::vector<Sample> samples = generate(spec);
  std::filesystem::create_directories(dir);
  DatasetManifest manifest;
  manifest.num_classes = spec.num_classes();
  manifest.shape = spec.shape;
  manifest.base_dir = dir;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "vol_%04zu.csv1", i);
    const std::string split = static_cast<int>(i) < num_train             ? "train"
                              : static_cast<int>(i) < num_train + num_val ? "val"
                                                                          : "test";
    save_sample((std::filesystem::path(dir) / name).string(), samples[i]);
    manifest.entries.push_back({name, split});
  }
  save_manifest((std::filesystem::path(dir) / "manifest.json").string(), manifest);
  return manifest;
}

std::vector<Sample> load_split(const DatasetManifest& manifest, const std::string& split) {
  if (!known_split(split)) throw UsageError("unknown split: " + split);
  std::vector<Sample> out;
  for (const std::string& file : manifest.files_for(split)) {
    Sample sample = load_sample(file);
    if (sample.labels.dims != manifest.shape ||
        sample.labels.num_classes != manifest.num_classes) {
      throw DataError("volume " + file + " does not match the manifest header");
    }
    out.push_back(std::move(sample));
  }
  return out;
}

}  // namespace contourseg
