#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "contourseg/common.hpp"

namespace contourseg {

struct Dims3 {
  std::size_t d = 0, h = 0, w = 0;

  std::size_t numel() const { return d * h * w; }
  bool operator==(const Dims3&) const = default;
  std::string str() const {
    return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w);
  }
};

// Flat row-major 0/1 volume.
struct BinaryMask {
  Dims3 dims;
  std::vector<std::uint8_t> voxels;

  static BinaryMask zeros(Dims3 dims) { return {dims, std::vector<std::uint8_t>(dims.numel(), 0)}; }

  std::uint8_t at(std::size_t z, std::size_t y, std::size_t x) const {
    return voxels[(z * dims.h + y) * dims.w + x];
  }
  std::uint8_t& at(std::size_t z, std::size_t y, std::size_t x) {
    return voxels[(z * dims.h + y) * dims.w + x];
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (std::uint8_t v : voxels) n += v;
    return n;
  }
  // Throws DataError if any voxel is not 0 or 1, or the buffer size is off.
  void validate(const char* what) const {
    if (voxels.size() != dims.numel()) {
      throw DataError(std::string(what) + ": mask buffer does not match dims " + dims.str());
    }
    for (std::uint8_t v : voxels) {
      if (v > 1) throw DataError(std::string(what) + ": mask must be binary");
    }
  }
};

// Dense voxel-wise class labels; class 0 is background.
struct LabelVolume {
  Dims3 dims;
  int num_classes = 0;
  std::vector<std::uint16_t> labels;

  static LabelVolume zeros(Dims3 dims, int num_classes) {
    return {dims, num_classes, std::vector<std::uint16_t>(dims.numel(), 0)};
  }

  std::uint16_t at(std::size_t z, std::size_t y, std::size_t x) const {
    return labels[(z * dims.h + y) * dims.w + x];
  }
  std::uint16_t& at(std::size_t z, std::size_t y, std::size_t x) {
    return labels[(z * dims.h + y) * dims.w + x];
  }

  void validate(const char* what) const {
    if (num_classes < 1) {
      throw DataError(std::string(what) + ": num_classes must be positive");
    }
    if (labels.size() != dims.numel()) {
      throw DataError(std::string(what) + ": label buffer does not match dims " + dims.str());
    }
    for (std::uint16_t v : labels) {
      if (v >= num_classes) {
        throw DataError(std::string(what) + ": label " + std::to_string(v) +
                        " out of range for " + std::to_string(num_classes) + " classes");
      }
    }
  }

  BinaryMask class_mask(int cls) const {
    BinaryMask m = BinaryMask::zeros(dims);
    for (std::size_t i = 0; i < labels.size(); ++i) m.voxels[i] = labels[i] == cls ? 1 : 0;
    return m;
  }

  std::size_t class_count(int cls) const {
    std::size_t n = 0;
    for (std::uint16_t v : labels) n += v == cls ? 1 : 0;
    return n;
  }
};

}  // namespace contourseg
