#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "contourseg/common.hpp"
#include "contourseg/tensor.hpp"
#include "contourseg/volume.hpp"

namespace contourseg {

enum class ShapeFamily { ellipsoid, box, shell };

std::string to_string(ShapeFamily family);
ShapeFamily shape_family_from_string(const std::string& name);

// One foreground class of the synthetic phantom: a target voxel fraction,
// the geometric primitive used to realize it, how often it appears, and the
// mean intensity painted where it does.
struct ClassSpec {
  double fraction = 0.0;
  ShapeFamily family = ShapeFamily::ellipsoid;
  double probability = 1.0;
  double intensity = 0.5;
};

// Full recipe for a seeded dataset of imbalanced multi-class volumes. Class
// IDs are 1..classes.size() in order; 0 is background.
struct DatasetSpec {
  std::uint64_t seed = 0;
  int num_volumes = 1;
  Dims3 shape{32, 32, 32};
  std::vector<ClassSpec> classes;
  double background_intensity = 0.1;
  double noise_stddev = 0.15;

  int num_classes() const { return static_cast<int>(classes.size()) + 1; }
  // Throws UsageError on invalid fields or jointly infeasible fractions.
  void validate() const;

  // Benchmark recipe with a ~250x volume spread plus one rare class:
  // large ellipsoid (25%), medium box (4%), small shell (0.4%) always
  // present, tiny ellipsoid (0.1%) in one sample of five.
  static DatasetSpec imbalance_v1(std::uint64_t seed, int num_volumes);
};

// One volume: a single-channel intensity tensor [1, D, H, W] and dense
// voxel labels of matching dims.
struct Sample {
  Tensor intensity;
  LabelVolume labels;
};

// Generates spec.num_volumes samples. Deterministic given spec.seed; each
// volume uses its own derived seed, so generation order and thread count do
// not affect the output. Shapes are placed so that every foreground voxel
// lies inside the axial inscribed cylinder (in-plane rotations never clip
// them); classes are painted in spec order, later classes overwriting
// earlier ones where they nest. Throws UsageError when a class cannot fit.
std::vector<Sample> generate(const DatasetSpec& spec);

// Splits a volume into axial patches of patch_depth slices at stride
// patch_depth - overlap, with the final patch clamped so every slice is
// covered. A patch depth >= the volume depth yields one full-volume patch.
// Requires 0 <= overlap < patch_depth.
std::vector<Sample> slice_patches(const Sample& volume, int patch_depth, int overlap);

// Random training augmentation: with p=0.2 an in-plane axial rotation by a
// uniform angle in [0, 15] degrees (nearest-neighbor labels, trilinear
// intensity, out-of-plane samples fill with zero); then with p=0.2 a
// horizontal or vertical flip (equal odds). Draw order is fixed: rotation
// gate, angle if taken, flip gate, axis if taken. The input is not modified.
Sample augment(const Sample& sample, Rng& rng);

}  // namespace contourseg
