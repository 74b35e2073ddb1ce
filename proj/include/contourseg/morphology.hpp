#pragma once

#include <array>
#include <vector>

#include "contourseg/volume.hpp"

namespace contourseg {

// Solid axis-aligned cube of side k. A voxel survives erosion iff every
// voxel covered by the cube, placed with `anchor` on that voxel, is
// foreground; anything outside the volume counts as background.
struct StructuringElement {
  int k = 2;
  std::array<int, 3> anchor{0, 0, 0};

  // Centered anchor for odd k; corner anchor (0,0,0) for even k, which has
  // no center voxel.
  static StructuringElement cube(int k) {
    StructuringElement se;
    se.k = k;
    const int c = (k % 2 == 1) ? (k - 1) / 2 : 0;
    se.anchor = {c, c, c};
    return se;
  }

  void validate() const;
};

// Erosion applied `iterations` times in sequence. Implemented as three 1-D
// passes per iteration (a cube factors into axis segments).
BinaryMask erode(const BinaryMask& mask, const StructuringElement& se, int iterations);

// Per-class erosion/contour maps for every class of a label volume, index
// aligned with class IDs. The background entry (class 0) is all-zero: the
// background carries no contour weight.
struct ContourMaps {
  int num_classes = 0;
  std::vector<BinaryMask> eroded;
  std::vector<BinaryMask> contour;

  // The per-class weight map is the contour map itself.
  const std::vector<BinaryMask>& weight_map() const { return contour; }
};

ContourMaps extract_contours(const LabelVolume& gt, const StructuringElement& se,
                             int iterations);

}  // namespace contourseg
