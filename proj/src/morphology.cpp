#include "contourseg/morphology.hpp"

namespace contourseg {

void StructuringElement::validate() const {
  if (k < 1) throw UsageError("structuring element size must be >= 1");
  for (int a : anchor) {
    if (a < 0 || a >= k) {
      throw UsageError("structuring element anchor must lie inside the element");
    }
  }
}

namespace {

// One erosion pass along a single axis: out voxel survives iff the k-window
// starting anchor steps behind it is all-foreground and in bounds.
void erode_axis(const std::vector<std::uint8_t>& in, std::vector<std::uint8_t>& out,
                Dims3 dims, int axis, int k, int anchor) {
  const long long extent = static_cast<long long>(axis == 0 ? dims.d : axis == 1 ? dims.h : dims.w);
  for (std::size_t z = 0; z < dims.d; ++z) {
    for (std::size_t y = 0; y < dims.h; ++y) {
      for (std::size_t x = 0; x < dims.w; ++x) {
        const long long pos = static_cast<long long>(axis == 0 ? z : axis == 1 ? y : x);
        const long long lo = pos - anchor;
        std::uint8_t keep = 1;
        if (lo < 0 || lo + k > extent) {
          keep = 0;
        } else {
          for (int j = 0; j < k && keep; ++j) {
            const std::size_t zz = axis == 0 ? static_cast<std::size_t>(lo + j) : z;
            const std::size_t yy = axis == 1 ? static_cast<std::size_t>(lo + j) : y;
            const std::size_t xx = axis == 2 ? static_cast<std::size_t>(lo + j) : x;
            keep = in[(zz * dims.h + yy) * dims.w + xx];
          }
        }
        out[(z * dims.h + y) * dims.w + x] = keep;
      }
    }
  }
}

}  // namespace

BinaryMask erode(const BinaryMask& mask, const StructuringElement& se, int iterations) {
  se.validate();
  if (iterations < 1) throw UsageError("erosion iterations must be >= 1");
  mask.validate("erode");

  BinaryMask cur = mask;
  if (se.k == 1) return cur;  // single-voxel element is the identity
  BinaryMask tmp = BinaryMask::zeros(mask.dims);
  for (int it = 0; it < iterations; ++it) {
    erode_axis(cur.voxels, tmp.voxels, mask.dims, 0, se.k, se.anchor[0]);
    erode_axis(tmp.voxels, cur.voxels, mask.dims, 1, se.k, se.anchor[1]);
    erode_axis(cur.voxels, tmp.voxels, mask.dims, 2, se.k, se.anchor[2]);
    std::swap(cur.voxels, tmp.voxels);
  }
  return cur;
}

ContourMaps extract_contours(const LabelVolume& gt, const StructuringElement& se,
                             int iterations) {
  se.validate();
  if (iterations < 1) throw UsageError("erosion iterations must be >= 1");
  gt.validate("extract_contours");

  ContourMaps maps;
  maps.num_classes = gt.num_classes;
  maps.eroded.assign(gt.num_classes, BinaryMask::zeros(gt.dims));
  maps.contour.assign(gt.num_classes, BinaryMask::zeros(gt.dims));
  if (gt.num_classes < 2) return maps;

  run_jobs(static_cast<std::size_t>(gt.num_classes) - 1, [&](std::size_t job) {
    const int cls = static_cast<int>(job) + 1;
    const BinaryMask g = gt.class_mask(cls);
    BinaryMask e = erode(g, se, iterations);
    BinaryMask c = BinaryMask::zeros(gt.dims);
    for (std::size_t i = 0; i < g.voxels.size(); ++i) {
      c.voxels[i] = static_cast<std::uint8_t>(g.voxels[i] & ~e.voxels[i]);
    }
    maps.eroded[cls] = std::move(e);
    maps.contour[cls] = std::move(c);
  });
  return maps;
}

}  // namespace contourseg
