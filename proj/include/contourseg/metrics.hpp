#pragma once

#include <map>
#include <optional>
#include <span>
#include <vector>

#include "contourseg/volume.hpp"

namespace contourseg {

struct Voxel {
  int z = 0, y = 0, x = 0;
  bool operator==(const Voxel&) const = default;
};

// Overlap score 2|P∩G| / (|P|+|G|) for one class. Both masks empty -> 1.0,
// exactly one empty -> 0.0.
double dsc(const LabelVolume& pred, const LabelVolume& gt, int cls);

// Foreground voxels with at least one 6-connected background or
// out-of-volume neighbor, in scan order.
std::vector<Voxel> surface_voxels(const BinaryMask& mask);

// Inclusive linear interpolation at rank q*(n-1) of an ascending sample
// vector (the convention is pinned here because percentile definitions
// differ across tools).
double percentile(std::span<const double> sorted_samples, double q);

// 95th percentile / mean of the pooled two-directional nearest surface
// distances between the masks, in voxel units. Empty surface on either side
// -> nullopt.
std::optional<double> hd95(const BinaryMask& pred, const BinaryMask& gt);
std::optional<double> assd(const BinaryMask& pred, const BinaryMask& gt);

struct ClassMetrics {
  double dsc = 0.0;
  std::optional<double> hd95;
  std::optional<double> assd;
};

struct MetricReport {
  std::map<int, ClassMetrics> per_class;  // foreground classes only
  double mean_dsc = 0.0;                  // over all foreground classes
  std::optional<double> mean_hd95;        // over classes where defined
  std::optional<double> mean_assd;
};

// Per-foreground-class DSC/HD95/ASSD between two label volumes of the same
// shape and class count.
MetricReport evaluate_metrics(const LabelVolume& pred, const LabelVolume& gt);

}  // namespace contourseg
