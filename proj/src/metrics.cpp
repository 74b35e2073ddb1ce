#include "contourseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace contourseg {

double dsc(const LabelVolume& pred, const LabelVolume& gt, int cls) {
  if (!(pred.dims == gt.dims)) {
    throw ShapeError("dsc: prediction grid " + pred.dims.str() + " does not match labels " +
                     gt.dims.str());
  }
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const bool in_p = pred.labels[i] == cls;
    const bool in_g = gt.labels[i] == cls;
    p += in_p;
    g += in_g;
    both += in_p && in_g;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::vector<Voxel> surface_voxels(const BinaryMask& mask) {
  mask.validate("surface_voxels");
  const Dims3 d = mask.dims;
  std::vector<Voxel> out;
  for (std::size_t z = 0; z < d.d; ++z) {
    for (std::size_t y = 0; y < d.h; ++y) {
      for (std::size_t x = 0; x < d.w; ++x) {
        if (!mask.at(z, y, x)) continue;
        const bool exposed =
            z == 0 || !mask.at(z - 1, y, x) || z == d.d - 1 || !mask.at(z + 1, y, x) ||
            y == 0 || !mask.at(z, y - 1, x) || y == d.h - 1 || !mask.at(z, y + 1, x) ||
            x == 0 || !mask.at(z, y, x - 1) || x == d.w - 1 || !mask.at(z, y, x + 1);
        if (exposed) {
          out.push_back({static_cast<int>(z), static_cast<int>(y), static_cast<int>(x)});
        }
      }
    }
  }
  return out;
}

double percentile(std::span<const double> sorted_samples, double q) {
  if (sorted_samples.empty()) throw UsageError("percentile of an empty sample set");
  if (q < 0.0 || q > 1.0) throw UsageError("percentile rank must lie in [0,1]");
  const double rank = q * static_cast<double>(sorted_samples.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  const double frac = rank - static_cast<double>(lo);
  if (frac == 0.0 || lo + 1 >= sorted_samples.size()) return sorted_samples[lo];
  return sorted_samples[lo] + frac * (sorted_samples[lo + 1] - sorted_samples[lo]);
}

namespace {

long long dist_sq(const Voxel& a, const Voxel& b) {
  const long long dz = a.z - b.z, dy = a.y - b.y, dx = a.x - b.x;
  return dz * dz + dy * dy + dx * dx;
}

// Exact nearest-neighbor queries against a fixed point set: linear scan for
// small sets, an in-place KD layout (median at the middle of each range,
// axes cycling z,y,x) beyond that. Both paths compute the identical squared
// distance, so they agree bitwise.
class NearestSurface {
 public:
  explicit NearestSurface(std::vector<Voxel> pts) : pts_(std::move(pts)) {
    if (pts_.size() > kBruteLimit) build(0, pts_.size(), 0);
  }

  double nearest(const Voxel& q) const {
    long long best = std::numeric_limits<long long>::max();
    if (pts_.size() <= kBruteLimit) {
      for (const Voxel& p : pts_) best = std::min(best, dist_sq(q, p));
    } else {
      search(0, pts_.size(), 0, q, best);
    }
    return std::sqrt(static_cast<double>(best));
  }

 private:
  static constexpr std::size_t kBruteLimit = 24;

  static int coord(const Voxel& v, int axis) { return axis == 0 ? v.z : axis == 1 ? v.y : v.x; }

  void build(std::size_t lo, std::size_t hi, int axis) {
    if (hi - lo <= 1) return;
    const std::size_t mid = (lo + hi) / 2;
    std::nth_element(pts_.begin() + lo, pts_.begin() + mid, pts_.begin() + hi,
                     [axis](const Voxel& a, const Voxel& b) {
                       return coord(a, axis) < coord(b, axis);
                     });
    const int next = (axis + 1) % 3;
    build(lo, mid, next);
    build(mid + 1, hi, next);
  }

  void search(std::size_t lo, std::size_t hi, int axis, const Voxel& q, long long& best) const {
    if (lo >= hi) return;
    const std::size_t mid = (lo + hi) / 2;
    best = std::min(best, dist_sq(q, pts_[mid]));
    const long long diff = coord(q, axis) - coord(pts_[mid], axis);
    const int next = (axis + 1) % 3;
    if (diff < 0) {
      search(lo, mid, next, q, best);
      if (diff * diff < best) search(mid + 1, hi, next, q, best);
    } else {
      search(mid + 1, hi, next, q, best);
      if (diff * diff < best) search(lo, mid, next, q, best);
    }
  }

  std::vector<Voxel> pts_;
};

struct PooledDistances {
  std::vector<double> samples;  // pred->gt distances then gt->pred distances
  double sum = 0.0;
};

std::optional<PooledDistances> pooled_surface_distances(const BinaryMask& pred,
                                                        const BinaryMask& gt) {
  if (!(pred.dims == gt.dims)) {
    throw ShapeError("surface distance: grids " + pred.dims.str() + " vs " + gt.dims.str());
  }
  const std::vector<Voxel> sp = surface_voxels(pred);
  const std::vector<Voxel> sg = surface_voxels(gt);
  if (sp.empty() || sg.empty()) return std::nullopt;

  PooledDistances out;
  out.samples.resize(sp.size() + sg.size());
  {
    const NearestSurface to_gt(sg);
    run_jobs(sp.size(), [&](std::size_t i) { out.samples[i] = to_gt.nearest(sp[i]); });
  }
  {
    const NearestSurface to_pred(sp);
    run_jobs(sg.size(),
             [&](std::size_t i) { out.samples[sp.size() + i] = to_pred.nearest(sg[i]); });
  }
  // Per-direction partial sums added once keep the total exactly symmetric
  // in the argument order.
  double sum_p = 0.0, sum_g = 0.0;
  for (std::size_t i = 0; i < sp.size(); ++i) sum_p += out.samples[i];
  for (std::size_t i = sp.size(); i < out.samples.size(); ++i) sum_g += out.samples[i];
  out.sum = sum_p + sum_g;
  return out;
}

ClassMetrics class_metrics(const LabelVolume& pred, const LabelVolume& gt, int cls) {
  ClassMetrics cm;
  cm.dsc = dsc(pred, gt, cls);
  const auto pooled = pooled_surface_distances(pred.class_mask(cls), gt.class_mask(cls));
  if (pooled) {
    std::vector<double> sorted = pooled->samples;
    std::sort(sorted.begin(), sorted.end());
    cm.hd95 = percentile(sorted, 0.95);
    cm.assd = pooled->sum / static_cast<double>(pooled->samples.size());
  }
  return cm;
}

}  // namespace

std::optional<double> hd95(const BinaryMask& pred, const BinaryMask& gt) {
  const auto pooled = pooled_surface_distances(pred, gt);
  if (!pooled) return std::nullopt;
  std::vector<double> sorted = pooled->samples;
  std::sort(sorted.begin(), sorted.end());
  return percentile(sorted, 0.95);
}

std::optional<double> assd(const BinaryMask& pred, const BinaryMask& gt) {
  const auto pooled = pooled_surface_distances(pred, gt);
  if (!pooled) return std::nullopt;
  return pooled->sum / static_cast<double>(pooled->samples.size());
}

MetricReport evaluate_metrics(const LabelVolume& pred, const LabelVolume& gt) {
  pred.validate("evaluate_metrics prediction");
  gt.validate("evaluate_metrics labels");
  if (!(pred.dims == gt.dims) || pred.num_classes != gt.num_classes) {
    throw ShapeError("evaluate_metrics: prediction and labels disagree in shape or classes");
  }
  MetricReport report;
  double dsc_sum = 0.0, hd_sum = 0.0, assd_sum = 0.0;
  int hd_defined = 0;
  for (int cls = 1; cls < gt.num_classes; ++cls) {
    ClassMetrics cm = class_metrics(pred, gt, cls);
    dsc_sum += cm.dsc;
    if (cm.hd95) {
      hd_sum += *cm.hd95;
      assd_sum += *cm.assd;
      ++hd_defined;
    }
    report.per_class.emplace(cls, std::move(cm));
  }
  const int foreground = gt.num_classes - 1;
  report.mean_dsc = foreground > 0 ? dsc_sum / foreground : 1.0;
  if (hd_defined > 0) {
    report.mean_hd95 = hd_sum / hd_defined;
    report.mean_assd = assd_sum / hd_defined;
  }
  return report;
}

}  // namespace contourseg
