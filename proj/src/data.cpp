#include "contourseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <utility>

namespace contourseg {

namespace {

constexpr double kPi = 3.14159265358979323846;

double sq(double v) { return v * v; }

// Geometric primitive in continuous coordinates relative to its center.
// az/ay/ax are semi-axes (ellipsoid), half-extents (box), or the outer
// radius (shell, all three equal); `inner` is the shell's inner/outer
// radius ratio. A scale factor s stretches every extent uniformly.
struct ShapePlan {
  ShapeFamily family = ShapeFamily::ellipsoid;
  double az = 0.0, ay = 0.0, ax = 0.0;
  double inner = 0.0;

  bool contains(double s, long long dz, long long dy, long long dx) const {
    const double z = static_cast<double>(dz);
    const double y = static_cast<double>(dy);
    const double x = static_cast<double>(dx);
    switch (family) {
      case ShapeFamily::ellipsoid:
        return sq(z / (s * az)) + sq(y / (s * ay)) + sq(x / (s * ax)) <= 1.0;
      case ShapeFamily::box:
        return std::abs(z) <= s * az && std::abs(y) <= s * ay && std::abs(x) <= s * ax;
      case ShapeFamily::shell: {
        const double r2 = z * z + y * y + x * x;
        const double outer = s * az;
        return r2 <= sq(outer) && r2 >= sq(inner * outer);
      }
    }
    return false;
  }

  // Largest horizontal distance from the center that the shape can reach.
  double reach_xy() const {
    switch (family) {
      case ShapeFamily::ellipsoid: return std::max(ay, ax);
      case ShapeFamily::box: return std::hypot(ay, ax);
      case ShapeFamily::shell: return az;
    }
    return 0.0;
  }
};

struct Cell {
  long long dz, dy, dx;
};

// Voxel offsets covered by the scaled shape, with the vertical extent and
// the in-plane radius actually reached.
struct Footprint {
  std::vector<Cell> cells;
  long long zmax = 0;
  double rxy = 0.0;
};

Footprint voxelize(const ShapePlan& plan, double s) {
  Footprint out;
  const long long bz = static_cast<long long>(std::floor(s * plan.az));
  const long long by = static_cast<long long>(
      std::floor(s * (plan.family == ShapeFamily::shell ? plan.az : plan.ay)));
  const long long bx = static_cast<long long>(
      std::floor(s * (plan.family == ShapeFamily::shell ? plan.az : plan.ax)));
  for (long long dz = -bz; dz <= bz; ++dz) {
    for (long long dy = -by; dy <= by; ++dy) {
      for (long long dx = -bx; dx <= bx; ++dx) {
        if (!plan.contains(s, dz, dy, dx)) continue;
        out.cells.push_back({dz, dy, dx});
        out.zmax = std::max(out.zmax, std::llabs(dz));
        out.rxy = std::max(out.rxy, std::hypot(static_cast<double>(dy), static_cast<double>(dx)));
      }
    }
  }
  return out;
}

std::size_t count_at(const ShapePlan& plan, double s) { return voxelize(plan, s).cells.size(); }

// Horizontal placement must keep the whole shape inside the inscribed
// axial disk so in-plane rotations never clip it; an extra 0.75 of slack
// guarantees at least one voxel-grid center candidate survives.
double disk_radius(Dims3 dims) {
  return 0.5 * static_cast<double>(std::min(dims.h, dims.w) - 1);
}
constexpr double kCenterSlack = 0.75;

// Builds a shape whose continuous volume matches the target voxel count,
// squashed against the horizontal/vertical caps when the draw does not fit.
ShapePlan plan_shape(const ClassSpec& cls, double target, Dims3 dims, Rng& rng) {
  const double cap_xy = disk_radius(dims) - 1.0;
  const double cap_z = 0.5 * static_cast<double>(dims.d - 1);
  if (cap_xy <= 0.0 || cap_z <= 0.0) {
    throw UsageError("volume too small to place any class shape");
  }
  ShapePlan plan;
  plan.family = cls.family;
  if (cls.family == ShapeFamily::shell) {
    const double rho = rng.uniform(0.25, 0.4);
    plan.inner = 1.0 - rho;
    const double hollow = 1.0 - plan.inner * plan.inner * plan.inner;
    double outer = std::cbrt(target * 3.0 / (4.0 * kPi * hollow));
    const double cap = std::min(cap_xy, cap_z);
    if (outer > cap) {
      // Thicken the shell instead of growing past the cap.
      outer = cap;
      const double need = target * 3.0 / (4.0 * kPi * outer * outer * outer);
      if (need >= 1.0) throw UsageError("shell class fraction too large for the volume");
      plan.inner = std::cbrt(1.0 - need);
    }
    plan.az = plan.ay = plan.ax = outer;
    return plan;
  }
  const double unit = cls.family == ShapeFamily::ellipsoid ? 4.0 / 3.0 * kPi : 8.0;
  const double rz = rng.uniform(0.8, 1.25);
  const double ry = rng.uniform(0.8, 1.25);
  const double rx = rng.uniform(0.8, 1.25);
  const double r0 = std::cbrt(target / (unit * rz * ry * rx));
  plan.az = r0 * rz;
  plan.ay = r0 * ry;
  plan.ax = r0 * rx;
  if (plan.reach_xy() > cap_xy) {
    const double shrink = cap_xy / plan.reach_xy();
    plan.ay *= shrink;
    plan.ax *= shrink;
    plan.az = target / (unit * plan.ay * plan.ax);
  }
  if (plan.az > cap_z) {
    // Flatten against the vertical cap: the in-plane axes must then cover
    // area / (unit * cap_z); an ellipsoid can reach cap_xy on both axes, a
    // box only hypot(ay, ax) <= cap_xy.
    plan.az = cap_z;
    const double area = target / (unit * plan.az);
    const double max_area =
        cls.family == ShapeFamily::ellipsoid ? cap_xy * cap_xy : 0.5 * cap_xy * cap_xy;
    if (area > max_area * (1.0 + 1e-9)) {
      throw UsageError("class fraction too large to fit the volume");
    }
    const double grow = std::sqrt(area / (plan.ay * plan.ax));
    plan.ay *= grow;
    plan.ax *= grow;
    if (plan.reach_xy() > cap_xy) {
      if (cls.family == ShapeFamily::box) {
        plan.ay = plan.ax = std::sqrt(area);
      } else if (plan.ay >= plan.ax) {
        plan.ay = cap_xy;
        plan.ax = area / cap_xy;
      } else {
        plan.ax = cap_xy;
        plan.ay = area / cap_xy;
      }
    }
  }
  return plan;
}

// Picks the uniform scale whose voxelized count lands closest to the
// target. The count is monotone in the scale up to voxelization noise; a
// local sweep around the bisection point absorbs the noise.
double fit_scale(const ShapePlan& plan, std::size_t target, Dims3 dims) {
  const double hard_xy = disk_radius(dims) - kCenterSlack;
  const double hard_z = 0.5 * static_cast<double>(dims.d - 1);
  double s_max = std::min(1.6, hard_z / plan.az);
  s_max = std::min(s_max, hard_xy / plan.reach_xy());
  const double s_min = std::min(0.5, s_max);
  double lo = s_min, hi = s_max;
  if (count_at(plan, lo) >= target) {
    hi = lo;
  } else if (count_at(plan, hi) <= target) {
    lo = hi;
  } else {
    for (int i = 0; i < 30; ++i) {
      const double mid = 0.5 * (lo + hi);
      (count_at(plan, mid) >= target ? hi : lo) = mid;
    }
  }
  const double mults[] = {1.0, 0.97, 1.03, 0.94, 1.06};
  double best_s = hi;
  long long best_gap = -1;
  for (double m : mults) {
    const double s = std::clamp(hi * m, s_min, s_max);
    const long long gap = std::llabs(static_cast<long long>(count_at(plan, s)) -
                                     static_cast<long long>(target));
    if (best_gap < 0 || gap < best_gap || (gap == best_gap && s < best_s)) {
      best_gap = gap;
      best_s = s;
    }
  }
  return best_s;
}

struct Center {
  long long cz, cy, cx;
};

Center place(const Footprint& foot, Dims3 dims, Rng& rng) {
  const long long zlo = foot.zmax;
  const long long zhi = static_cast<long long>(dims.d) - 1 - foot.zmax;
  const double py0 = 0.5 * static_cast<double>(dims.h - 1);
  const double px0 = 0.5 * static_cast<double>(dims.w - 1);
  const double rb = disk_radius(dims) - foot.rxy;
  if (zhi < zlo || rb < 0.0) {
    throw UsageError("class shape does not fit the volume");
  }
  const long long ylo = static_cast<long long>(std::ceil(py0 - rb));
  const long long yhi = static_cast<long long>(std::floor(py0 + rb));
  const long long xlo = static_cast<long long>(std::ceil(px0 - rb));
  const long long xhi = static_cast<long long>(std::floor(px0 + rb));
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const long long cz = zlo + static_cast<long long>(rng.uniform_int(zhi - zlo + 1));
    const long long cy = ylo + static_cast<long long>(rng.uniform_int(yhi - ylo + 1));
    const long long cx = xlo + static_cast<long long>(rng.uniform_int(xhi - xlo + 1));
    if (std::hypot(cy - py0, cx - px0) <= rb) return {cz, cy, cx};
  }
  throw UsageError("could not place a class shape inside the volume");
}

Sample generate_one(const DatasetSpec& spec, std::size_t index) {
  Rng rng(derive_seed(spec.seed, index));
  LabelVolume labels = LabelVolume::zeros(spec.shape, spec.num_classes());
  // All presence gates are drawn up front so each stage consumes a fixed,
  // documented number of draws.
  std::vector<char> present(spec.classes.size());
  for (std::size_t j = 0; j < spec.classes.size(); ++j) {
    present[j] = rng.bernoulli(spec.classes[j].probability) ? 1 : 0;
  }
  const double numel = static_cast<double>(spec.shape.numel());
  for (std::size_t j = 0; j < spec.classes.size(); ++j) {
    if (!present[j]) continue;
    const ClassSpec& cls = spec.classes[j];
    const std::size_t target = static_cast<std::size_t>(
        std::max(1.0, std::round(cls.fraction * numel)));
    const ShapePlan plan = plan_shape(cls, static_cast<double>(target), spec.shape, rng);
    const Footprint foot = voxelize(plan, fit_scale(plan, target, spec.shape));
    const Center at = place(foot, spec.shape, rng);
    for (const Cell& cell : foot.cells) {
      labels.at(static_cast<std::size_t>(at.cz + cell.dz),
                static_cast<std::size_t>(at.cy + cell.dy),
                static_cast<std::size_t>(at.cx + cell.dx)) =
          static_cast<std::uint16_t>(j + 1);
    }
  }
  std::vector<double> vox(spec.shape.numel());
  for (std::size_t i = 0; i < vox.size(); ++i) {
    const std::uint16_t label = labels.labels[i];
    const double mean =
        label == 0 ? spec.background_intensity : spec.classes[label - 1].intensity;
    vox[i] = mean + spec.noise_stddev * rng.normal();
  }
  Tensor intensity =
      Tensor::from_data({1, spec.shape.d, spec.shape.h, spec.shape.w}, std::move(vox));
  return {std::move(intensity), std::move(labels)};
}

void check_sample(const Sample& sample, const char* what) {
  if (!sample.intensity.defined() || sample.intensity.ndim() != 4 ||
      sample.intensity.extent(0) != 1) {
    throw ShapeError(std::string(what) + ": intensity must be a [1,D,H,W] tensor");
  }
  const Dims3& dims = sample.labels.dims;
  if (sample.intensity.extent(1) != dims.d || sample.intensity.extent(2) != dims.h ||
      sample.intensity.extent(3) != dims.w) {
    throw ShapeError(std::string(what) + ": intensity shape does not match labels " + dims.str());
  }
}

Sample clone(const Sample& sample) {
  const auto src = sample.intensity.data();
  return {Tensor::from_data(sample.intensity.shape(), std::vector<double>(src.begin(), src.end())),
          sample.labels};
}

// Axial rotation leaves z fixed, so trilinear interpolation of the
// intensity reduces to bilinear within each slice. Labels take the nearest
// source voxel; samples falling outside the volume read as zero/background.
Sample rotate_axial(const Sample& sample, double degrees) {
  const Dims3 dims = sample.labels.dims;
  const double t = degrees * kPi / 180.0;
  const double c = std::cos(t), sn = std::sin(t);
  const double py0 = 0.5 * static_cast<double>(dims.h - 1);
  const double px0 = 0.5 * static_cast<double>(dims.w - 1);
  const auto src = sample.intensity.data();
  const auto pick = [&](std::size_t z, long long y, long long x) -> double {
    if (y < 0 || x < 0 || y >= static_cast<long long>(dims.h) ||
        x >= static_cast<long long>(dims.w)) {
      return 0.0;
    }
    return src[(z * dims.h + static_cast<std::size_t>(y)) * dims.w + static_cast<std::size_t>(x)];
  };
  LabelVolume labels = LabelVolume::zeros(dims, sample.labels.num_classes);
  std::vector<double> vox(dims.numel());
  std::size_t i = 0;
  for (std::size_t z = 0; z < dims.d; ++z) {
    for (std::size_t y = 0; y < dims.h; ++y) {
      for (std::size_t x = 0; x < dims.w; ++x, ++i) {
        const double oy = static_cast<double>(y) - py0;
        const double ox = static_cast<double>(x) - px0;
        const double sy = py0 + c * oy + sn * ox;
        const double sx = px0 - sn * oy + c * ox;
        const long long ny = std::llround(sy);
        const long long nx = std::llround(sx);
        if (ny >= 0 && nx >= 0 && ny < static_cast<long long>(dims.h) &&
            nx < static_cast<long long>(dims.w)) {
          labels.labels[i] = sample.labels.at(z, static_cast<std::size_t>(ny),
                                              static_cast<std::size_t>(nx));
        }
        const long long y0 = static_cast<long long>(std::floor(sy));
        const long long x0 = static_cast<long long>(std::floor(sx));
        const double fy = sy - static_cast<double>(y0);
        const double fx = sx - static_cast<double>(x0);
        vox[i] = (1.0 - fy) * (1.0 - fx) * pick(z, y0, x0) +
                 (1.0 - fy) * fx * pick(z, y0, x0 + 1) +
                 fy * (1.0 - fx) * pick(z, y0 + 1, x0) +
                 fy * fx * pick(z, y0 + 1, x0 + 1);
      }
    }
  }
  return {Tensor::from_data(sample.intensity.shape(), std::move(vox)), std::move(labels)};
}

Sample flip_plane(const Sample& sample, bool horizontal) {
  const Dims3 dims = sample.labels.dims;
  const auto src = sample.intensity.data();
  LabelVolume labels = LabelVolume::zeros(dims, sample.labels.num_classes);
  std::vector<double> vox(dims.numel());
  std::size_t i = 0;
  for (std::size_t z = 0; z < dims.d; ++z) {
    for (std::size_t y = 0; y < dims.h; ++y) {
      for (std::size_t x = 0; x < dims.w; ++x, ++i) {
        const std::size_t sy = horizontal ? y : dims.h - 1 - y;
        const std::size_t sx = horizontal ? dims.w - 1 - x : x;
        labels.labels[i] = sample.labels.at(z, sy, sx);
        vox[i] = src[(z * dims.h + sy) * dims.w + sx];
      }
    }
  }
  return {Tensor::from_data(sample.intensity.shape(), std::move(vox)), std::move(labels)};
}

}  // namespace

std::string to_string(ShapeFamily family) {
  switch (family) {
    case ShapeFamily::ellipsoid: return "ellipsoid";
    case ShapeFamily::box: return "box";
    case ShapeFamily::shell: return "shell";
  }
  return "?";
}

ShapeFamily shape_family_from_string(const std::string& name) {
  if (name == "ellipsoid") return ShapeFamily::ellipsoid;
  if (name == "box") return ShapeFamily::box;
  if (name == "shell") return ShapeFamily::shell;
  throw UsageError("unknown shape family: " + name);
}

void DatasetSpec::validate() const {
  if (num_volumes < 1) throw UsageError("num_volumes must be at least 1");
  if (shape.d == 0 || shape.h == 0 || shape.w == 0) {
    throw UsageError("volume shape must have nonzero dims");
  }
  if (classes.size() > 65534) throw UsageError("too many classes for 16-bit labels");
  if (!(noise_stddev >= 0.0)) throw UsageError("noise stddev must be non-negative");
  if (!std::isfinite(background_intensity)) {
    throw UsageError("background intensity must be finite");
  }
  double total = 0.0;
  for (const ClassSpec& cls : classes) {
    if (!(cls.fraction > 0.0)) throw UsageError("class fractions must be positive");
    if (!(cls.probability >= 0.0 && cls.probability <= 1.0)) {
      throw UsageError("occurrence probability must be in [0, 1]");
    }
    if (!std::isfinite(cls.intensity)) throw UsageError("class intensity must be finite");
    total += cls.fraction;
  }
  if (total >= 1.0) {
    throw UsageError("class fractions must sum below 1, got " + std::to_string(total));
  }
}

DatasetSpec DatasetSpec::imbalance_v1(std::uint64_t seed, int num_volumes) {
  DatasetSpec spec;
  spec.seed = seed;
  spec.num_volumes = num_volumes;
  spec.shape = {32, 32, 32};
  spec.background_intensity = 0.10;
  spec.noise_stddev = 0.15;
  spec.classes = {
      {0.25, ShapeFamily::ellipsoid, 1.0, 0.35},
      {0.04, ShapeFamily::box, 1.0, 0.60},
      {0.004, ShapeFamily::shell, 1.0, 0.85},
      {0.002, ShapeFamily::ellipsoid, 0.55, 1.00},
  };
  return spec;
}

std::vector<Sample> generate(const DatasetSpec& spec) {
  spec.validate();
  std::vector<Sample> out(static_cast<std::size_t>(spec.num_volumes));
  // Exceptions inside worker threads would otherwise be lost; capture the
  // first one and rethrow on the caller.
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  run_jobs(out.size(), [&](std::size_t i) {
    try {
      out[i] = generate_one(spec, i);
    } catch (...) {
      if (!failed.exchange(true)) failure = std::current_exception();
    }
  });
  if (failure) std::rethrow_exception(failure);
  return out;
}

std::vector<Sample> slice_patches(const Sample& volume, int patch_depth, int overlap) {
  check_sample(volume, "slice_patches");
  if (patch_depth < 1) throw UsageError("patch depth must be positive");
  if (overlap < 0 || overlap >= patch_depth) {
    throw UsageError("overlap must be in [0, patch_depth)");
  }
  const Dims3 dims = volume.labels.dims;
  const std::size_t depth = std::min<std::size_t>(static_cast<std::size_t>(patch_depth), dims.d);
  std::vector<std::size_t> starts;
  if (depth == dims.d) {
    starts.push_back(0);
  } else {
    const std::size_t stride = static_cast<std::size_t>(patch_depth - overlap);
    for (std::size_t s = 0;; s += stride) {
      if (s + depth >= dims.d) {
        starts.push_back(dims.d - depth);
        break;
      }
      starts.push_back(s);
    }
  }
  const std::size_t plane = dims.h * dims.w;
  const auto src = volume.intensity.data();
  std::vector<Sample> out;
  out.reserve(starts.size());
  for (std::size_t start : starts) {
    std::vector<double> vox(src.begin() + static_cast<std::ptrdiff_t>(start * plane),
                            src.begin() + static_cast<std::ptrdiff_t>((start + depth) * plane));
    LabelVolume labels{{depth, dims.h, dims.w},
                       volume.labels.num_classes,
                       {volume.labels.labels.begin() + static_cast<std::ptrdiff_t>(start * plane),
                        volume.labels.labels.begin() +
                            static_cast<std::ptrdiff_t>((start + depth) * plane)}};
    out.push_back({Tensor::from_data({1, depth, dims.h, dims.w}, std::move(vox)),
                   std::move(labels)});
  }
  return out;
}

Sample augment(const Sample& sample, Rng& rng) {
  check_sample(sample, "augment");
  Sample out = clone(sample);
  if (rng.bernoulli(0.2)) {
    out = rotate_axial(out, rng.uniform(0.0, 15.0));
  }
  if (rng.bernoulli(0.2)) {
    out = flip_plane(out, rng.bernoulli(0.5));
  }
  return out;
}

}  // namespace contourseg
