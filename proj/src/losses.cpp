#include "contourseg/losses.hpp"

#include <cmath>

namespace contourseg {

void LossConfig::validate() const {
  if (lambda < 0.0) throw UsageError("lambda must be >= 0");
  if (alpha < 0.0 || alpha > 1.0) throw UsageError("alpha must lie in [0,1]");
  if (beta < 0.0 || beta > 1.0) throw UsageError("beta must lie in [0,1]");
  if (!(epsilon > 0.0)) throw UsageError("epsilon must be > 0");
  if (erosion_k < 1) throw UsageError("erosion kernel size must be >= 1");
  if (erosion_iterations < 1) throw UsageError("erosion iterations must be >= 1");
}

namespace {

void check_pred_gt(const Prediction& pred, const LabelVolume& gt) {
  gt.validate("loss");
  if (!pred.logits.defined() || pred.logits.ndim() != 5) {
    throw ShapeError("prediction logits must be [1,M,D,H,W]");
  }
  const Shape& s = pred.logits.shape();
  if (s[0] != 1) {
    throw ShapeError("losses take one volume at a time, got batch of " + std::to_string(s[0]));
  }
  if (s[1] != static_cast<std::size_t>(gt.num_classes)) {
    throw ShapeError("prediction has " + std::to_string(s[1]) + " classes, labels have " +
                     std::to_string(gt.num_classes));
  }
  if (s[2] != gt.dims.d || s[3] != gt.dims.h || s[4] != gt.dims.w) {
    throw ShapeError("prediction grid " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                     "x" + std::to_string(s[4]) + " does not match labels " + gt.dims.str());
  }
}

void check_maps(const LabelVolume& gt, const ContourMaps& maps) {
  if (maps.num_classes != gt.num_classes ||
      maps.contour.size() != static_cast<std::size_t>(gt.num_classes)) {
    throw ShapeError("contour maps cover " + std::to_string(maps.num_classes) +
                     " classes, labels have " + std::to_string(gt.num_classes));
  }
  for (const BinaryMask& m : maps.contour) {
    if (!(m.dims == gt.dims)) {
      throw ShapeError("contour map grid " + m.dims.str() + " does not match labels " +
                       gt.dims.str());
    }
  }
}

// One-hot ground truth scaled by an optional per-voxel contour factor:
// entry (j, i) = g_ij * (lambda * w_cj(i) + 1), or plain g_ij without maps.
Tensor weighted_one_hot(const LabelVolume& gt, const ContourMaps* maps, double lambda) {
  const std::size_t voxels = gt.dims.numel();
  const std::size_t m = static_cast<std::size_t>(gt.num_classes);
  std::vector<double> data(m * voxels, 0.0);
  for (std::size_t i = 0; i < voxels; ++i) {
    const std::size_t cls = gt.labels[i];
    double w = 1.0;
    if (maps) w = lambda * maps->contour[cls].voxels[i] + 1.0;
    data[cls * voxels + i] = w;
  }
  return Tensor::from_data({1, m, gt.dims.d, gt.dims.h, gt.dims.w}, std::move(data));
}

Tensor weighted_ce(const Prediction& pred, const LabelVolume& gt, const ContourMaps* maps,
                   const LossConfig& cfg) {
  cfg.validate();
  check_pred_gt(pred, gt);
  Tensor p = softmax(pred.logits, 1);
  Tensor log_p = contourseg::log(clamp_min(p, cfg.epsilon));
  Tensor weights = weighted_one_hot(gt, maps, cfg.lambda);
  // Normalized per voxel as well as per class so the CE family stays O(1)
  // and mixes meaningfully with Dice-family terms in compound losses.
  const double scale = -1.0 / (static_cast<double>(gt.num_classes) *
                               static_cast<double>(gt.dims.numel()));
  return mul_scalar(sum(mul(log_p, weights)), scale);
}

// Constant [1,1,D,H,W] tensor holding a binary mask.
Tensor mask_tensor(const BinaryMask& m) {
  std::vector<double> data(m.voxels.size());
  for (std::size_t i = 0; i < m.voxels.size(); ++i) data[i] = m.voxels[i];
  return Tensor::from_data({1, 1, m.dims.d, m.dims.h, m.dims.w}, std::move(data));
}

// 1 - 2*sum(p (.) region) / (sum(p^2) + |region| + eps). The p^2 mass always
// spans the whole grid; only the overlap numerator is restricted.
Tensor region_dice_term(const Tensor& p_class, const Tensor& p_sq_sum, const Tensor& region,
                        std::size_t region_count, double eps) {
  Tensor numer = mul_scalar(sum(mul(p_class, region)), 2.0);
  Tensor denom = add_scalar(p_sq_sum, static_cast<double>(region_count) + eps);
  return sub(Tensor::scalar(1.0), divide(numer, denom));
}

}  // namespace

Tensor cross_entropy(const Prediction& pred, const LabelVolume& gt, const LossConfig& cfg) {
  return weighted_ce(pred, gt, nullptr, cfg);
}

Tensor contour_weighted_ce(const Prediction& pred, const LabelVolume& gt,
                           const ContourMaps& maps, const LossConfig& cfg) {
  check_maps(gt, maps);
  return weighted_ce(pred, gt, &maps, cfg);
}

Tensor dice_loss(const Prediction& pred, const LabelVolume& gt, const LossConfig& cfg) {
  cfg.validate();
  check_pred_gt(pred, gt);
  if (gt.num_classes < 2) return Tensor::scalar(0.0);
  Tensor p = softmax(pred.logits, 1);
  const std::vector<std::size_t> ones(gt.num_classes, 1);
  std::vector<Tensor> per_class = split(p, 1, ones);
  Tensor acc;
  for (int cls = 1; cls < gt.num_classes; ++cls) {
    const BinaryMask g = gt.class_mask(cls);
    const std::size_t count = g.count();
    if (count == 0) continue;  // absent class: defined zero contribution
    const Tensor& pj = per_class[cls];
    Tensor term = region_dice_term(pj, sum(mul(pj, pj)), mask_tensor(g), count, cfg.epsilon);
    acc = acc.defined() ? add(acc, term) : term;
  }
  if (!acc.defined()) return Tensor::scalar(0.0);
  return mul_scalar(acc, 1.0 / (gt.num_classes - 1));
}

Tensor separable_dice(const Prediction& pred, const LabelVolume& gt, const ContourMaps& maps,
                      const LossConfig& cfg, SdlDiagnostics* diag) {
  cfg.validate();
  check_pred_gt(pred, gt);
  check_maps(gt, maps);
  std::size_t contour_total = 0, interior_total = 0;
  for (int cls = 1; cls < gt.num_classes; ++cls) {
    contour_total += maps.contour[cls].count();
    interior_total += maps.eroded[cls].count();
  }
  if (diag) {
    diag->contour_region_empty = contour_total == 0;
    diag->noncontour_region_empty = interior_total == 0;
  }

  Tensor p = softmax(pred.logits, 1);
  const std::vector<std::size_t> ones(gt.num_classes, 1);
  std::vector<Tensor> per_class = split(p, 1, ones);
  Tensor contour_acc, interior_acc;
  for (int cls = 1; cls < gt.num_classes; ++cls) {
    if (gt.class_count(cls) == 0) continue;
    const Tensor& pj = per_class[cls];
    Tensor p_sq = sum(mul(pj, pj));
    Tensor c_term = region_dice_term(pj, p_sq, mask_tensor(maps.contour[cls]),
                                     maps.contour[cls].count(), cfg.epsilon);
    Tensor e_term = region_dice_term(pj, p_sq, mask_tensor(maps.eroded[cls]),
                                     maps.eroded[cls].count(), cfg.epsilon);
    contour_acc = contour_acc.defined() ? add(contour_acc, c_term) : c_term;
    interior_acc = interior_acc.defined() ? add(interior_acc, e_term) : e_term;
  }
  if (!contour_acc.defined()) return Tensor::scalar(0.0);
  const double inv = 1.0 / (gt.num_classes - 1);
  Tensor l_c = mul_scalar(contour_acc, inv);
  Tensor l_noc = mul_scalar(interior_acc, inv);
  return add(mul_scalar(l_c, cfg.beta), mul_scalar(l_noc, 1.0 - cfg.beta));
}

Tensor compound_cwcd(const Prediction& pred, const LabelVolume& gt, const ContourMaps& maps,
                     const LossConfig& cfg) {
  Tensor sdl = separable_dice(pred, gt, maps, cfg);
  Tensor cwce = contour_weighted_ce(pred, gt, maps, cfg);
  return add(mul_scalar(sdl, cfg.alpha), mul_scalar(cwce, 1.0 - cfg.alpha));
}

Tensor generalized_dice(const Prediction& pred, const LabelVolume& gt, const LossConfig& cfg) {
  cfg.validate();
  check_pred_gt(pred, gt);
  if (gt.num_classes < 2) return Tensor::scalar(0.0);
  Tensor p = softmax(pred.logits, 1);
  const std::vector<std::size_t> ones(gt.num_classes, 1);
  std::vector<Tensor> per_class = split(p, 1, ones);
  Tensor acc;
  double total_weight = 0.0;
  for (int cls = 1; cls < gt.num_classes; ++cls) {
    const BinaryMask g = gt.class_mask(cls);
    const std::size_t count = g.count();
    if (count == 0) continue;
    const double weight = 1.0 / (static_cast<double>(count) * static_cast<double>(count));
    total_weight += weight;
    const Tensor& pj = per_class[cls];
    Tensor term = region_dice_term(pj, sum(mul(pj, pj)), mask_tensor(g), count, cfg.epsilon);
    term = mul_scalar(term, weight);
    acc = acc.defined() ? add(acc, term) : term;
  }
  if (!acc.defined()) return Tensor::scalar(0.0);
  return mul_scalar(acc, 1.0 / total_weight);
}

Tensor combo_loss(const Prediction& pred, const LabelVolume& gt, const LossConfig& cfg) {
  return add(mul_scalar(dice_loss(pred, gt, cfg), 0.5),
             mul_scalar(cross_entropy(pred, gt, cfg), 0.5));
}

Superadditivity check_superadditivity(double x1, double y1, double x2, double y2) {
  if (x1 < 0.0 || y1 < 0.0 || x2 < 0.0 || y2 < 0.0) {
    throw UsageError("superadditivity check takes non-negative inputs");
  }
  const auto f = [](double x, double y) {
    const double s = x + y;
    return s == 0.0 ? 0.0 : 2.0 * x * y / s;
  };
  Superadditivity result;
  result.lhs = f(x1 + x2, y1 + y2);
  result.rhs = f(x1, y1) + f(x2, y2);
  result.holds = result.lhs >= result.rhs - 1e-12;
  return result;
}

}  // namespace contourseg
