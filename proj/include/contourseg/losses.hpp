#pragma once

#include "contourseg/morphology.hpp"
#include "contourseg/tensor.hpp"
#include "contourseg/volume.hpp"

namespace contourseg {

struct LossConfig {
  double lambda = 2.0;   // contour weight factor in the weighted CE
  double alpha = 0.5;    // share of the separable Dice term in the compound loss
  double beta = 0.5;     // share of the contour region inside the separable Dice
  double epsilon = 1e-6; // guards denominators and the log
  int erosion_k = 2;
  int erosion_iterations = 1;

  void validate() const;
  StructuringElement se() const { return StructuringElement::cube(erosion_k); }
};

// Raw network output; losses softmax over the class axis internally.
// Shape [1, M, D, H, W] — losses are per-volume, batching is averaged by the
// caller.
struct Prediction {
  Tensor logits;
};

// -(1/(M*N)) sum over classes and voxels of g * log(max(p, epsilon)), g
// one-hot: a per-voxel mean, so the value stays O(1) regardless of volume
// size and mixes meaningfully with Dice-family terms.
Tensor cross_entropy(const Prediction& pred, const LabelVolume& gt, const LossConfig& cfg);

// Cross-entropy with per-voxel factor (lambda * w_c + 1), where w_c is the
// voxel's class contour map. Reduces bitwise to cross_entropy at lambda = 0.
Tensor contour_weighted_ce(const Prediction& pred, const LabelVolume& gt,
                           const ContourMaps& maps, const LossConfig& cfg);

// Mean over foreground classes of 1 - 2*sum(p*g) / (sum(p^2) + sum(g^2) + eps).
// Classes absent from gt contribute zero but still count in the mean, so the
// value does not jump when a class disappears from a volume.
Tensor dice_loss(const Prediction& pred, const LabelVolume& gt, const LossConfig& cfg);

struct SdlDiagnostics {
  bool contour_region_empty = false;     // no contour voxel in any class
  bool noncontour_region_empty = false;  // erosion emptied every class
};

// Splits each class mask into its contour C and eroded interior E and scores
// the two regions with separate Dice-style terms:
//   L_c   = 1 - 2*sum(p*C) / (sum(p^2) + |C| + eps)
//   L_noc = 1 - 2*sum(p*E) / (sum(p^2) + |E| + eps)
// combined as beta * L_c + (1 - beta) * L_noc. The p^2 mass is left unmasked
// so that with C == G and beta = 1 this equals dice_loss exactly.
Tensor separable_dice(const Prediction& pred, const LabelVolume& gt, const ContourMaps& maps,
                      const LossConfig& cfg, SdlDiagnostics* diag = nullptr);

// alpha * separable_dice + (1 - alpha) * contour_weighted_ce.
Tensor compound_cwcd(const Prediction& pred, const LabelVolume& gt, const ContourMaps& maps,
                     const LossConfig& cfg);

// Volume-weighted Dice: per-class terms weighted by 1/|g_j|^2 and normalized
// by the total weight, so rare classes dominate. Absent classes get weight 0.
Tensor generalized_dice(const Prediction& pred, const LabelVolume& gt, const LossConfig& cfg);

// 0.5 * dice_loss + 0.5 * cross_entropy.
Tensor combo_loss(const Prediction& pred, const LabelVolume& gt, const LossConfig& cfg);

// Checks f(x1+x2, y1+y2) >= f(x1,y1) + f(x2,y2) for the Dice-style kernel
// f(x,y) = 2xy/(x+y), with f(0,0) = 0. Equality holds exactly when
// x1*y2 == x2*y1.
struct Superadditivity {
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds = false;
};

Superadditivity check_superadditivity(double x1, double y1, double x2, double y2);

}  // namespace contourseg
