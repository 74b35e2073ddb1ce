#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "contourseg/losses.hpp"
#include "testutil.hpp"

using namespace contourseg;
using testutil::gradcheck;
using testutil::random_tensor;
using testutil::rel_err;

namespace {

LabelVolume random_labels(Dims3 dims, int num_classes, Rng& rng) {
  LabelVolume gt = LabelVolume::zeros(dims, num_classes);
  for (auto& v : gt.labels) v = static_cast<std::uint16_t>(rng.uniform_int(num_classes));
  return gt;
}

Prediction random_pred(const LabelVolume& gt, Rng& rng) {
  return {random_tensor({1, static_cast<std::size_t>(gt.num_classes), gt.dims.d, gt.dims.h,
                         gt.dims.w},
                        rng, -2.0, 2.0, false)};
}

// Saturated logits: softmax puts ~1 on the labeled class everywhere.
Prediction perfect_pred(const LabelVolume& gt) {
  const std::size_t voxels = gt.dims.numel();
  std::vector<double> logits(gt.num_classes * voxels, 0.0);
  for (std::size_t i = 0; i < voxels; ++i) logits[gt.labels[i] * voxels + i] = 30.0;
  return {Tensor::from_data(
      {1, static_cast<std::size_t>(gt.num_classes), gt.dims.d, gt.dims.h, gt.dims.w},
      std::move(logits))};
}

// Plain-loop softmax, independent of the tensor library.
std::vector<double> naive_probs(const Prediction& pred, int num_classes) {
  const std::size_t voxels = pred.logits.numel() / num_classes;
  std::vector<double> p(pred.logits.numel());
  for (std::size_t i = 0; i < voxels; ++i) {
    double m = -1e300;
    for (int j = 0; j < num_classes; ++j) m = std::max(m, pred.logits.data()[j * voxels + i]);
    double z = 0.0;
    for (int j = 0; j < num_classes; ++j) z += std::exp(pred.logits.data()[j * voxels + i] - m);
    for (int j = 0; j < num_classes; ++j) {
      p[j * voxels + i] = std::exp(pred.logits.data()[j * voxels + i] - m) / z;
    }
  }
  return p;
}

double naive_weighted_ce(const Prediction& pred, const LabelVolume& gt, const ContourMaps* maps,
                         const LossConfig& cfg) {
  const std::size_t voxels = gt.dims.numel();
  const auto p = naive_probs(pred, gt.num_classes);
  double acc = 0.0;
  for (std::size_t i = 0; i < voxels; ++i) {
    const int cls = gt.labels[i];
    const double w = maps ? cfg.lambda * maps->contour[cls].voxels[i] + 1.0 : 1.0;
    acc += w * std::log(std::max(p[cls * voxels + i], cfg.epsilon));
  }
  return -acc / (static_cast<double>(gt.num_classes) * static_cast<double>(voxels));
}

double naive_sdl(const Prediction& pred, const LabelVolume& gt, const ContourMaps& maps,
                 const LossConfig& cfg) {
  const std::size_t voxels = gt.dims.numel();
  const auto p = naive_probs(pred, gt.num_classes);
  double lc = 0.0, lnoc = 0.0;
  for (int cls = 1; cls < gt.num_classes; ++cls) {
    if (gt.class_count(cls) == 0) continue;
    double p_sq = 0.0, pc = 0.0, pe = 0.0;
    for (std::size_t i = 0; i < voxels; ++i) {
      const double pj = p[cls * voxels + i];
      p_sq += pj * pj;
      if (maps.contour[cls].voxels[i]) pc += pj;
      if (maps.eroded[cls].voxels[i]) pe += pj;
    }
    lc += 1.0 - 2.0 * pc / (p_sq + maps.contour[cls].count() + cfg.epsilon);
    lnoc += 1.0 - 2.0 * pe / (p_sq + maps.eroded[cls].count() + cfg.epsilon);
  }
  lc /= gt.num_classes - 1;
  lnoc /= gt.num_classes - 1;
  return cfg.beta * lc + (1.0 - cfg.beta) * lnoc;
}

ContourMaps maps_for(const LabelVolume& gt, const LossConfig& cfg) {
  return extract_contours(gt, cfg.se(), cfg.erosion_iterations);
}

}  // namespace

TEST_CASE("loss config defaults match the operating point and validate") {
  LossConfig cfg;
  CHECK(cfg.lambda == 2.0);
  CHECK(cfg.alpha == 0.5);
  CHECK(cfg.beta == 0.5);
  CHECK(cfg.erosion_k == 2);
  CHECK(cfg.erosion_iterations == 1);
  cfg.validate();

  LossConfig bad = cfg;
  bad.lambda = -0.1;
  CHECK_THROWS_AS(bad.validate(), UsageError);
  bad = cfg;
  bad.alpha = 1.5;
  CHECK_THROWS_AS(bad.validate(), UsageError);
  bad = cfg;
  bad.beta = -0.01;
  CHECK_THROWS_AS(bad.validate(), UsageError);
  bad = cfg;
  bad.epsilon = 0.0;
  CHECK_THROWS_AS(bad.validate(), UsageError);
}

TEST_CASE("cross entropy hand values") {
  LossConfig cfg;
  // Two classes, a single voxel labeled 1, logits (0,0) -> p = (0.5, 0.5).
  LabelVolume gt = LabelVolume::zeros({1, 1, 1}, 2);
  gt.labels[0] = 1;
  Prediction pred{Tensor::zeros({1, 2, 1, 1, 1})};
  CHECK(cross_entropy(pred, gt, cfg).item() ==
        doctest::Approx(0.34657359027997264).epsilon(1e-12));

  // Near-one-hot prediction drives the loss to ~0.
  Rng rng(3);
  LabelVolume gt2 = random_labels({6, 6, 6}, 3, rng);
  CHECK(cross_entropy(perfect_pred(gt2), gt2, cfg).item() < 1e-6);
  CHECK(cross_entropy(perfect_pred(gt2), gt2, cfg).item() >= 0.0);
}

TEST_CASE("cross entropy validates shapes") {
  LossConfig cfg;
  LabelVolume gt = LabelVolume::zeros({2, 2, 2}, 2);
  CHECK_THROWS_AS(cross_entropy({Tensor::zeros({1, 3, 2, 2, 2})}, gt, cfg), ShapeError);
  CHECK_THROWS_AS(cross_entropy({Tensor::zeros({2, 2, 2, 2, 2})}, gt, cfg), ShapeError);
  CHECK_THROWS_AS(cross_entropy({Tensor::zeros({1, 2, 2, 2, 3})}, gt, cfg), ShapeError);
  LabelVolume bad = gt;
  bad.labels[0] = 7;
  CHECK_THROWS_AS(cross_entropy({Tensor::zeros({1, 2, 2, 2, 2})}, bad, cfg), DataError);
}

TEST_CASE("contour weighting reduces to plain CE at lambda zero") {
  Rng rng(11);
  LabelVolume gt = random_labels({6, 6, 6}, 3, rng);
  Prediction pred = random_pred(gt, rng);
  LossConfig cfg;
  cfg.lambda = 0.0;
  const ContourMaps maps = maps_for(gt, cfg);
  CHECK(contour_weighted_ce(pred, gt, maps, cfg).item() ==
        cross_entropy(pred, gt, cfg).item());
}

TEST_CASE("contour voxels are upweighted by lambda") {
  // One isolated foreground voxel: the whole object is contour, so its CE
  // term carries factor lambda + 1 = 3.
  LossConfig cfg;  // lambda = 2
  LabelVolume gt = LabelVolume::zeros({4, 4, 4}, 2);
  gt.at(1, 1, 1) = 1;
  const ContourMaps maps = maps_for(gt, cfg);
  REQUIRE(maps.contour[1].count() == 1);
  Rng rng(17);
  Prediction pred = random_pred(gt, rng);
  const double weighted = contour_weighted_ce(pred, gt, maps, cfg).item();
  CHECK(rel_err(weighted, naive_weighted_ce(pred, gt, &maps, cfg)) < 1e-12);

  // Difference from plain CE is exactly lambda times that voxel's CE term.
  const double plain = cross_entropy(pred, gt, cfg).item();
  const auto p = naive_probs(pred, 2);
  const std::size_t idx = (1 * 4 + 1) * 4 + 1;
  const double voxel_term = -std::log(std::max(p[64 + idx], cfg.epsilon)) / (2.0 * 64.0);
  CHECK(rel_err(weighted - plain, cfg.lambda * voxel_term) < 1e-9);
}

TEST_CASE("contour weighted CE rejects mismatched maps") {
  LossConfig cfg;
  LabelVolume gt = LabelVolume::zeros({3, 3, 3}, 3);
  Prediction pred{Tensor::zeros({1, 3, 3, 3, 3})};
  ContourMaps maps = maps_for(gt, cfg);
  maps.contour.pop_back();
  maps.num_classes = 2;
  CHECK_THROWS_AS(contour_weighted_ce(pred, gt, maps, cfg), ShapeError);
  ContourMaps wrong_dims = extract_contours(LabelVolume::zeros({2, 2, 2}, 3), cfg.se(), 1);
  CHECK_THROWS_AS(contour_weighted_ce(pred, gt, wrong_dims, cfg), ShapeError);
}

TEST_CASE("dice loss hand values") {
  LossConfig cfg;
  cfg.epsilon = 1e-9;
  // p = 0.5 on the single foreground class everywhere, g = 1 everywhere:
  // 1 - 2*0.5N / (0.25N + N + eps) ~= 0.2.
  LabelVolume gt = LabelVolume::zeros({2, 2, 2}, 2);
  for (auto& v : gt.labels) v = 1;
  Prediction pred{Tensor::zeros({1, 2, 2, 2, 2})};
  CHECK(dice_loss(pred, gt, cfg).item() == doctest::Approx(0.2).epsilon(1e-9));

  Rng rng(23);
  LabelVolume gt2 = random_labels({6, 6, 6}, 3, rng);
  CHECK(dice_loss(perfect_pred(gt2), gt2, cfg).item() < 1e-6);
}

TEST_CASE("absent classes contribute zero but stay in the mean") {
  LossConfig cfg;
  Rng rng(29);
  // Class 2 never occurs; only class 1's term remains, averaged over M-1 = 2.
  LabelVolume gt = LabelVolume::zeros({4, 4, 4}, 3);
  for (std::size_t i = 0; i < 8; ++i) gt.labels[i] = 1;
  Prediction pred = random_pred(gt, rng);

  const auto p = naive_probs(pred, 3);
  double p_sq = 0.0, overlap = 0.0;
  for (std::size_t i = 0; i < 64; ++i) {
    p_sq += p[64 + i] * p[64 + i];
    if (gt.labels[i] == 1) overlap += p[64 + i];
  }
  const double term = 1.0 - 2.0 * overlap / (p_sq + 8.0 + cfg.epsilon);
  CHECK(rel_err(dice_loss(pred, gt, cfg).item(), term / 2.0) < 1e-12);
}

TEST_CASE("separable dice equals dice when erosion empties every class") {
  // Isolated voxels and thin plates all vanish under the 2-cube, so C == G.
  LossConfig cfg;
  cfg.beta = 1.0;
  LabelVolume gt = LabelVolume::zeros({8, 8, 8}, 3);
  gt.at(1, 1, 1) = 1;
  gt.at(5, 2, 6) = 1;
  for (std::size_t y = 3; y < 5; ++y)
    for (std::size_t x = 3; x < 5; ++x) gt.at(6, y, x) = 2;  // 1-deep plate
  const ContourMaps maps = maps_for(gt, cfg);
  for (int cls = 1; cls < 3; ++cls) {
    REQUIRE(maps.eroded[cls].count() == 0);
    REQUIRE(maps.contour[cls].voxels == gt.class_mask(cls).voxels);
  }
  Rng rng(31);
  Prediction pred = random_pred(gt, rng);
  SdlDiagnostics diag;
  const double sdl = separable_dice(pred, gt, maps, cfg, &diag).item();
  CHECK(std::fabs(sdl - dice_loss(pred, gt, cfg).item()) < 1e-12);
  CHECK(diag.noncontour_region_empty);
  CHECK_FALSE(diag.contour_region_empty);
}

TEST_CASE("separable dice matches a straight-line re-evaluation") {
  Rng rng(37);
  for (int rep = 0; rep < 5; ++rep) {
    LabelVolume gt = random_labels({6, 6, 6}, 4, rng);
    Prediction pred = random_pred(gt, rng);
    LossConfig cfg;
    cfg.beta = 0.1 + 0.2 * rep;
    const ContourMaps maps = maps_for(gt, cfg);
    const double got = separable_dice(pred, gt, maps, cfg).item();
    CHECK(std::fabs(got - naive_sdl(pred, gt, maps, cfg)) < 1e-12);
  }
}

TEST_CASE("separable dice flags an empty contour region") {
  // k=1 erosion is the identity, so every contour is empty and E == G.
  LossConfig cfg;
  cfg.erosion_k = 1;
  cfg.beta = 1.0;
  Rng rng(41);
  LabelVolume gt = random_labels({5, 5, 5}, 2, rng);
  const ContourMaps maps = maps_for(gt, cfg);
  Prediction pred = random_pred(gt, rng);
  SdlDiagnostics diag;
  const double sdl = separable_dice(pred, gt, maps, cfg, &diag).item();
  CHECK(std::isfinite(sdl));
  CHECK(diag.contour_region_empty);
  CHECK_FALSE(diag.noncontour_region_empty);
}

TEST_CASE("compound loss collapses at the alpha extremes") {
  Rng rng(43);
  LabelVolume gt = random_labels({6, 6, 6}, 3, rng);
  Prediction pred = random_pred(gt, rng);
  LossConfig cfg;
  const ContourMaps maps = maps_for(gt, cfg);

  cfg.alpha = 0.0;
  CHECK(compound_cwcd(pred, gt, maps, cfg).item() ==
        contour_weighted_ce(pred, gt, maps, cfg).item());
  cfg.alpha = 1.0;
  CHECK(compound_cwcd(pred, gt, maps, cfg).item() ==
        separable_dice(pred, gt, maps, cfg).item());
  cfg.alpha = 0.5;
  const double mid = compound_cwcd(pred, gt, maps, cfg).item();
  CHECK(rel_err(mid, 0.5 * separable_dice(pred, gt, maps, cfg).item() +
                         0.5 * contour_weighted_ce(pred, gt, maps, cfg).item()) < 1e-12);
}

TEST_CASE("generalized dice weights classes by inverse squared volume") {
  LossConfig cfg;
  Rng rng(47);
  // Volumes 10 and 1000 in a 12^3 grid: weight ratio 1e4 : 1.
  LabelVolume gt = LabelVolume::zeros({12, 12, 12}, 3);
  for (std::size_t i = 0; i < 10; ++i) gt.labels[i] = 1;
  for (std::size_t i = 100; i < 1100; ++i) gt.labels[i] = 2;
  Prediction pred = random_pred(gt, rng);

  const auto p = naive_probs(pred, 3);
  const std::size_t voxels = gt.dims.numel();
  double terms[3] = {0, 0, 0};
  for (int cls = 1; cls < 3; ++cls) {
    double p_sq = 0.0, overlap = 0.0, count = 0.0;
    for (std::size_t i = 0; i < voxels; ++i) {
      const double pj = p[cls * voxels + i];
      p_sq += pj * pj;
      if (gt.labels[i] == cls) {
        overlap += pj;
        count += 1.0;
      }
    }
    terms[cls] = 1.0 - 2.0 * overlap / (p_sq + count + cfg.epsilon);
  }
  const double w1 = 1.0 / (10.0 * 10.0), w2 = 1.0 / (1000.0 * 1000.0);
  CHECK(w1 / w2 == 10000.0);
  const double expect = (w1 * terms[1] + w2 * terms[2]) / (w1 + w2);
  CHECK(rel_err(generalized_dice(pred, gt, cfg).item(), expect) < 1e-12);

  // Perfect prediction stays ~0 despite the extreme weights.
  CHECK(generalized_dice(perfect_pred(gt), gt, cfg).item() < 1e-6);
}

TEST_CASE("generalized dice equals plain dice for equal volumes") {
  LossConfig cfg;
  Rng rng(53);
  LabelVolume gt = LabelVolume::zeros({6, 6, 6}, 3);
  for (std::size_t i = 0; i < 8; ++i) gt.labels[i] = 1;
  for (std::size_t i = 50; i < 58; ++i) gt.labels[i] = 2;
  Prediction pred = random_pred(gt, rng);
  CHECK(std::fabs(generalized_dice(pred, gt, cfg).item() - dice_loss(pred, gt, cfg).item()) <
        1e-12);
}

TEST_CASE("combo loss is the even blend of dice and CE") {
  LossConfig cfg;
  Rng rng(59);
  LabelVolume gt = random_labels({5, 5, 5}, 3, rng);
  Prediction pred = random_pred(gt, rng);
  const double expect =
      0.5 * dice_loss(pred, gt, cfg).item() + 0.5 * cross_entropy(pred, gt, cfg).item();
  CHECK(rel_err(combo_loss(pred, gt, cfg).item(), expect) < 1e-12);
}

TEST_CASE("all losses are finite, non-negative, and permutation invariant") {
  Rng rng(61);
  LossConfig cfg;
  for (int rep = 0; rep < 3; ++rep) {
    LabelVolume gt = random_labels({6, 6, 6}, 3, rng);
    Prediction pred = random_pred(gt, rng);
    ContourMaps maps = maps_for(gt, cfg);

    const double values[] = {
        cross_entropy(pred, gt, cfg).item(),
        contour_weighted_ce(pred, gt, maps, cfg).item(),
        dice_loss(pred, gt, cfg).item(),
        separable_dice(pred, gt, maps, cfg).item(),
        compound_cwcd(pred, gt, maps, cfg).item(),
        generalized_dice(pred, gt, cfg).item(),
        combo_loss(pred, gt, cfg).item(),
    };
    for (double v : values) {
      CHECK(std::isfinite(v));
      CHECK(v >= 0.0);
    }

    // Apply one voxel permutation to labels, logits, and maps alike; every
    // loss is a sum over voxels and must not move.
    const std::size_t voxels = gt.dims.numel();
    std::vector<std::size_t> perm(voxels);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = voxels; i > 1; --i) {
      std::swap(perm[i - 1], perm[rng.uniform_int(i)]);
    }
    LabelVolume gt_p = gt;
    std::vector<double> logits_p(pred.logits.numel());
    ContourMaps maps_p = maps;
    for (std::size_t i = 0; i < voxels; ++i) {
      gt_p.labels[i] = gt.labels[perm[i]];
      for (int j = 0; j < 3; ++j) {
        logits_p[j * voxels + i] = pred.logits.data()[j * voxels + perm[i]];
        maps_p.contour[j].voxels[i] = maps.contour[j].voxels[perm[i]];
        maps_p.eroded[j].voxels[i] = maps.eroded[j].voxels[perm[i]];
      }
    }
    Prediction pred_p{Tensor::from_data(pred.logits.shape(), std::move(logits_p))};

    const double values_p[] = {
        cross_entropy(pred_p, gt_p, cfg).item(),
        contour_weighted_ce(pred_p, gt_p, maps_p, cfg).item(),
        dice_loss(pred_p, gt_p, cfg).item(),
        separable_dice(pred_p, gt_p, maps_p, cfg).item(),
        compound_cwcd(pred_p, gt_p, maps_p, cfg).item(),
        generalized_dice(pred_p, gt_p, cfg).item(),
        combo_loss(pred_p, gt_p, cfg).item(),
    };
    for (int i = 0; i < 7; ++i) CHECK(std::fabs(values[i] - values_p[i]) < 1e-12);
  }
}

TEST_CASE("loss gradients match finite differences") {
  for (const int m : {2, 4}) {
    Rng rng(67 + m);
    LabelVolume gt = random_labels({8, 8, 8}, m, rng);
    const LossConfig cfg;
    const ContourMaps maps = maps_for(gt, cfg);
    Tensor logits = random_tensor({1, static_cast<std::size_t>(m), 8, 8, 8}, rng, -2.0, 2.0);

    CAPTURE(m);
    SUBCASE("cross_entropy") {
      gradcheck([&](const std::vector<Tensor>& in) { return cross_entropy({in[0]}, gt, cfg); },
                {logits});
    }
    SUBCASE("contour_weighted_ce") {
      gradcheck(
          [&](const std::vector<Tensor>& in) {
            return contour_weighted_ce({in[0]}, gt, maps, cfg);
          },
          {logits});
    }
    SUBCASE("dice_loss") {
      gradcheck([&](const std::vector<Tensor>& in) { return dice_loss({in[0]}, gt, cfg); },
                {logits});
    }
    SUBCASE("separable_dice") {
      gradcheck(
          [&](const std::vector<Tensor>& in) { return separable_dice({in[0]}, gt, maps, cfg); },
          {logits});
    }
    SUBCASE("compound_cwcd") {
      gradcheck(
          [&](const std::vector<Tensor>& in) { return compound_cwcd({in[0]}, gt, maps, cfg); },
          {logits});
    }
    SUBCASE("generalized_dice") {
      gradcheck(
          [&](const std::vector<Tensor>& in) { return generalized_dice({in[0]}, gt, cfg); },
          {logits});
    }
    SUBCASE("combo_loss") {
      gradcheck([&](const std::vector<Tensor>& in) { return combo_loss({in[0]}, gt, cfg); },
                {logits});
    }
  }
}

TEST_CASE("superadditivity of the dice kernel") {
  const auto eq = check_superadditivity(1, 1, 1, 1);
  CHECK(eq.lhs == 2.0);
  CHECK(eq.rhs == 2.0);
  CHECK(eq.holds);

  const auto strict = check_superadditivity(1, 0, 0, 1);
  CHECK(strict.lhs == 1.0);
  CHECK(strict.rhs == 0.0);
  CHECK(strict.holds);

  CHECK(check_superadditivity(0, 0, 0, 0).lhs == 0.0);
  CHECK_THROWS_AS(check_superadditivity(-1, 0, 0, 0), UsageError);

  // Equality exactly on proportional pairs: x2 = t*x1, y2 = t*y1.
  Rng rng(71);
  for (int rep = 0; rep < 100; ++rep) {
    const double x1 = rng.uniform(0.0, 5.0), y1 = rng.uniform(0.0, 5.0);
    const double t = rng.uniform(0.1, 3.0);
    const auto r = check_superadditivity(x1, y1, t * x1, t * y1);
    CHECK(std::fabs(r.lhs - r.rhs) < 1e-12);
    CHECK(r.holds);
  }

  // Strict inequality off the proportional manifold.
  const auto off = check_superadditivity(1, 2, 3, 1);
  CHECK(off.lhs - off.rhs > 1e-6);

  // Large randomized sweep.
  int held = 0;
  for (int rep = 0; rep < 100000; ++rep) {
    const auto r = check_superadditivity(rng.uniform(0.0, 10.0), rng.uniform(0.0, 10.0),
                                         rng.uniform(0.0, 10.0), rng.uniform(0.0, 10.0));
    held += r.holds ? 1 : 0;
  }
  CHECK(held == 100000);
}
