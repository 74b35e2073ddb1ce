#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "contourseg/morphology.hpp"
#include "oracles.hpp"

using namespace contourseg;

namespace {

BinaryMask random_mask(Dims3 dims, Rng& rng, double density) {
  BinaryMask m = BinaryMask::zeros(dims);
  for (auto& v : m.voxels) v = rng.bernoulli(density) ? 1 : 0;
  return m;
}

// A blockier mask than iid noise: random solid boxes on empty ground.
BinaryMask random_boxes(Dims3 dims, Rng& rng, int boxes) {
  BinaryMask m = BinaryMask::zeros(dims);
  for (int b = 0; b < boxes; ++b) {
    const std::size_t z0 = rng.uniform_int(dims.d), y0 = rng.uniform_int(dims.h),
                      x0 = rng.uniform_int(dims.w);
    const std::size_t ext = 2 + rng.uniform_int(5);
    for (std::size_t z = z0; z < std::min(dims.d, z0 + ext); ++z)
      for (std::size_t y = y0; y < std::min(dims.h, y0 + ext); ++y)
        for (std::size_t x = x0; x < std::min(dims.w, x0 + ext); ++x) m.at(z, y, x) = 1;
  }
  return m;
}

bool subset_of(const BinaryMask& a, const BinaryMask& b) {
  for (std::size_t i = 0; i < a.voxels.size(); ++i) {
    if (a.voxels[i] && !b.voxels[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("structuring element defaults and validation") {
  StructuringElement even = StructuringElement::cube(2);
  CHECK(even.anchor == std::array<int, 3>{0, 0, 0});
  StructuringElement odd = StructuringElement::cube(3);
  CHECK(odd.anchor == std::array<int, 3>{1, 1, 1});
  CHECK_THROWS_AS(StructuringElement::cube(0).validate(), UsageError);
  StructuringElement bad = StructuringElement::cube(2);
  bad.anchor = {0, 0, 2};
  CHECK_THROWS_AS(bad.validate(), UsageError);
}

TEST_CASE("erode rejects bad inputs") {
  BinaryMask m = BinaryMask::zeros({2, 2, 2});
  CHECK_THROWS_AS(erode(m, StructuringElement::cube(2), 0), UsageError);
  BinaryMask nb = m;
  nb.voxels[0] = 2;
  CHECK_THROWS_AS(erode(nb, StructuringElement::cube(2), 1), DataError);
  BinaryMask short_buf{{2, 2, 2}, std::vector<std::uint8_t>(7, 0)};
  CHECK_THROWS_AS(erode(short_buf, StructuringElement::cube(2), 1), DataError);
}

TEST_CASE("erosion of trivial masks") {
  // All-zero stays all-zero.
  BinaryMask zero = BinaryMask::zeros({4, 4, 4});
  CHECK(erode(zero, StructuringElement::cube(2), 1).count() == 0);

  // A single voxel vanishes under a 2-cube.
  BinaryMask single = BinaryMask::zeros({4, 4, 4});
  single.at(1, 2, 1) = 1;
  CHECK(erode(single, StructuringElement::cube(2), 1).count() == 0);

  // A 1-cube element is the identity.
  BinaryMask copy = erode(single, StructuringElement::cube(1), 3);
  CHECK(copy.voxels == single.voxels);
}

TEST_CASE("solid cube erodes to its inner cube") {
  // 5^3 cube centered in 9^3, eroded by a centered 3-cube, leaves the 3^3 core.
  BinaryMask m = BinaryMask::zeros({9, 9, 9});
  for (std::size_t z = 2; z <= 6; ++z)
    for (std::size_t y = 2; y <= 6; ++y)
      for (std::size_t x = 2; x <= 6; ++x) m.at(z, y, x) = 1;
  BinaryMask e = erode(m, StructuringElement::cube(3), 1);
  CHECK(e.count() == 27);
  for (std::size_t z = 0; z < 9; ++z)
    for (std::size_t y = 0; y < 9; ++y)
      for (std::size_t x = 0; x < 9; ++x) {
        const bool inner = z >= 3 && z <= 5 && y >= 3 && y <= 5 && x >= 3 && x <= 5;
        CHECK(e.at(z, y, x) == (inner ? 1 : 0));
      }
}

TEST_CASE("volume edge counts as background") {
  // A solid volume erodes away at the faces the element would overrun.
  BinaryMask full{{3, 3, 3}, std::vector<std::uint8_t>(27, 1)};
  BinaryMask e2 = erode(full, StructuringElement::cube(2), 1);
  // Corner anchor: windows [i, i+1] fit only for i in {0, 1} per axis.
  CHECK(e2.count() == 8);
  CHECK(e2.at(0, 0, 0) == 1);
  CHECK(e2.at(2, 2, 2) == 0);
  BinaryMask e3 = erode(full, StructuringElement::cube(3), 1);
  CHECK(e3.count() == 1);
  CHECK(e3.at(1, 1, 1) == 1);
}

TEST_CASE("erosion matches the brute-force oracle") {
  Rng rng(2024);
  int checked = 0;
  for (int rep = 0; rep < 110; ++rep) {
    const Dims3 dims{16, 16, 16};
    BinaryMask m = (rep % 3 == 0) ? random_boxes(dims, rng, 6)
                                  : random_mask(dims, rng, rep % 2 ? 0.7 : 0.45);
    StructuringElement se = StructuringElement::cube(1 + static_cast<int>(rng.uniform_int(3)));
    if (rep % 5 == 0) {
      // Off-center anchors must agree too.
      se.anchor = {static_cast<int>(rng.uniform_int(se.k)),
                   static_cast<int>(rng.uniform_int(se.k)),
                   static_cast<int>(rng.uniform_int(se.k))};
    }
    const BinaryMask got = erode(m, se, 1);
    const auto want = oracle::erode_naive(m.voxels, dims.d, dims.h, dims.w, se.k,
                                          se.anchor[0], se.anchor[1], se.anchor[2]);
    REQUIRE(got.voxels.size() == want.size());
    CHECK(got.voxels == want);
    ++checked;
  }
  CHECK(checked >= 100);
}

TEST_CASE("erosion shrinks and composes over iterations") {
  Rng rng(7);
  const Dims3 dims{12, 12, 12};
  for (int rep = 0; rep < 10; ++rep) {
    BinaryMask m = random_boxes(dims, rng, 5);
    for (int k = 1; k <= 3; ++k) {
      const StructuringElement se = StructuringElement::cube(k);
      const BinaryMask once = erode(m, se, 1);
      CHECK(subset_of(once, m));
      // n iterations equal one iteration folded n times.
      const BinaryMask twice = erode(m, se, 2);
      CHECK(twice.voxels == erode(once, se, 1).voxels);
      const BinaryMask thrice = erode(m, se, 3);
      CHECK(thrice.voxels == erode(twice, se, 1).voxels);
    }
  }
}

TEST_CASE("contour maps cover the class mask exactly") {
  Rng rng(99);
  const Dims3 dims{10, 10, 10};
  LabelVolume gt = LabelVolume::zeros(dims, 4);
  for (auto& v : gt.labels) v = static_cast<std::uint16_t>(rng.uniform_int(4));
  const ContourMaps maps = extract_contours(gt, StructuringElement::cube(2), 1);
  REQUIRE(maps.eroded.size() == 4);
  REQUIRE(maps.contour.size() == 4);
  // Background entry is all zeros by policy.
  CHECK(maps.eroded[0].count() == 0);
  CHECK(maps.contour[0].count() == 0);
  for (int cls = 1; cls < 4; ++cls) {
    const BinaryMask g = gt.class_mask(cls);
    const BinaryMask& e = maps.eroded[cls];
    const BinaryMask& c = maps.contour[cls];
    CHECK(subset_of(e, g));
    CHECK(subset_of(c, g));
    for (std::size_t i = 0; i < g.voxels.size(); ++i) {
      CHECK((c.voxels[i] & e.voxels[i]) == 0);           // disjoint
      CHECK((c.voxels[i] | e.voxels[i]) == g.voxels[i]);  // partition of G
    }
  }
  CHECK(&maps.weight_map() == &maps.contour);
}

TEST_CASE("contour of small objects is the whole object") {
  LabelVolume gt = LabelVolume::zeros({6, 6, 6}, 2);
  gt.at(3, 3, 3) = 1;
  const ContourMaps maps = extract_contours(gt, StructuringElement::cube(2), 1);
  CHECK(maps.eroded[1].count() == 0);
  CHECK(maps.contour[1].count() == 1);
  CHECK(maps.contour[1].at(3, 3, 3) == 1);
}

TEST_CASE("5-cube class leaves a 98-voxel shell") {
  LabelVolume gt = LabelVolume::zeros({9, 9, 9}, 2);
  for (std::size_t z = 2; z <= 6; ++z)
    for (std::size_t y = 2; y <= 6; ++y)
      for (std::size_t x = 2; x <= 6; ++x) gt.at(z, y, x) = 1;
  const ContourMaps maps = extract_contours(gt, StructuringElement::cube(3), 1);
  CHECK(maps.eroded[1].count() == 27);
  CHECK(maps.contour[1].count() == 98);
}

TEST_CASE("absent classes produce empty maps") {
  LabelVolume gt = LabelVolume::zeros({4, 4, 4}, 3);
  gt.at(0, 0, 0) = 1;  // class 2 never appears
  const ContourMaps maps = extract_contours(gt, StructuringElement::cube(2), 1);
  CHECK(maps.eroded[2].count() == 0);
  CHECK(maps.contour[2].count() == 0);
}

TEST_CASE("contour thickens with more iterations") {
  Rng rng(5);
  BinaryMask m = random_boxes({14, 14, 14}, rng, 4);
  LabelVolume gt = LabelVolume::zeros(m.dims, 2);
  for (std::size_t i = 0; i < m.voxels.size(); ++i) gt.labels[i] = m.voxels[i];
  const StructuringElement se = StructuringElement::cube(2);
  std::size_t prev = 0;
  for (int iter = 1; iter <= 4; ++iter) {
    const std::size_t cur = extract_contours(gt, se, iter).contour[1].count();
    CHECK(cur >= prev);
    prev = cur;
  }
}

TEST_CASE("label volumes are validated") {
  LabelVolume bad = LabelVolume::zeros({2, 2, 2}, 2);
  bad.labels[3] = 5;
  CHECK_THROWS_AS(extract_contours(bad, StructuringElement::cube(2), 1), DataError);
}
