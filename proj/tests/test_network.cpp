#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "contourseg/network.hpp"
#include "testutil.hpp"

using namespace contourseg;
using testutil::gradcheck;
using testutil::probe_sum;
using testutil::random_tensor;

namespace {

NetworkConfig toy_config() {
  NetworkConfig cfg;
  cfg.in_channels = 1;
  cfg.num_classes = 2;
  cfg.base_channels = 2;
  cfg.levels = 3;
  cfg.rfb_branch_kernels = {1, 3};
  cfg.ham_kernel = 3;
  cfg.ham_sigma = 1.0;
  return cfg;
}

void fill(Tensor t, double value) {
  for (double& v : t.mutable_data()) v = value;
}

}  // namespace

TEST_CASE("network config validation") {
  NetworkConfig cfg;
  cfg.validate();  // defaults are valid

  NetworkConfig bad = cfg;
  bad.in_channels = 0;
  CHECK_THROWS_AS(bad.validate(), UsageError);
  bad = cfg;
  bad.num_classes = 1;
  CHECK_THROWS_AS(bad.validate(), UsageError);
  bad = cfg;
  bad.base_channels = 0;
  CHECK_THROWS_AS(bad.validate(), UsageError);
  bad = cfg;
  bad.levels = 1;
  CHECK_THROWS_AS(bad.validate(), UsageError);
  bad = cfg;
  bad.ham_kernel = 4;
  CHECK_THROWS_AS(bad.validate(), UsageError);
  bad = cfg;
  bad.ham_sigma = 0.0;
  CHECK_THROWS_AS(bad.validate(), UsageError);
  bad = cfg;
  bad.rfb_branch_kernels = {};
  CHECK_THROWS_AS(bad.validate(), UsageError);
  bad = cfg;
  bad.rfb_branch_kernels = {1, 2};
  CHECK_THROWS_AS(bad.validate(), UsageError);
}

TEST_CASE("model params registry") {
  ModelParams params;
  params.add("a", Tensor::zeros({2, 3}));
  params.add("b", Tensor::zeros({4}));
  CHECK(params.has("a"));
  CHECK_FALSE(params.has("c"));
  CHECK(params.get("b").numel() == 4);
  CHECK(params.tensor_count() == 2);
  CHECK(params.value_count() == 10);
  CHECK_THROWS_AS(params.add("a", Tensor::zeros({1})), UsageError);
  CHECK_THROWS_AS(params.get("missing"), UsageError);
}

TEST_CASE("squeeze-excitation gates and rescale") {
  Rng rng(11);
  ModelParams params;
  ParamBuilder pb(params, rng);
  SeBlock se = make_se_block(pb, "se", 4);

  Tensor x = random_tensor({1, 4, 4, 4, 4}, rng, -2.0, 2.0, false);
  Tensor g = se.gates(x);
  CHECK(g.shape() == Shape{1, 4, 1, 1, 1});
  for (double v : g.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  Tensor y = se.forward(x);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) {
    CHECK(std::fabs(y.data()[i]) <= std::fabs(x.data()[i]));
  }

  // Saturating the excite bias drives every gate to exactly 1.
  fill(se.excite.bias, 100.0);
  Tensor g1 = se.gates(x);
  for (double v : g1.data()) CHECK(v == 1.0);
  Tensor y1 = se.forward(x);
  CHECK(std::memcmp(y1.data().data(), x.data().data(), x.numel() * sizeof(double)) == 0);

  CHECK_THROWS_AS(se.forward(random_tensor({1, 3, 4, 4, 4}, rng, 0.0, 1.0, false)), ShapeError);
}

TEST_CASE("squeeze-excitation gradients match finite differences") {
  Rng rng(12);
  ModelParams params;
  ParamBuilder pb(params, rng);
  SeBlock se = make_se_block(pb, "se", 4);
  Tensor x = random_tensor({1, 4, 3, 3, 3}, rng, -1.0, 1.0);
  gradcheck([&](const std::vector<Tensor>&) { return probe_sum(se.forward(x), 501); },
            {x, se.squeeze.weight, se.excite.weight, se.excite.bias});
}

TEST_CASE("receptive-field block fuses branches over a residual projection") {
  Rng rng(21);
  ModelParams params;
  ParamBuilder pb(params, rng);
  RfbBlock rfb = make_rfb_block(pb, "rfb", 8, 8, {1, 3, 5});

  Tensor x = random_tensor({1, 8, 6, 6, 6}, rng, -1.0, 1.0, false);
  CHECK(rfb.forward(x).shape() == x.shape());

  // With every branch and the fusion conv zeroed, only the projection is left.
  for (Conv3dLayer& b : rfb.branches) {
    fill(b.weight, 0.0);
    fill(b.bias, 0.0);
  }
  fill(rfb.fuse.weight, 0.0);
  fill(rfb.fuse.bias, 0.0);
  Tensor got = rfb.forward(x);
  Tensor want = rfb.proj.forward(x);
  REQUIRE(got.shape() == want.shape());
  for (std::size_t i = 0; i < got.numel(); ++i) CHECK(got.data()[i] == want.data()[i]);
}

TEST_CASE("receptive-field block gradients match finite differences") {
  Rng rng(22);
  ModelParams params;
  ParamBuilder pb(params, rng);
  RfbBlock rfb = make_rfb_block(pb, "rfb", 2, 2, {1, 3});
  Tensor x = random_tensor({1, 2, 3, 3, 3}, rng, -1.0, 1.0);
  gradcheck([&](const std::vector<Tensor>&) { return probe_sum(rfb.forward(x), 502); },
            {x, rfb.branches[1].weight, rfb.fuse.weight, rfb.proj.bias});
}

TEST_CASE("holistic attention kernel taps sample a normalized gaussian") {
  HolisticAttention ham = HolisticAttention::make(11, 2.0);
  REQUIRE(ham.kz.numel() == 11);
  CHECK(ham.radius == 5);
  double total = 0.0;
  for (double v : ham.kz.data()) total += v;
  CHECK(std::fabs(total - 1.0) < 1e-12);
  const auto taps = ham.kz.data();
  for (int i = 0; i < 11; ++i) {
    CHECK(taps[static_cast<std::size_t>(i)] ==
          doctest::Approx(taps[5] * std::exp(-(i - 5.0) * (i - 5.0) / 8.0)).epsilon(1e-12));
    CHECK(taps[static_cast<std::size_t>(i)] == taps[static_cast<std::size_t>(10 - i)]);
  }
  CHECK(ham.ky.shape() == Shape{1, 1, 1, 11, 1});
  CHECK(ham.kx.shape() == Shape{1, 1, 1, 1, 11});
}

TEST_CASE("holistic attention never lowers saliency and expands support") {
  HolisticAttention ham = HolisticAttention::make(11, 2.0);
  Rng rng(31);

  // Saliency already >= 1 everywhere: the normalized blur (<= 1) never wins.
  Tensor high = random_tensor({1, 1, 8, 8, 8}, rng, 1.0, 3.0, false);
  Tensor out = ham.forward(high);
  CHECK(std::memcmp(out.data().data(), high.data().data(), high.numel() * sizeof(double)) == 0);

  // Arbitrary saliency: output is bounded below by the input and above by
  // max(input, 1) since the blur is normalized into [0,1].
  Tensor s = random_tensor({1, 1, 8, 8, 8}, rng, -2.0, 2.0, false);
  Tensor o = ham.forward(s);
  REQUIRE(o.shape() == s.shape());
  for (std::size_t i = 0; i < o.numel(); ++i) {
    CHECK(o.data()[i] >= s.data()[i]);
    CHECK(o.data()[i] <= std::max(s.data()[i], 1.0));
  }

  // A single impulse spreads to the full blur window.
  Tensor impulse = Tensor::zeros({1, 1, 12, 12, 12});
  impulse.mutable_data()[(6 * 12 + 6) * 12 + 6] = 1.0;
  Tensor widened = ham.forward(impulse);
  std::size_t support = 0;
  for (double v : widened.data()) support += v > 0.0 ? 1 : 0;
  CHECK(support == 11 * 11 * 11);
  CHECK(widened.data()[(6 * 12 + 6) * 12 + 6] == 1.0);

  // Saliency >= 1 dominates the normalized blur even when zero padding makes
  // the blur of a constant map uneven near the borders.
  Tensor flat = Tensor::full({1, 1, 4, 4, 4}, 5.0);
  Tensor kept = ham.forward(flat);
  for (double v : kept.data()) CHECK(v == 5.0);

  // A negative constant loses to the normalized blur everywhere.
  Tensor negative = Tensor::full({1, 1, 4, 4, 4}, -3.0);
  Tensor raised = ham.forward(negative);
  double lo = 2.0, hi = -2.0;
  for (double v : raised.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo == 0.0);  // min-max normalization pins both ends
  CHECK(hi == 1.0);

  // An all-zero map blurs to a constant, tripping the normalization guard:
  // zeros before the max, so the output stays identically zero.
  Tensor silent = ham.forward(Tensor::zeros({1, 1, 4, 4, 4}));
  for (double v : silent.data()) CHECK(v == 0.0);

  CHECK_THROWS_AS(ham.forward(Tensor::zeros({1, 2, 4, 4, 4})), ShapeError);
}

TEST_CASE("partial decoder fuses a three-scale pyramid") {
  Rng rng(41);
  ModelParams params;
  ParamBuilder pb(params, rng);
  PartialDecoder pd = make_partial_decoder(pb, "pd", 4);

  Tensor x1 = random_tensor({1, 4, 8, 8, 8}, rng, -1.0, 1.0, false);
  Tensor x2 = random_tensor({1, 4, 4, 4, 4}, rng, -1.0, 1.0, false);
  Tensor x3 = random_tensor({1, 4, 2, 2, 2}, rng, -1.0, 1.0, false);
  CHECK(pd.forward(x1, x2, x3).shape() == Shape{1, 1, 8, 8, 8});

  CHECK_THROWS_AS(pd.forward(x1, x2, random_tensor({1, 4, 3, 3, 3}, rng, 0, 1, false)),
                  ShapeError);
  CHECK_THROWS_AS(pd.forward(x1, random_tensor({1, 3, 4, 4, 4}, rng, 0, 1, false), x3),
                  ShapeError);

  // All-zero inputs: instance norms flatten every conv response, so the head
  // bias alone determines the output.
  fill(pd.head.bias, 0.25);
  Tensor flat = pd.forward(Tensor::zeros({1, 4, 8, 8, 8}), Tensor::zeros({1, 4, 4, 4, 4}),
                           Tensor::zeros({1, 4, 2, 2, 2}));
  for (double v : flat.data()) CHECK(v == 0.25);
}

TEST_CASE("partial decoder gradients match finite differences") {
  Rng rng(42);
  ModelParams params;
  ParamBuilder pb(params, rng);
  PartialDecoder pd = make_partial_decoder(pb, "pd", 2);
  Tensor x1 = random_tensor({1, 2, 4, 4, 4}, rng, -1.0, 1.0);
  Tensor x2 = random_tensor({1, 2, 2, 2, 2}, rng, -1.0, 1.0);
  Tensor x3 = random_tensor({1, 2, 1, 1, 1}, rng, -1.0, 1.0);
  gradcheck([&](const std::vector<Tensor>&) { return probe_sum(pd.forward(x1, x2, x3), 503); },
            {x1, x2, x3, pd.head.weight, pd.mid.conv.bias});
}

TEST_CASE("partial decoder module refines the finest scale multiplicatively") {
  Rng rng(51);
  ModelParams params;
  ParamBuilder pb(params, rng);
  Pdm pdm;
  const std::vector<int> kernels{1, 3};
  pdm.rfb_a1 = make_rfb_block(pb, "pdm.rfb_a1", 2, 2, kernels);
  pdm.rfb_a2 = make_rfb_block(pb, "pdm.rfb_a2", 3, 2, kernels);
  pdm.rfb_a3 = make_rfb_block(pb, "pdm.rfb_a3", 4, 2, kernels);
  pdm.pd_a = make_partial_decoder(pb, "pdm.pd_a", 2);
  pdm.ham = HolisticAttention::make(5, 2.0);
  pdm.rfb_b1 = make_rfb_block(pb, "pdm.rfb_b1", 2, 2, kernels);
  pdm.rfb_b2 = make_rfb_block(pb, "pdm.rfb_b2", 2, 2, kernels);
  pdm.rfb_b3 = make_rfb_block(pb, "pdm.rfb_b3", 2, 2, kernels);
  pdm.pd_b = make_partial_decoder(pb, "pdm.pd_b", 2);

  Tensor x1 = random_tensor({1, 2, 8, 8, 8}, rng, -1.0, 1.0, false);
  Tensor x2 = random_tensor({1, 3, 4, 4, 4}, rng, -1.0, 1.0, false);
  Tensor x3 = random_tensor({1, 4, 2, 2, 2}, rng, -1.0, 1.0, false);
  PdmTrace trace;
  Tensor out = pdm.forward(x1, x2, x3, &trace);
  CHECK(out.shape() == Shape{1, 1, 8, 8, 8});
  REQUIRE(trace.saliency1.shape() == Shape{1, 1, 8, 8, 8});
  REQUIRE(trace.attention.shape() == Shape{1, 1, 8, 8, 8});
  REQUIRE(trace.refined_x1.shape() == x1.shape());

  // Attention never drops below the raw saliency, and wherever it equals 1
  // the refinement passes the feature through unchanged.
  const std::size_t voxels = 8 * 8 * 8;
  std::size_t identity_voxels = 0;
  for (std::size_t i = 0; i < voxels; ++i) {
    CHECK(trace.attention.data()[i] >= trace.saliency1.data()[i]);
    if (trace.attention.data()[i] == 1.0) {
      ++identity_voxels;
      for (std::size_t c = 0; c < 2; ++c) {
        CHECK(trace.refined_x1.data()[c * voxels + i] == x1.data()[c * voxels + i]);
      }
    }
  }
  CHECK(identity_voxels >= 1);  // the blur's per-sample max normalizes to 1
}

TEST_CASE("partial decoder module gradients match finite differences") {
  Rng rng(52);
  ModelParams params;
  ParamBuilder pb(params, rng);
  Pdm pdm;
  const std::vector<int> kernels{1, 3};
  pdm.rfb_a1 = make_rfb_block(pb, "pdm.rfb_a1", 2, 2, kernels);
  pdm.rfb_a2 = make_rfb_block(pb, "pdm.rfb_a2", 3, 2, kernels);
  pdm.rfb_a3 = make_rfb_block(pb, "pdm.rfb_a3", 4, 2, kernels);
  pdm.pd_a = make_partial_decoder(pb, "pdm.pd_a", 2);
  pdm.ham = HolisticAttention::make(3, 1.0);
  pdm.rfb_b1 = make_rfb_block(pb, "pdm.rfb_b1", 2, 2, kernels);
  pdm.rfb_b2 = make_rfb_block(pb, "pdm.rfb_b2", 2, 2, kernels);
  pdm.rfb_b3 = make_rfb_block(pb, "pdm.rfb_b3", 2, 2, kernels);
  pdm.pd_b = make_partial_decoder(pb, "pdm.pd_b", 2);

  Tensor x1 = random_tensor({1, 2, 4, 4, 4}, rng, -1.0, 1.0);
  Tensor x2 = random_tensor({1, 3, 2, 2, 2}, rng, -1.0, 1.0);
  Tensor x3 = random_tensor({1, 4, 1, 1, 1}, rng, -1.0, 1.0);
  gradcheck(
      [&](const std::vector<Tensor>&) { return probe_sum(pdm.forward(x1, x2, x3), 504); },
      {x1, x2, x3, pdm.pd_b.head.weight, pdm.rfb_b1.fuse.bias}, 1e-6);
}

TEST_CASE("channel-wise attention blends skip and decoder streams") {
  Rng rng(61);
  ModelParams params;
  ParamBuilder pb(params, rng);
  Cwam cwam = make_cwam(pb, "cwam", 3);

  Tensor enc = random_tensor({1, 3, 4, 4, 4}, rng, -1.0, 1.0, false);
  Tensor dec = random_tensor({1, 3, 4, 4, 4}, rng, -1.0, 1.0, false);

  Tensor w = cwam.weights(enc, dec);
  REQUIRE(w.shape() == Shape{1, 2, 4, 4, 4});
  const std::size_t voxels = 4 * 4 * 4;
  for (std::size_t i = 0; i < voxels; ++i) {
    const double w1 = w.data()[i], w2 = w.data()[voxels + i];
    CHECK(w1 > 0.0);
    CHECK(w2 > 0.0);
    CHECK(std::fabs(w1 + w2 - 1.0) < 1e-12);
  }

  // Equal inputs: any convex combination reproduces them.
  Tensor same = cwam.fuse(enc, enc);
  for (std::size_t i = 0; i < same.numel(); ++i) {
    CHECK(std::fabs(same.data()[i] - enc.data()[i]) <= 1e-12 * std::max(1.0, std::fabs(enc.data()[i])));
  }

  CHECK(cwam.forward(enc, dec).shape() == enc.shape());
  CHECK_THROWS_AS(cwam.forward(enc, random_tensor({1, 3, 2, 2, 2}, rng, 0, 1, false)),
                  ShapeError);
}

TEST_CASE("channel-wise attention gradients match finite differences") {
  Rng rng(62);
  ModelParams params;
  ParamBuilder pb(params, rng);
  Cwam cwam = make_cwam(pb, "cwam", 2);
  Tensor enc = random_tensor({1, 2, 3, 3, 3}, rng, -1.0, 1.0);
  Tensor dec = random_tensor({1, 2, 3, 3, 3}, rng, -1.0, 1.0);
  gradcheck([&](const std::vector<Tensor>&) { return probe_sum(cwam.forward(enc, dec), 505); },
            {enc, dec, cwam.attn.weight, cwam.se.excite.weight});
}

TEST_CASE("network forward honors the shape contract") {
  NetworkConfig cfg = toy_config();
  cfg.num_classes = 3;
  cfg.ham_kernel = 5;
  PdaNet net(cfg, 7);

  Rng rng(71);
  Tensor x = random_tensor({1, 1, 32, 32, 32}, rng, -1.0, 1.0, false);
  Tensor logits = net.forward(x);
  CHECK(logits.shape() == Shape{1, 3, 32, 32, 32});
  logits.check_finite("logits");

  CHECK_THROWS_AS(net.forward(Tensor::zeros({1, 1, 12, 12, 12})), ShapeError);
  CHECK_THROWS_AS(net.forward(Tensor::zeros({1, 2, 8, 8, 8})), ShapeError);
  CHECK_THROWS_AS(net.forward(Tensor::zeros({1, 8, 8, 8})), ShapeError);

  // Two levels is the minimum depth; the module taps then include the
  // bottleneck directly.
  NetworkConfig shallow = toy_config();
  shallow.levels = 2;
  PdaNet small(shallow, 7);
  CHECK(small.forward(Tensor::zeros({1, 1, 8, 8, 8})).shape() == Shape{1, 2, 8, 8, 8});
}

TEST_CASE("same seed builds bitwise-identical networks") {
  NetworkConfig cfg = toy_config();
  PdaNet a(cfg, 99), b(cfg, 99), c(cfg, 100);
  Rng rng(72);
  Tensor x = random_tensor({1, 1, 8, 8, 8}, rng, -1.0, 1.0, false);
  Tensor ya = a.forward(x), yb = b.forward(x), yc = c.forward(x);
  CHECK(std::memcmp(ya.data().data(), yb.data().data(), ya.numel() * sizeof(double)) == 0);
  CHECK(std::memcmp(ya.data().data(), yc.data().data(), ya.numel() * sizeof(double)) != 0);
}

TEST_CASE("parameter budget at default scale stays fixed") {
  PdaNet net(NetworkConfig{}, 1);
  MESSAGE("tensors: ", net.params().tensor_count(), ", values: ", net.params().value_count());
  CHECK(net.params().tensor_count() == 152);
  CHECK(net.params().value_count() == 1232802);
}

TEST_CASE("full network gradients match finite differences") {
  PdaNet net(toy_config(), 1234);
  Rng rng(73);
  Tensor x = random_tensor({1, 1, 8, 8, 8}, rng, -1.0, 1.0);
  ModelParams& p = net.params();
  gradcheck([&](const std::vector<Tensor>&) { return probe_sum(net.forward(x), 506); },
            {x, p.get("enc1.conv.weight"), p.get("pdm.rfb_a2.proj.weight"),
             p.get("pdm.pd_b.head.weight"), p.get("pdm_proj.bias"),
             p.get("dec2.cwam.attn.weight"), p.get("head.weight")},
            1e-4);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  NetworkConfig cfg = toy_config();
  cfg.levels = 2;
  cfg.ham_sigma = 0.3;
  PdaNet net(cfg, 42);
  const std::string path = "tmp_roundtrip_ckpt.bin";
  save_checkpoint(path, net.config(), net.params());

  PdaNet loaded = load_pdanet(path);
  CHECK(loaded.config().in_channels == cfg.in_channels);
  CHECK(loaded.config().num_classes == cfg.num_classes);
  CHECK(loaded.config().base_channels == cfg.base_channels);
  CHECK(loaded.config().levels == cfg.levels);
  CHECK(loaded.config().rfb_branch_kernels == cfg.rfb_branch_kernels);
  CHECK(loaded.config().ham_kernel == cfg.ham_kernel);
  CHECK(loaded.config().ham_sigma == cfg.ham_sigma);

  REQUIRE(loaded.params().tensor_count() == net.params().tensor_count());
  for (std::size_t i = 0; i < net.params().items.size(); ++i) {
    const auto& [name, t] = net.params().items[i];
    const auto& [lname, lt] = loaded.params().items[i];
    CHECK(name == lname);
    REQUIRE(lt.shape() == t.shape());
    CHECK(std::memcmp(lt.data().data(), t.data().data(), t.numel() * sizeof(double)) == 0);
  }

  Rng rng(81);
  Tensor x = random_tensor({1, 1, 8, 8, 8}, rng, -1.0, 1.0, false);
  Tensor y0 = net.forward(x), y1 = loaded.forward(x);
  CHECK(std::memcmp(y0.data().data(), y1.data().data(), y0.numel() * sizeof(double)) == 0);
  std::remove(path.c_str());
}

TEST_CASE("damaged or mismatched checkpoints are rejected") {
  NetworkConfig cfg = toy_config();
  cfg.levels = 2;
  PdaNet net(cfg, 5);
  const std::string path = "tmp_damaged_ckpt.bin";
  save_checkpoint(path, net.config(), net.params());

  CHECK_THROWS_AS(load_checkpoint("no_such_file.bin"), DataError);

  {
    std::ofstream out("tmp_bad_magic.bin", std::ios::binary);
    out << "JUNKJUNKJUNK";
  }
  CHECK_THROWS_AS(load_checkpoint("tmp_bad_magic.bin"), DataError);
  std::remove("tmp_bad_magic.bin");

  // Truncation anywhere in the tensor stream must be caught.
  {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    std::ofstream out("tmp_truncated.bin", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint("tmp_truncated.bin"), DataError);
  std::remove("tmp_truncated.bin");

  // A parameter set that does not match the architecture is rejected.
  Checkpoint ckpt = load_checkpoint(path);
  ModelParams missing;
  for (std::size_t i = 1; i < ckpt.params.items.size(); ++i) {
    missing.add(ckpt.params.items[i].first, ckpt.params.items[i].second);
  }
  CHECK_THROWS_AS(PdaNet(ckpt.config, std::move(missing)), DataError);

  Checkpoint extra = load_checkpoint(path);
  extra.params.add("bogus.weight", Tensor::zeros({3}));
  CHECK_THROWS_AS(PdaNet(extra.config, std::move(extra.params)), DataError);

  Checkpoint reshaped = load_checkpoint(path);
  reshaped.params.items[0].second = Tensor::zeros({1, 2, 3});
  CHECK_THROWS_AS(PdaNet(reshaped.config, std::move(reshaped.params)), DataError);
  std::remove(path.c_str());
}

TEST_CASE("network config json round-trips") {
  NetworkConfig cfg;
  cfg.num_classes = 5;
  cfg.rfb_branch_kernels = {1, 7};
  cfg.ham_sigma = 0.3;
  NetworkConfig back = network_config_from_json(network_config_json(cfg));
  CHECK(back.in_channels == cfg.in_channels);
  CHECK(back.num_classes == 5);
  CHECK(back.base_channels == cfg.base_channels);
  CHECK(back.levels == cfg.levels);
  CHECK(back.rfb_branch_kernels == std::vector<int>{1, 7});
  CHECK(back.ham_kernel == cfg.ham_kernel);
  CHECK(back.ham_sigma == 0.3);

  CHECK_THROWS_AS(network_config_from_json("{nope"), DataError);
  CHECK_THROWS_AS(network_config_from_json("{\"levels\": \"three\"}"), DataError);
}
