#include "contourseg/network.hpp"

#include <array>
#include <cmath>
#include <utility>

namespace contourseg {

void NetworkConfig::validate() const {
  if (in_channels < 1) throw UsageError("in_channels must be >= 1");
  if (num_classes < 2) throw UsageError("num_classes must be >= 2");
  if (base_channels < 1) throw UsageError("base_channels must be >= 1");
  if (levels < 2) throw UsageError("levels must be >= 2");
  if (ham_kernel < 1 || ham_kernel % 2 == 0) throw UsageError("ham_kernel must be odd");
  if (!(ham_sigma > 0.0) || !std::isfinite(ham_sigma)) {
    throw UsageError("ham_sigma must be positive");
  }
  if (rfb_branch_kernels.empty()) throw UsageError("rfb_branch_kernels must not be empty");
  for (int k : rfb_branch_kernels) {
    if (k < 1 || k % 2 == 0) throw UsageError("rfb branch kernels must be odd");
  }
}

Tensor& ModelParams::add(const std::string& name, Tensor t) {
  if (has(name)) throw UsageError("duplicate parameter name: " + name);
  if (!t.defined()) throw UsageError("undefined tensor for parameter: " + name);
  items.emplace_back(name, std::move(t));
  return items.back().second;
}

const Tensor& ModelParams::get(const std::string& name) const {
  for (const auto& [n, t] : items) {
    if (n == name) return t;
  }
  throw UsageError("no parameter named: " + name);
}

bool ModelParams::has(const std::string& name) const {
  for (const auto& [n, t] : items) {
    if (n == name) return true;
  }
  return false;
}

std::size_t ModelParams::value_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : items) n += t.numel();
  return n;
}

void ModelParams::zero_grad() {
  for (auto& [name, t] : items) t.zero_grad();
}

void ModelParams::check_finite(const char* what) const {
  for (const auto& [name, t] : items) t.check_finite((std::string(what) + ": " + name).c_str());
}

Tensor ParamBuilder::param(const std::string& name, Shape shape, double he_fan_in, double fill) {
  if (rng_ == nullptr) {
    auto it = loaded_.find(name);
    if (it == loaded_.end()) throw DataError("checkpoint is missing parameter: " + name);
    Tensor t = std::move(it->second);
    loaded_.erase(it);
    if (t.shape() != shape) {
      throw DataError("checkpoint parameter " + name + " has shape " + shape_str(t.shape()) +
                      ", expected " + shape_str(shape));
    }
    t.set_requires_grad(true);
    return out_.add(name, std::move(t));
  }
  Tensor t;
  if (he_fan_in > 0.0) {
    const double stddev = std::sqrt(2.0 / he_fan_in);
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = rng_->normal(0.0, stddev);
    t = Tensor::from_data(std::move(shape), std::move(values));
  } else {
    t = Tensor::full(std::move(shape), fill);
  }
  t.set_requires_grad(true);
  return out_.add(name, std::move(t));
}

void ParamBuilder::finish() const {
  if (rng_ == nullptr && !loaded_.empty()) {
    throw DataError("checkpoint has unexpected parameter: " + loaded_.begin()->first);
  }
}

Tensor ConvModule::forward(const Tensor& x) const {
  return relu(instance_norm(conv.forward(x), gamma, beta));
}

Tensor SeBlock::gates(const Tensor& x) const {
  const std::array<int, 3> spatial{2, 3, 4};
  Tensor pooled = mean(x, spatial, /*keepdims=*/true);  // [N,C,1,1,1]
  return sigmoid(excite.forward(relu(squeeze.forward(pooled))));
}

Tensor SeBlock::forward(const Tensor& x) const { return mul(x, gates(x)); }

Tensor RfbBlock::forward(const Tensor& x) const {
  std::vector<Tensor> outs;
  outs.reserve(branches.size());
  for (const Conv3dLayer& b : branches) outs.push_back(relu(b.forward(x)));
  return add(fuse.forward(concat(outs, 1)), proj.forward(x));
}

HolisticAttention HolisticAttention::make(int kernel, double sigma) {
  HolisticAttention ham;
  ham.radius = (kernel - 1) / 2;
  std::vector<double> taps(static_cast<std::size_t>(kernel));
  double total = 0.0;
  for (int i = 0; i < kernel; ++i) {
    const double d = i - ham.radius;
    taps[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += taps[static_cast<std::size_t>(i)];
  }
  for (double& t : taps) t /= total;
  const std::size_t k = static_cast<std::size_t>(kernel);
  ham.kz = Tensor::from_data({1, 1, k, 1, 1}, taps);
  ham.ky = Tensor::from_data({1, 1, 1, k, 1}, taps);
  ham.kx = Tensor::from_data({1, 1, 1, 1, k}, std::move(taps));
  return ham;
}

Tensor HolisticAttention::forward(const Tensor& saliency) const {
  if (saliency.ndim() != 5 || saliency.extent(1) != 1) {
    throw ShapeError("holistic attention expects a single-channel [N,1,D,H,W] map, got " +
                     shape_str(saliency.shape()));
  }
  Tensor b = conv3d(saliency, kz, Tensor(), 1, radius, 0, 0, 1);
  b = conv3d(b, ky, Tensor(), 1, 0, radius, 0, 1);
  b = conv3d(b, kx, Tensor(), 1, 0, 0, radius, 1);
  return maximum(minmax_normalize(b), saliency);
}

Tensor PartialDecoder::forward(const Tensor& x1, const Tensor& x2, const Tensor& x3) const {
  for (const Tensor* t : {&x1, &x2, &x3}) {
    if (t->ndim() != 5) throw ShapeError("pyramid inputs must be [N,C,D,H,W]");
  }
  for (int ax : {0, 1}) {
    if (x1.extent(ax) != x2.extent(ax) || x2.extent(ax) != x3.extent(ax)) {
      throw ShapeError("pyramid inputs disagree on batch/channel extents");
    }
  }
  for (int ax : {2, 3, 4}) {
    if (x1.extent(ax) != 2 * x2.extent(ax) || x2.extent(ax) != 2 * x3.extent(ax)) {
      throw ShapeError("pyramid extents must halve per scale: " + shape_str(x1.shape()) + ", " +
                       shape_str(x2.shape()) + ", " + shape_str(x3.shape()));
    }
  }
  Tensor m = mid.forward(concat(std::array<Tensor, 2>{upsample3d_trilinear(x3, 2), x2}, 1));
  Tensor f = fine.forward(concat(std::array<Tensor, 2>{upsample3d_trilinear(m, 2), x1}, 1));
  return head.forward(f);
}

Tensor Pdm::forward(const Tensor& x1, const Tensor& x2, const Tensor& x3,
                    PdmTrace* trace) const {
  Tensor s1 = pd_a.forward(rfb_a1.forward(x1), rfb_a2.forward(x2), rfb_a3.forward(x3));
  Tensor h = ham.forward(s1);
  Tensor refined = mul(x1, h);  // attention map broadcasts over channels
  if (trace) {
    trace->saliency1 = s1;
    trace->attention = h;
    trace->refined_x1 = refined;
  }
  Tensor y1 = rfb_b1.forward(refined);
  Tensor y2 = rfb_b2.forward(max_pool3d(y1, 2, 2));
  Tensor y3 = rfb_b3.forward(max_pool3d(y2, 2, 2));
  return pd_b.forward(y1, y2, y3);
}

Tensor Cwam::weights(const Tensor& enc, const Tensor& dec) const {
  if (enc.shape() != dec.shape()) {
    throw ShapeError("attention fusion needs matching shapes, got " + shape_str(enc.shape()) +
                     " vs " + shape_str(dec.shape()));
  }
  return softmax(attn.forward(concat(std::array<Tensor, 2>{enc, dec}, 1)), 1);
}

Tensor Cwam::fuse(const Tensor& enc, const Tensor& dec) const {
  const std::array<std::size_t, 2> ones{1, 1};
  std::vector<Tensor> w = split(weights(enc, dec), 1, ones);
  return add(mul(w[0], enc), mul(w[1], dec));
}

Tensor Cwam::forward(const Tensor& enc, const Tensor& dec) const {
  return se.forward(fuse(enc, dec));
}

Conv3dLayer make_conv_layer(ParamBuilder& pb, const std::string& prefix, int in_ch, int out_ch,
                            int kernel) {
  const std::size_t o = static_cast<std::size_t>(out_ch), i = static_cast<std::size_t>(in_ch),
                    k = static_cast<std::size_t>(kernel);
  Conv3dLayer layer;
  layer.weight =
      pb.param(prefix + ".weight", {o, i, k, k, k}, static_cast<double>(i * k * k * k), 0.0);
  layer.bias = pb.param(prefix + ".bias", {o}, 0.0, 0.0);
  layer.padding = (kernel - 1) / 2;
  return layer;
}

ConvModule make_conv_module(ParamBuilder& pb, const std::string& prefix, int in_ch, int out_ch) {
  ConvModule m;
  m.conv = make_conv_layer(pb, prefix + ".conv", in_ch, out_ch, 3);
  m.gamma = pb.param(prefix + ".norm.gamma", {static_cast<std::size_t>(out_ch)}, 0.0, 1.0);
  m.beta = pb.param(prefix + ".norm.beta", {static_cast<std::size_t>(out_ch)}, 0.0, 0.0);
  return m;
}

SeBlock make_se_block(ParamBuilder& pb, const std::string& prefix, int channels) {
  const int mid = std::max(1, channels / 4);
  SeBlock se;
  se.squeeze = make_conv_layer(pb, prefix + ".squeeze", channels, mid, 1);
  se.excite = make_conv_layer(pb, prefix + ".excite", mid, channels, 1);
  return se;
}

RfbBlock make_rfb_block(ParamBuilder& pb, const std::string& prefix, int in_ch, int out_ch,
                        const std::vector<int>& kernels) {
  RfbBlock rfb;
  for (std::size_t b = 0; b < kernels.size(); ++b) {
    rfb.branches.push_back(
        make_conv_layer(pb, prefix + ".branch" + std::to_string(b), in_ch, out_ch, kernels[b]));
  }
  const int cat_ch = out_ch * static_cast<int>(kernels.size());
  rfb.fuse = make_conv_layer(pb, prefix + ".fuse", cat_ch, out_ch, 1);
  rfb.proj = make_conv_layer(pb, prefix + ".proj", in_ch, out_ch, 1);
  return rfb;
}

PartialDecoder make_partial_decoder(ParamBuilder& pb, const std::string& prefix, int channels) {
  PartialDecoder pd;
  pd.mid = make_conv_module(pb, prefix + ".mid", 2 * channels, channels);
  pd.fine = make_conv_module(pb, prefix + ".fine", 2 * channels, channels);
  pd.head = make_conv_layer(pb, prefix + ".head", channels, 1, 1);
  return pd;
}

Cwam make_cwam(ParamBuilder& pb, const std::string& prefix, int channels) {
  Cwam c;
  c.attn = make_conv_layer(pb, prefix + ".attn", 2 * channels, 2, 1);
  c.se = make_se_block(pb, prefix + ".se", channels);
  return c;
}

PdaNet::PdaNet(NetworkConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  ParamBuilder pb(params_, rng);
  build(pb);
  pb.finish();
}

PdaNet::PdaNet(NetworkConfig cfg, ModelParams loaded) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::unordered_map<std::string, Tensor> pending;
  for (auto& [name, t] : loaded.items) pending.emplace(std::move(name), std::move(t));
  ParamBuilder pb(params_, std::move(pending));
  build(pb);
  pb.finish();
}

void PdaNet::build(ParamBuilder& pb) {
  const int L = cfg_.levels;
  int c_in = cfg_.in_channels;
  for (int i = 0; i < L; ++i) {
    const int c_out = cfg_.base_channels << i;
    const std::string p = "enc" + std::to_string(i + 1);
    enc_convs_.push_back(make_conv_module(pb, p, c_in, c_out));
    enc_se_.push_back(make_se_block(pb, p + ".se", c_out));
    c_in = c_out;
  }
  const int c_bott = cfg_.base_channels << L;
  bott_conv_ = make_conv_module(pb, "bottleneck", c_in, c_bott);
  bott_se_ = make_se_block(pb, "bottleneck.se", c_bott);

  // The partial decoder module taps the three deepest encoder-side scales;
  // counting the bottleneck, those exist for every levels >= 2.
  const int ch = cfg_.base_channels;
  const int t1c = cfg_.base_channels << (L - 2);
  const int t2c = cfg_.base_channels << (L - 1);
  pdm_.rfb_a1 = make_rfb_block(pb, "pdm.rfb_a1", t1c, ch, cfg_.rfb_branch_kernels);
  pdm_.rfb_a2 = make_rfb_block(pb, "pdm.rfb_a2", t2c, ch, cfg_.rfb_branch_kernels);
  pdm_.rfb_a3 = make_rfb_block(pb, "pdm.rfb_a3", c_bott, ch, cfg_.rfb_branch_kernels);
  pdm_.pd_a = make_partial_decoder(pb, "pdm.pd_a", ch);
  pdm_.ham = HolisticAttention::make(cfg_.ham_kernel, cfg_.ham_sigma);
  pdm_.rfb_b1 = make_rfb_block(pb, "pdm.rfb_b1", t1c, ch, cfg_.rfb_branch_kernels);
  pdm_.rfb_b2 = make_rfb_block(pb, "pdm.rfb_b2", ch, ch, cfg_.rfb_branch_kernels);
  pdm_.rfb_b3 = make_rfb_block(pb, "pdm.rfb_b3", ch, ch, cfg_.rfb_branch_kernels);
  pdm_.pd_b = make_partial_decoder(pb, "pdm.pd_b", ch);
  pdm_proj_ = make_conv_layer(pb, "pdm_proj", 1, c_bott, 1);

  int c = c_bott;
  for (int i = L - 1; i >= 0; --i) {
    const int c_skip = cfg_.base_channels << i;
    const std::string p = "dec" + std::to_string(i + 1);
    upconvs_.push_back(make_conv_layer(pb, p + ".up", c, c_skip, 1));
    cwams_.push_back(make_cwam(pb, p + ".cwam", c_skip));
    dec_convs_.push_back(make_conv_module(pb, p + ".conv", c_skip, c_skip));
    c = c_skip;
  }
  head_ = make_conv_layer(pb, "head", cfg_.base_channels, cfg_.num_classes, 1);
}

Tensor PdaNet::forward(const Tensor& volume, PdmTrace* trace) const {
  if (volume.ndim() != 5) {
    throw ShapeError("expected [N,C,D,H,W] input, got " + shape_str(volume.shape()));
  }
  if (volume.extent(1) != static_cast<std::size_t>(cfg_.in_channels)) {
    throw ShapeError("input has " + std::to_string(volume.extent(1)) + " channels, expected " +
                     std::to_string(cfg_.in_channels));
  }
  const std::size_t div = std::size_t{1} << cfg_.levels;
  for (int ax : {2, 3, 4}) {
    if (volume.extent(ax) % div != 0) {
      throw ShapeError("input extents must be divisible by 2^levels = " + std::to_string(div) +
                       ", got " + shape_str(volume.shape()));
    }
  }

  const int L = cfg_.levels;
  std::vector<Tensor> skips;
  Tensor x = volume;
  for (int i = 0; i < L; ++i) {
    if (i > 0) x = max_pool3d(x, 2, 2);
    x = enc_se_[static_cast<std::size_t>(i)].forward(
        enc_convs_[static_cast<std::size_t>(i)].forward(x));
    skips.push_back(x);
  }
  x = max_pool3d(x, 2, 2);
  x = bott_se_.forward(bott_conv_.forward(x));

  Tensor sal = pdm_.forward(skips[static_cast<std::size_t>(L - 2)],
                            skips[static_cast<std::size_t>(L - 1)], x, trace);
  // The saliency sits two scales above the bottleneck; pool it down before
  // the channel projection joins it to the decoder input stream.
  x = add(x, pdm_proj_.forward(avg_pool3d(sal, 4, 4)));

  for (int i = L - 1, j = 0; i >= 0; --i, ++j) {
    const std::size_t ui = static_cast<std::size_t>(j), si = static_cast<std::size_t>(i);
    x = upsample3d_trilinear(x, 2);
    x = upconvs_[ui].forward(x);
    x = cwams_[ui].forward(skips[si], x);
    x = dec_convs_[ui].forward(x);
  }
  return head_.forward(x);
}

}  // namespace contourseg
