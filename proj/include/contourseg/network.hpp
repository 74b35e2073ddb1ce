#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "contourseg/common.hpp"
#include "contourseg/tensor.hpp"

namespace contourseg {

struct NetworkConfig {
  int in_channels = 1;
  int num_classes = 2;
  int base_channels = 16;
  int levels = 3;
  std::vector<int> rfb_branch_kernels = {1, 3, 5};
  int ham_kernel = 11;
  double ham_sigma = 2.0;

  void validate() const;  // throws UsageError
};

// Named learnable tensors in registration order, so initialization and
// checkpoints are reproducible run to run.
struct ModelParams {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor& add(const std::string& name, Tensor t);
  const Tensor& get(const std::string& name) const;  // UsageError if absent
  bool has(const std::string& name) const;
  std::size_t tensor_count() const { return items.size(); }
  std::size_t value_count() const;
  void zero_grad();
  void check_finite(const char* what) const;
};

// Hands out parameter tensors by name: freshly initialized from an Rng
// (He-normal weights, constant fills elsewhere), or re-attached from a
// loaded checkpoint when constructed with one. Every tensor handed out is
// registered in the ModelParams passed to the constructor.
class ParamBuilder {
 public:
  ParamBuilder(ModelParams& out, Rng& rng) : out_(out), rng_(&rng) {}
  ParamBuilder(ModelParams& out, std::unordered_map<std::string, Tensor> loaded)
      : out_(out), loaded_(std::move(loaded)) {}

  // he_fan_in > 0 selects He-normal init with that fan-in; otherwise the
  // tensor is filled with `fill`.
  Tensor param(const std::string& name, Shape shape, double he_fan_in, double fill);

  // Throws DataError if loaded tensors were never claimed by a param() call.
  void finish() const;

 private:
  ModelParams& out_;
  Rng* rng_ = nullptr;
  std::unordered_map<std::string, Tensor> loaded_;
};

// 3-D convolution with stride/dilation 1 everywhere in the model; the
// padding is fixed at construction ((k-1)/2 keeps extents).
struct Conv3dLayer {
  Tensor weight, bias;
  int padding = 0;

  Tensor forward(const Tensor& x) const { return conv3d(x, weight, bias, 1, padding, 1); }
};

// conv 3x3x3 -> instance norm -> relu
struct ConvModule {
  Conv3dLayer conv;
  Tensor gamma, beta;

  Tensor forward(const Tensor& x) const;
};

// Squeeze-and-excitation: global average pool -> bottleneck (reduction 4)
// -> sigmoid channel gates -> rescale.
struct SeBlock {
  Conv3dLayer squeeze, excite;  // 1x1x1 convs on the pooled [N,C,1,1,1] map

  Tensor gates(const Tensor& x) const;  // [N,C,1,1,1], each in (0,1)
  Tensor forward(const Tensor& x) const;
};

// Parallel same-padding conv branches of different kernel sizes, concatenated
// and fused by a 1x1x1 conv, plus a 1x1x1 residual projection of the input.
struct RfbBlock {
  std::vector<Conv3dLayer> branches;
  Conv3dLayer fuse, proj;

  Tensor forward(const Tensor& x) const;
};

// Fixed separable Gaussian blur (zero bias, zero padding), min-max
// normalized per sample, then elementwise max with the input saliency.
// Expands the support of a saliency map without ever lowering it.
struct HolisticAttention {
  Tensor kz, ky, kx;  // non-learned 1-D kernel taps
  int radius = 0;

  static HolisticAttention make(int kernel, double sigma);
  Tensor forward(const Tensor& saliency) const;  // [N,1,D,H,W] -> same
};

// Fuses a three-scale pyramid coarse-to-fine into a single-channel map at
// the finest resolution. All inputs must share a channel count and halve in
// extent per scale.
struct PartialDecoder {
  ConvModule mid, fine;
  Conv3dLayer head;

  Tensor forward(const Tensor& x1, const Tensor& x2, const Tensor& x3) const;
};

struct PdmTrace {
  Tensor saliency1;   // first partial-decoder output
  Tensor attention;   // after holistic attention
  Tensor refined_x1;  // x1 rescaled by the attention map
};

// Partial decoder module: RFB per scale -> partial decoder -> holistic
// attention -> multiplicative refinement of x1 -> a second RFB cascade
// (pooling between stages rebuilds the pyramid) -> partial decoder.
struct Pdm {
  RfbBlock rfb_a1, rfb_a2, rfb_a3;
  PartialDecoder pd_a;
  HolisticAttention ham;
  RfbBlock rfb_b1, rfb_b2, rfb_b3;
  PartialDecoder pd_b;

  Tensor forward(const Tensor& x1, const Tensor& x2, const Tensor& x3,
                 PdmTrace* trace = nullptr) const;
};

// Channel-wise attention fusing an encoder skip with the decoder stream:
// a 2-channel softmax over the concatenated features yields complementary
// voxel weights w1/w2; the convex combination passes through an SE block.
struct Cwam {
  Conv3dLayer attn;
  SeBlock se;

  Tensor weights(const Tensor& enc, const Tensor& dec) const;  // [N,2,D,H,W]
  Tensor fuse(const Tensor& enc, const Tensor& dec) const;     // pre-SE
  Tensor forward(const Tensor& enc, const Tensor& dec) const;
};

Conv3dLayer make_conv_layer(ParamBuilder& pb, const std::string& prefix, int in_ch, int out_ch,
                            int kernel);
ConvModule make_conv_module(ParamBuilder& pb, const std::string& prefix, int in_ch, int out_ch);
SeBlock make_se_block(ParamBuilder& pb, const std::string& prefix, int channels);
RfbBlock make_rfb_block(ParamBuilder& pb, const std::string& prefix, int in_ch, int out_ch,
                        const std::vector<int>& kernels);
PartialDecoder make_partial_decoder(ParamBuilder& pb, const std::string& prefix, int channels);
Cwam make_cwam(ParamBuilder& pb, const std::string& prefix, int channels);

// Encoder-decoder segmentation network. Each encoder level doubles the
// channels and halves the extents; the partial decoder module consumes the
// three deepest encoder-side scales and its saliency output is pooled to
// bottleneck resolution, channel-projected, and added to the stream entering
// the decoder; each decoder level fuses its skip through channel-wise
// attention before a conv module.
class PdaNet {
 public:
  PdaNet(NetworkConfig cfg, std::uint64_t seed);
  PdaNet(NetworkConfig cfg, ModelParams loaded);  // from a checkpoint

  // volume [N,in_channels,D,H,W] with D,H,W divisible by 2^levels.
  Tensor forward(const Tensor& volume, PdmTrace* trace = nullptr) const;

  const NetworkConfig& config() const { return cfg_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

 private:
  void build(ParamBuilder& pb);

  NetworkConfig cfg_;
  ModelParams params_;
  std::vector<ConvModule> enc_convs_;
  std::vector<SeBlock> enc_se_;
  ConvModule bott_conv_;
  SeBlock bott_se_;
  Pdm pdm_;
  Conv3dLayer pdm_proj_;
  std::vector<Conv3dLayer> upconvs_;  // deepest level first
  std::vector<Cwam> cwams_;
  std::vector<ConvModule> dec_convs_;
  Conv3dLayer head_;
};

// Versioned binary container: magic/version, config echo as JSON, then the
// named tensors as raw little-endian 64-bit values. Round-trips bit-exactly.
struct Checkpoint {
  NetworkConfig config;
  ModelParams params;
};

void save_checkpoint(const std::string& path, const NetworkConfig& cfg, const ModelParams& params);
Checkpoint load_checkpoint(const std::string& path);
PdaNet load_pdanet(const std::string& path);

std::string network_config_json(const NetworkConfig& cfg);
NetworkConfig network_config_from_json(const std::string& text);

}  // namespace contourseg
