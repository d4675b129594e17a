#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "nhvt/blocks.hpp"

namespace nhvt {

enum class Variant { kNucleiHVT, kCBNucleiHVT };
enum class DecoderKind { kNucleiHVT, kMaxViTUNet, kUperNet };

std::string to_string(Variant v);
std::string to_string(DecoderKind d);
Variant parse_variant(const std::string& s);
DecoderKind parse_decoder(const std::string& s);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// One encoder stage. Stage 0 runs two 3x3 conv units at full resolution;
// stages 1-4 run a 1x1 + 3x3 conv pair with a residual across it, halve the
// resolution and apply a MaxViT block.
struct StageSpec {
  int index = 0;
  std::int64_t channels = 8;
  std::vector<int> conv_kernels{1, 3};
  int dilation = 1;  // applied to kernels larger than 1
  bool has_maxvit = true;
  bool downsample = true;
};

struct ModelConfig {
  Variant variant = Variant::kNucleiHVT;
  std::int64_t in_channels = 3;
  int num_classes = 2;
  std::int64_t base_channels = 8;
  // Empty: derived from base_channels (channels C * 2^i, dilation 2 at
  // stages 2 and 4, MaxViT and downsampling at stages 1-4).
  std::vector<StageSpec> stages;
  int window = 8;
  bool use_rel_bias = true;
  int maxvit_depth = 1;
  double mbconv_expansion = 4.0;
  double se_ratio = 0.25;
  DecoderKind decoder = DecoderKind::kNucleiHVT;
  std::uint64_t seed = 0;

  std::vector<StageSpec> resolved_stages() const;
  // Collects every violated constraint into one ConfigError.
  void validate() const;
  MaxViTOptions maxvit_options() const;

  static ModelConfig toy(Variant v = Variant::kNucleiHVT);
  static ModelConfig paper_scale(Variant v = Variant::kNucleiHVT);
};

inline constexpr std::int64_t kMinInputSide = 32;
// Rejects inputs smaller than kMinInputSide or not divisible by 2^(number of
// downsampling stages).
void check_input_shape(const ModelConfig& cfg, const Shape& nchw);

template <typename T>
struct EncoderOutput {
  std::vector<Tensor<T>> skips;  // stages 0..3
  Tensor<T> bottleneck;          // stage 4
};

struct ForwardTrace {
  std::vector<Shape> skips;
  Shape bottleneck;
  std::vector<Shape> decoder_stages;  // D3, D2, D1, D0
  Shape logits;
};

// Sequence of conv -> BN -> Mish units ("conv0", "conv1", ...), optionally
// with a shortcut across the whole stack (1x1 projection with bias when the
// channel counts differ).
template <typename T>
class ConvStack : public Module<T> {
 public:
  ConvStack(std::int64_t in, std::int64_t out, const std::vector<int>& kernels, int dilation, bool residual,
            Rng& rng);
  Tensor<T> forward(const Tensor<T>& x);

 private:
  std::vector<ConvBnMish<T>*> convs_;
  bool residual_;
  Conv2d<T>* shortcut_ = nullptr;
};

template <typename T>
class Encoder : public Module<T> {
 public:
  virtual EncoderOutput<T> forward(const Tensor<T>& x) = 0;
};

template <typename T>
class NucleiHVTEncoder : public Encoder<T> {
 public:
  NucleiHVTEncoder(const ModelConfig& cfg, Rng& rng);
  EncoderOutput<T> forward(const Tensor<T>& x) override;

 private:
  struct Stage {
    ConvStack<T>* convs = nullptr;
    MaxViTBlock<T>* maxvit = nullptr;
    bool downsample = false;
  };
  std::vector<Stage> stages_;
  ModelConfig cfg_;
};

// Stem of two 3x3 conv units, then one MaxViT block with a stride-2 MBConv
// per stage.
template <typename T>
class MaxViTEncoder : public Encoder<T> {
 public:
  MaxViTEncoder(const ModelConfig& cfg, Rng& rng);
  EncoderOutput<T> forward(const Tensor<T>& x) override;

 private:
  ConvStack<T>& stem_;
  std::vector<MaxViTBlock<T>*> stages_;
  ModelConfig cfg_;
};

template <typename T>
class Decoder : public Module<T> {
 public:
  virtual Tensor<T> forward(const EncoderOutput<T>& features, ForwardTrace* trace) = 0;
  virtual Conv2d<T>& head() = 0;
};

// D3..D0: transposed conv (k2, s2) -> concat skip -> conv stack as in the
// mirrored encoder stage -> max pool (k3, s1, p1) -> MaxViT block; final 1x1
// conv ("head") to class logits.
template <typename T>
class NucleiHVTDecoder : public Decoder<T> {
 public:
  NucleiHVTDecoder(const ModelConfig& cfg, Rng& rng);
  Tensor<T> forward(const EncoderOutput<T>& features, ForwardTrace* trace) override;

  Conv2d<T>& head() override { return *head_; }

 private:
  struct Stage {
    ConvTranspose2d<T>* up;
    ConvStack<T>* convs;
    MaxViTBlock<T>* maxvit;  // null when the mirrored stage has none
  };
  std::vector<Stage> stages_;  // D3 first
  Conv2d<T>* head_;
};

// Transposed conv -> concat skip -> MaxViT block whose MBConv maps 2c -> c.
template <typename T>
class MaxViTUNetDecoder : public Decoder<T> {
 public:
  MaxViTUNetDecoder(const ModelConfig& cfg, Rng& rng);
  Tensor<T> forward(const EncoderOutput<T>& features, ForwardTrace* trace) override;
  Conv2d<T>& head() override { return *head_; }

 private:
  std::vector<std::pair<ConvTranspose2d<T>*, MaxViTBlock<T>*>> stages_;
  Conv2d<T>* head_;
};

// Pyramid pooling on the bottleneck plus a feature pyramid over the skips,
// fused at full resolution by 1x1 convs.
template <typename T>
class UperNetDecoder : public Decoder<T> {
 public:
  UperNetDecoder(const ModelConfig& cfg, Rng& rng);
  Tensor<T> forward(const EncoderOutput<T>& features, ForwardTrace* trace) override;
  Conv2d<T>& head() override { return *head_; }

 private:
  std::vector<int> pool_scales_;
  std::vector<Conv2d<T>*> pool_convs_;
  ConvBnMish<T>* bottleneck_;
  std::vector<ConvBnMish<T>*> laterals_;  // stages 0..3
  std::vector<ConvBnMish<T>*> smooth_;    // stages 0..3
  ConvBnMish<T>* fuse_;
  Conv2d<T>* head_;
};

// concat -> 1x1 reduce -> BN -> Mish = r -> block then grid attention -> + r.
template <typename T>
class CBFusion : public Module<T> {
 public:
  CBFusion(std::int64_t channels, const ModelConfig& cfg, Rng& rng);
  Tensor<T> forward(const Tensor<T>& a, const Tensor<T>& b);

  Conv2d<T>& reduce;

 private:
  BatchNorm2d<T>& norm_;
  AttentionSublayer<T>& block_;
  AttentionSublayer<T>& grid_;
  int window_;
};

template <typename T>
class SegmentationModel : public Module<T> {
 public:
  virtual Tensor<T> forward(const Tensor<T>& image, ForwardTrace* trace = nullptr) = 0;
  virtual const ModelConfig& config() const = 0;
  // Final 1x1 classifier of the decoder.
  virtual Conv2d<T>& head() = 0;
};

// Parameters under "enc." and "dec.".
template <typename T>
class NucleiHVT : public SegmentationModel<T> {
 public:
  explicit NucleiHVT(const ModelConfig& cfg);
  Tensor<T> forward(const Tensor<T>& image, ForwardTrace* trace = nullptr) override;
  const ModelConfig& config() const override { return cfg_; }
  Conv2d<T>& head() override;

  NucleiHVTEncoder<T>& encoder;
  Decoder<T>& decoder;

 private:
  NucleiHVT(const ModelConfig& cfg, Rng&& rng);
  ModelConfig cfg_;
};

// Parameters under "enc_a." (NucleiHVT encoder), "enc_b." (MaxViT encoder),
// "fuse.s0." .. "fuse.s4." and "dec.".
template <typename T>
class CBNucleiHVT : public SegmentationModel<T> {
 public:
  explicit CBNucleiHVT(const ModelConfig& cfg);
  Tensor<T> forward(const Tensor<T>& image, ForwardTrace* trace = nullptr) override;
  const ModelConfig& config() const override { return cfg_; }
  Conv2d<T>& head() override;

  NucleiHVTEncoder<T>& encoder_a;
  MaxViTEncoder<T>& encoder_b;
  ModuleList<T>& fuse;
  std::vector<CBFusion<T>*> fusions;
  Decoder<T>& decoder;

 private:
  CBNucleiHVT(const ModelConfig& cfg, Rng&& rng);
  ModelConfig cfg_;
};

template <typename T>
std::unique_ptr<SegmentationModel<T>> build_model(const ModelConfig& cfg);

// Trainable parameter elements (running statistics excluded).
std::int64_t param_count(const ModelConfig& cfg);
// Multiply-adds x 2 over convolutions, matmuls and linear layers for one
// inference-mode forward pass.
std::int64_t flop_estimate(const ModelConfig& cfg, const Shape& input_nchw);

}  // namespace nhvt
