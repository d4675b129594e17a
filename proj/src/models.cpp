#include "nhvt/models.hpp"

#include <sstream>

#include "ops_common.hpp"

namespace nhvt {

std::string to_string(Variant v) { return v == Variant::kNucleiHVT ? "nucleihvt" : "cb_nucleihvt"; }

std::string to_string(DecoderKind d) {
  switch (d) {
    case DecoderKind::kNucleiHVT: return "nucleihvt";
    case DecoderKind::kMaxViTUNet: return "maxvit_unet";
    case DecoderKind::kUperNet: return "upernet";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "nucleihvt") return Variant::kNucleiHVT;
  if (s == "cb_nucleihvt") return Variant::kCBNucleiHVT;
  throw ConfigError("unknown variant '" + s + "' (expected nucleihvt or cb_nucleihvt)");
}

DecoderKind parse_decoder(const std::string& s) {
  if (s == "nucleihvt") return DecoderKind::kNucleiHVT;
  if (s == "maxvit_unet") return DecoderKind::kMaxViTUNet;
  if (s == "upernet") return DecoderKind::kUperNet;
  throw ConfigError("unknown decoder '" + s + "' (expected nucleihvt, maxvit_unet or upernet)");
}

// ---- config ----

std::vector<StageSpec> ModelConfig::resolved_stages() const {
  if (!stages.empty()) return stages;
  std::vector<StageSpec> out;
  for (int i = 0; i < 5; ++i) {
    StageSpec s;
    s.index = i;
    s.channels = base_channels << i;
    s.conv_kernels = i == 0 ? std::vector<int>{3, 3} : std::vector<int>{1, 3};
    s.dilation = (i == 2 || i == 4) ? 2 : 1;
    s.has_maxvit = i > 0;
    s.downsample = i > 0;
    out.push_back(s);
  }
  return out;
}

void ModelConfig::validate() const {
  std::vector<std::string> errors;
  if (in_channels < 1) errors.push_back("in_channels must be >= 1");
  if (num_classes < 2) errors.push_back("num_classes must be >= 2 (got " + std::to_string(num_classes) + ")");
  if (base_channels < 1) errors.push_back("base_channels must be >= 1");
  if (window < 1) errors.push_back("window must be >= 1");
  if (maxvit_depth < 1) errors.push_back("maxvit_depth must be >= 1");
  if (!(mbconv_expansion > 0)) errors.push_back("mbconv_expansion must be > 0");
  if (!(se_ratio > 0)) errors.push_back("se_ratio must be > 0");
  if (base_channels >= 1) {
    const auto st = resolved_stages();
    if (st.size() != 5) errors.push_back("expected 5 stages (S0..S4), got " + std::to_string(st.size()));
    for (std::size_t i = 0; i < st.size(); ++i) {
      const StageSpec& s = st[i];
      const std::string tag = "stage " + std::to_string(i) + ": ";
      if (s.index != static_cast<int>(i)) errors.push_back(tag + "index must equal position");
      if (s.channels < 1) errors.push_back(tag + "channels must be >= 1");
      if (i > 0 && s.channels < st[i - 1].channels) errors.push_back(tag + "channels decrease with stage index");
      if (s.dilation != 1 && s.dilation != 2) errors.push_back(tag + "dilation must be 1 or 2");
      if (s.dilation == 2 && i != 2 && i != 4) errors.push_back(tag + "dilation 2 only permitted at stages 2 and 4");
      if (s.conv_kernels.empty()) errors.push_back(tag + "needs at least one conv layer");
      for (int k : s.conv_kernels) {
        if (k != 1 && k != 3) errors.push_back(tag + "conv kernels must be 1 or 3");
      }
      if (i == 0 && s.downsample) errors.push_back(tag + "stage 0 runs at full resolution (downsample must be false)");
    }
  }
  if (!errors.empty()) {
    std::ostringstream msg;
    msg << "invalid model config:";
    for (const auto& e : errors) msg << "\n  - " << e;
    throw ConfigError(msg.str());
  }
}

MaxViTOptions ModelConfig::maxvit_options() const {
  MaxViTOptions o;
  o.window = window;
  o.depth = maxvit_depth;
  o.use_rel_bias = use_rel_bias;
  o.mbconv.expansion = mbconv_expansion;
  o.mbconv.se_ratio = se_ratio;
  return o;
}

ModelConfig ModelConfig::toy(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.base_channels = 8;
  return c;
}

ModelConfig ModelConfig::paper_scale(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.base_channels = 32;
  return c;
}

void check_input_shape(const ModelConfig& cfg, const Shape& s) {
  if (s.size() != 4) throw ShapeError("model input must be NCHW, got " + to_string(s));
  if (s[1] != cfg.in_channels) {
    throw ShapeError("model expects " + std::to_string(cfg.in_channels) + " input channels, got " + to_string(s));
  }
  std::int64_t multiple = 1;
  for (const auto& st : cfg.resolved_stages()) {
    if (st.downsample) multiple *= 2;
  }
  const std::int64_t minimum = std::max(kMinInputSide, multiple);
  if (s[2] < minimum || s[3] < minimum) {
    throw ShapeError("input " + to_string(s) + " too small: height and width must be at least " +
                     std::to_string(minimum));
  }
  if (s[2] % multiple != 0 || s[3] % multiple != 0) {
    throw ShapeError("input " + to_string(s) + ": height and width must be multiples of " + std::to_string(multiple));
  }
}

namespace {

const ModelConfig& validated(const ModelConfig& cfg) {
  cfg.validate();
  return cfg;
}

void require_same_extent(const Shape& got, const Shape& want, const std::string& where) {
  if (got[2] != want[2] || got[3] != want[3]) {
    throw ShapeError(where + ": resolution " + to_string(got) + " does not match skip " + to_string(want));
  }
}

}  // namespace

// ---- conv stack ----

template <typename T>
ConvStack<T>::ConvStack(std::int64_t in, std::int64_t out, const std::vector<int>& kernels, int dilation,
                        bool residual, Rng& rng)
    : residual_(residual) {
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    const int k = kernels[i];
    convs_.push_back(&this->register_module(
        "conv" + std::to_string(i),
        std::make_unique<ConvBnMish<T>>(i == 0 ? in : out, out, k, k > 1 ? dilation : 1, rng)));
  }
  if (residual && in != out) {
    shortcut_ = &this->register_module("shortcut",
                                       std::make_unique<Conv2d<T>>(in, out, 1, Conv2dOptions{}, true, rng));
  }
}

template <typename T>
Tensor<T> ConvStack<T>::forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto* c : convs_) y = c->forward(y);
  if (!residual_) return y;
  return add(y, shortcut_ != nullptr ? shortcut_->forward(x) : x);
}

// ---- encoders ----

template <typename T>
NucleiHVTEncoder<T>::NucleiHVTEncoder(const ModelConfig& cfg, Rng& rng) : cfg_(validated(cfg)) {
  const auto specs = cfg.resolved_stages();
  std::int64_t prev = cfg.in_channels;
  for (const auto& s : specs) {
    const std::string name = "s" + std::to_string(s.index);
    Stage st;
    st.convs = &this->register_module(
        name + ".convs", std::make_unique<ConvStack<T>>(prev, s.channels, s.conv_kernels, s.dilation, s.index > 0, rng));
    if (s.has_maxvit) {
      st.maxvit = &this->register_module(
          name + ".maxvit", std::make_unique<MaxViTBlock<T>>(s.channels, s.channels, 1, cfg.maxvit_options(), rng));
    }
    st.downsample = s.downsample;
    stages_.push_back(st);
    prev = s.channels;
  }
}

template <typename T>
EncoderOutput<T> NucleiHVTEncoder<T>::forward(const Tensor<T>& x) {
  check_input_shape(cfg_, x.shape());
  EncoderOutput<T> out;
  Tensor<T> y = x;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    auto& st = stages_[i];
    y = st.convs->forward(y);
    if (st.downsample) y = maxpool2d(y, 2, 2, 0);
    if (st.maxvit != nullptr) y = st.maxvit->forward(y);
    if (i + 1 < stages_.size()) out.skips.push_back(y);
  }
  out.bottleneck = y;
  return out;
}

template <typename T>
MaxViTEncoder<T>::MaxViTEncoder(const ModelConfig& cfg, Rng& rng)
    : stem_(this->register_module(
          "stem", std::make_unique<ConvStack<T>>(cfg.in_channels, validated(cfg).resolved_stages()[0].channels,
                                                 std::vector<int>{3, 3}, 1, false, rng))),
      cfg_(cfg) {
  const auto specs = cfg.resolved_stages();
  for (std::size_t i = 1; i < specs.size(); ++i) {
    stages_.push_back(&this->register_module(
        "s" + std::to_string(i),
        std::make_unique<MaxViTBlock<T>>(specs[i - 1].channels, specs[i].channels, specs[i].downsample ? 2 : 1,
                                         cfg.maxvit_options(), rng)));
  }
}

template <typename T>
EncoderOutput<T> MaxViTEncoder<T>::forward(const Tensor<T>& x) {
  check_input_shape(cfg_, x.shape());
  EncoderOutput<T> out;
  Tensor<T> y = stem_.forward(x);
  for (auto* stage : stages_) {
    out.skips.push_back(y);
    y = stage->forward(y);
  }
  out.bottleneck = y;
  return out;
}

// ---- decoders ----

namespace {

template <typename T>
void check_features(const EncoderOutput<T>& f, std::size_t stages) {
  if (f.skips.size() + 1 != stages || !f.bottleneck.defined()) {
    throw ShapeError("decoder expects " + std::to_string(stages - 1) + " skips and a bottleneck, got " +
                     std::to_string(f.skips.size()) + " skips");
  }
}

}  // namespace

template <typename T>
NucleiHVTDecoder<T>::NucleiHVTDecoder(const ModelConfig& cfg, Rng& rng) {
  const auto specs = validated(cfg).resolved_stages();
  for (int i = static_cast<int>(specs.size()) - 2; i >= 0; --i) {
    const StageSpec& below = specs[i + 1];
    const std::int64_t c = specs[i].channels;
    const std::string name = "d" + std::to_string(i);
    const int k = below.downsample ? 2 : 1;
    Stage st;
    st.up = &this->register_module(name + ".up",
                                   std::make_unique<ConvTranspose2d<T>>(below.channels, c, k, k, true, rng));
    // Same conv kinds as the encoder stage that produced the upsampled map;
    // no dilation on the decoder side.
    st.convs = &this->register_module(name + ".convs",
                                      std::make_unique<ConvStack<T>>(2 * c, c, below.conv_kernels, 1, true, rng));
    st.maxvit = below.has_maxvit ? &this->register_module(name + ".maxvit", std::make_unique<MaxViTBlock<T>>(
                                                                                c, c, 1, cfg.maxvit_options(), rng))
                                 : nullptr;
    stages_.push_back(st);
  }
  head_ = &this->register_module(
      "head", std::make_unique<Conv2d<T>>(specs[0].channels, cfg.num_classes, 1, Conv2dOptions{}, true, rng));
}

template <typename T>
Tensor<T> NucleiHVTDecoder<T>::forward(const EncoderOutput<T>& f, ForwardTrace* trace) {
  check_features(f, stages_.size() + 1);
  Tensor<T> y = f.bottleneck;
  for (std::size_t j = 0; j < stages_.size(); ++j) {
    const std::size_t i = stages_.size() - 1 - j;
    const Tensor<T>& skip = f.skips[i];
    y = stages_[j].up->forward(y);
    require_same_extent(y.shape(), skip.shape(), "decoder stage D" + std::to_string(i));
    y = stages_[j].convs->forward(concat<T>({y, skip}, 1));
    y = maxpool2d(y, 3, 1, 1);
    if (stages_[j].maxvit != nullptr) y = stages_[j].maxvit->forward(y);
    if (trace != nullptr) trace->decoder_stages.push_back(y.shape());
  }
  return head_->forward(y);
}

template <typename T>
MaxViTUNetDecoder<T>::MaxViTUNetDecoder(const ModelConfig& cfg, Rng& rng) {
  const auto specs = validated(cfg).resolved_stages();
  for (int i = static_cast<int>(specs.size()) - 2; i >= 0; --i) {
    const StageSpec& below = specs[i + 1];
    const std::int64_t c = specs[i].channels;
    const std::string name = "d" + std::to_string(i);
    const int k = below.downsample ? 2 : 1;
    // No bias: the MaxViT block starts with a batch norm.
    auto* up = &this->register_module(name + ".up",
                                      std::make_unique<ConvTranspose2d<T>>(below.channels, c, k, k, false, rng));
    auto* block = &this->register_module(
        name + ".maxvit", std::make_unique<MaxViTBlock<T>>(2 * c, c, 1, cfg.maxvit_options(), rng));
    stages_.emplace_back(up, block);
  }
  head_ = &this->register_module(
      "head", std::make_unique<Conv2d<T>>(specs[0].channels, cfg.num_classes, 1, Conv2dOptions{}, true, rng));
}

template <typename T>
Tensor<T> MaxViTUNetDecoder<T>::forward(const EncoderOutput<T>& f, ForwardTrace* trace) {
  check_features(f, stages_.size() + 1);
  Tensor<T> y = f.bottleneck;
  for (std::size_t j = 0; j < stages_.size(); ++j) {
    const std::size_t i = stages_.size() - 1 - j;
    const Tensor<T>& skip = f.skips[i];
    y = stages_[j].first->forward(y);
    require_same_extent(y.shape(), skip.shape(), "decoder stage D" + std::to_string(i));
    y = stages_[j].second->forward(concat<T>({y, skip}, 1));
    if (trace != nullptr) trace->decoder_stages.push_back(y.shape());
  }
  return head_->forward(y);
}

template <typename T>
UperNetDecoder<T>::UperNetDecoder(const ModelConfig& cfg, Rng& rng) : pool_scales_{1, 2} {
  const auto specs = validated(cfg).resolved_stages();
  const std::int64_t d = specs[1].channels;
  const std::int64_t deepest = specs.back().channels;
  for (int s : pool_scales_) {
    pool_convs_.push_back(&this->register_module(
        "ppm.pool" + std::to_string(s), std::make_unique<Conv2d<T>>(deepest, d, 1, Conv2dOptions{}, true, rng)));
  }
  bottleneck_ = &this->register_module(
      "ppm.fuse",
      std::make_unique<ConvBnMish<T>>(deepest + d * static_cast<std::int64_t>(pool_scales_.size()), d, 3, 1, rng));
  for (std::size_t i = 0; i + 1 < specs.size(); ++i) {
    laterals_.push_back(&this->register_module("lateral" + std::to_string(i),
                                               std::make_unique<ConvBnMish<T>>(specs[i].channels, d, 1, 1, rng)));
    smooth_.push_back(
        &this->register_module("fpn" + std::to_string(i), std::make_unique<ConvBnMish<T>>(d, d, 3, 1, rng)));
  }
  fuse_ = &this->register_module(
      "fuse", std::make_unique<ConvBnMish<T>>(d * static_cast<std::int64_t>(specs.size()), d, 1, 1, rng));
  head_ = &this->register_module("head",
                                 std::make_unique<Conv2d<T>>(d, cfg.num_classes, 1, Conv2dOptions{}, true, rng));
}

template <typename T>
Tensor<T> UperNetDecoder<T>::forward(const EncoderOutput<T>& f, ForwardTrace* trace) {
  check_features(f, laterals_.size() + 1);
  const Tensor<T>& deep = f.bottleneck;
  const std::int64_t bh = deep.dim(2), bw = deep.dim(3);
  std::vector<Tensor<T>> pyramid{deep};
  for (std::size_t k = 0; k < pool_scales_.size(); ++k) {
    Tensor<T> p = adaptive_avgpool2d(deep, pool_scales_[k], pool_scales_[k]);
    p = mish(pool_convs_[k]->forward(p));
    pyramid.push_back(resize_nearest(p, bh, bw));
  }
  Tensor<T> top = bottleneck_->forward(concat(pyramid, 1));

  const std::size_t n = laterals_.size();
  const std::int64_t full_h = f.skips[0].dim(2), full_w = f.skips[0].dim(3);
  std::vector<Tensor<T>> levels(n + 1);
  levels[n] = resize_nearest(top, full_h, full_w);
  Tensor<T> path = top;
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t i = n - 1 - j;
    const Tensor<T>& skip = f.skips[i];
    path = add(laterals_[i]->forward(skip), resize_nearest(path, skip.dim(2), skip.dim(3)));
    Tensor<T> level = smooth_[i]->forward(path);
    require_same_extent(level.shape(), skip.shape(), "decoder stage D" + std::to_string(i));
    if (trace != nullptr) trace->decoder_stages.push_back(level.shape());
    levels[i] = resize_nearest(level, full_h, full_w);
  }
  return head_->forward(fuse_->forward(concat(levels, 1)));
}

namespace {

template <typename T>
std::unique_ptr<Decoder<T>> make_decoder(const ModelConfig& cfg, Rng& rng) {
  switch (cfg.decoder) {
    case DecoderKind::kNucleiHVT: return std::make_unique<NucleiHVTDecoder<T>>(cfg, rng);
    case DecoderKind::kMaxViTUNet: return std::make_unique<MaxViTUNetDecoder<T>>(cfg, rng);
    case DecoderKind::kUperNet: return std::make_unique<UperNetDecoder<T>>(cfg, rng);
  }
  throw ConfigError("unknown decoder kind");
}

void record(ForwardTrace* trace, const std::vector<Shape>& skips, const Shape& bottleneck) {
  if (trace == nullptr) return;
  trace->skips = skips;
  trace->bottleneck = bottleneck;
  trace->decoder_stages.clear();
}

template <typename T>
std::vector<Shape> shapes_of(const std::vector<Tensor<T>>& ts) {
  std::vector<Shape> out;
  for (const auto& t : ts) out.push_back(t.shape());
  return out;
}

}  // namespace

// ---- CB-Fusion ----

template <typename T>
CBFusion<T>::CBFusion(std::int64_t channels, const ModelConfig& cfg, Rng& rng)
    : reduce(this->register_module("reduce",
                                   std::make_unique<Conv2d<T>>(2 * channels, channels, 1, Conv2dOptions{}, false, rng))),
      norm_(this->register_module("norm", std::make_unique<BatchNorm2d<T>>(channels))),
      block_(this->register_module(
          "block_attn", std::make_unique<AttentionSublayer<T>>(
                            AttentionConfig::for_dim(channels, cfg.window, cfg.use_rel_bias), PartitionKind::kBlock, rng))),
      grid_(this->register_module(
          "grid_attn", std::make_unique<AttentionSublayer<T>>(
                           AttentionConfig::for_dim(channels, cfg.window, cfg.use_rel_bias), PartitionKind::kGrid, rng))),
      window_(cfg.window) {}

template <typename T>
Tensor<T> CBFusion<T>::forward(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("CB-Fusion inputs differ in shape: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  if (a.ndim() != 4 || a.dim(1) * 2 != reduce.weight.dim(1)) {
    throw ShapeError("CB-Fusion expects (N, " + std::to_string(reduce.weight.dim(0)) + ", H, W) inputs, got " +
                     to_string(a.shape()));
  }
  Tensor<T> r = mish(norm_.forward(reduce.forward(concat<T>({a, b}, 1))));
  return add(multi_axis_attention(block_, grid_, r, window_), r);
}

// ---- networks ----

template <typename T>
NucleiHVT<T>::NucleiHVT(const ModelConfig& cfg) : NucleiHVT(validated(cfg), Rng(cfg.seed)) {}

template <typename T>
NucleiHVT<T>::NucleiHVT(const ModelConfig& cfg, Rng&& rng)
    : encoder(this->register_module("enc", std::make_unique<NucleiHVTEncoder<T>>(cfg, rng))),
      decoder(this->register_module("dec", make_decoder<T>(cfg, rng))),
      cfg_(cfg) {}

template <typename T>
Tensor<T> NucleiHVT<T>::forward(const Tensor<T>& image, ForwardTrace* trace) {
  EncoderOutput<T> f = encoder.forward(image);
  record(trace, shapes_of(f.skips), f.bottleneck.shape());
  Tensor<T> logits = decoder.forward(f, trace);
  if (trace != nullptr) trace->logits = logits.shape();
  return logits;
}

template <typename T>
Conv2d<T>& NucleiHVT<T>::head() {
  return decoder.head();
}

template <typename T>
CBNucleiHVT<T>::CBNucleiHVT(const ModelConfig& cfg) : CBNucleiHVT(validated(cfg), Rng(cfg.seed)) {}

template <typename T>
CBNucleiHVT<T>::CBNucleiHVT(const ModelConfig& cfg, Rng&& rng)
    : encoder_a(this->register_module("enc_a", std::make_unique<NucleiHVTEncoder<T>>(cfg, rng))),
      encoder_b(this->register_module("enc_b", std::make_unique<MaxViTEncoder<T>>(cfg, rng))),
      fuse(this->register_module("fuse", std::make_unique<ModuleList<T>>())),
      decoder(this->register_module("dec", make_decoder<T>(cfg, rng))),
      cfg_(cfg) {
  // Built after the decoder; construction order fixes the RNG stream.
  const auto specs = cfg.resolved_stages();
  for (const auto& s : specs) {
    fusions.push_back(&fuse.add("s" + std::to_string(s.index), std::make_unique<CBFusion<T>>(s.channels, cfg, rng)));
  }
}

template <typename T>
Tensor<T> CBNucleiHVT<T>::forward(const Tensor<T>& image, ForwardTrace* trace) {
  EncoderOutput<T> a = encoder_a.forward(image);
  EncoderOutput<T> b = encoder_b.forward(image);
  if (a.skips.size() != b.skips.size()) throw ShapeError("CB-NucleiHVT encoders differ in depth");
  EncoderOutput<T> fused;
  for (std::size_t i = 0; i < a.skips.size(); ++i) {
    if (a.skips[i].shape() != b.skips[i].shape()) {
      throw ShapeError("CB-NucleiHVT encoder width mismatch at stage " + std::to_string(i) + ": " +
                       to_string(a.skips[i].shape()) + " vs " + to_string(b.skips[i].shape()));
    }
    fused.skips.push_back(fusions[i]->forward(a.skips[i], b.skips[i]));
  }
  fused.bottleneck = fusions.back()->forward(a.bottleneck, b.bottleneck);
  record(trace, shapes_of(fused.skips), fused.bottleneck.shape());
  Tensor<T> logits = decoder.forward(fused, trace);
  if (trace != nullptr) trace->logits = logits.shape();
  return logits;
}

template <typename T>
Conv2d<T>& CBNucleiHVT<T>::head() {
  return decoder.head();
}

template <typename T>
std::unique_ptr<SegmentationModel<T>> build_model(const ModelConfig& cfg) {
  if (cfg.variant == Variant::kCBNucleiHVT) return std::make_unique<CBNucleiHVT<T>>(cfg);
  return std::make_unique<NucleiHVT<T>>(cfg);
}

std::int64_t param_count(const ModelConfig& cfg) {
  auto model = build_model<float>(cfg);
  std::int64_t total = 0;
  for (const auto& [name, t] : model->parameters()) total += t.numel();
  return total;
}

std::int64_t flop_estimate(const ModelConfig& cfg, const Shape& input_nchw) {
  auto model = build_model<float>(cfg);
  model->set_training(false);
  TapeScope<float> no_tape(nullptr);
  FlopCounter counter;
  model->forward(Tensor<float>(input_nchw));
  return counter.flops();
}

#define NHVT_MODELS(T)                                                                 \
  template class ConvStack<T>;                                                         \
  template class NucleiHVTEncoder<T>;                                                  \
  template class MaxViTEncoder<T>;                                                     \
  template class NucleiHVTDecoder<T>;                                                  \
  template class MaxViTUNetDecoder<T>;                                                 \
  template class UperNetDecoder<T>;                                                    \
  template class CBFusion<T>;                                                          \
  template class NucleiHVT<T>;                                                         \
  template class CBNucleiHVT<T>;                                                       \
  template std::unique_ptr<SegmentationModel<T>> build_model<T>(const ModelConfig&);
NHVT_INSTANTIATE(NHVT_MODELS)

}  // namespace nhvt
