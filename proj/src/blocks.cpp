#include "nhvt/blocks.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "ops_common.hpp"

namespace nhvt {

void AttentionConfig::validate() const {
  if (dim < 1) throw std::invalid_argument("attention dim must be >= 1");
  if (heads < 1 || dim % heads != 0) {
    throw std::invalid_argument("attention dim " + std::to_string(dim) + " not divisible by heads " +
                                std::to_string(heads));
  }
  if (window < 1) throw std::invalid_argument("attention window must be >= 1");
}

int AttentionConfig::default_heads(std::int64_t dim) {
  int heads = static_cast<int>(std::max<std::int64_t>(1, dim / 32));
  while (dim % heads != 0) --heads;
  return heads;
}

AttentionConfig AttentionConfig::for_dim(std::int64_t dim, int window, bool use_rel_bias) {
  return {dim, default_heads(dim), window, use_rel_bias};
}

namespace {

void check_windows(const Shape& s, int window, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected NCHW input, got " + to_string(s));
  if (window < 1) throw ShapeError(std::string(op) + ": window must be >= 1");
  if (s[2] % window != 0 || s[3] % window != 0) {
    throw ShapeError(std::string(op) + ": spatial extents " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                     " not divisible by window " + std::to_string(window));
  }
}

}  // namespace

template <typename T>
Tensor<T> block_partition(const Tensor<T>& x, int p) {
  check_windows(x.shape(), p, "block_partition");
  const std::int64_t n = x.dim(0), c = x.dim(1), nh = x.dim(2) / p, nw = x.dim(3) / p;
  Tensor<T> r = reshape(x, {n, c, nh, p, nw, p});
  return reshape(permute(r, {0, 2, 4, 3, 5, 1}), {n * nh * nw, std::int64_t{p} * p, c});
}

template <typename T>
Tensor<T> block_unpartition(const Tensor<T>& tokens, const Shape& s, int p) {
  check_windows(s, p, "block_unpartition");
  const std::int64_t n = s[0], c = s[1], nh = s[2] / p, nw = s[3] / p;
  Tensor<T> r = reshape(tokens, {n, nh, nw, p, p, c});
  return reshape(permute(r, {0, 5, 1, 3, 2, 4}), s);
}

template <typename T>
Tensor<T> grid_partition(const Tensor<T>& x, int p) {
  check_windows(x.shape(), p, "grid_partition");
  const std::int64_t n = x.dim(0), c = x.dim(1), gh = x.dim(2) / p, gw = x.dim(3) / p;
  Tensor<T> r = reshape(x, {n, c, p, gh, p, gw});
  return reshape(permute(r, {0, 3, 5, 2, 4, 1}), {n * gh * gw, std::int64_t{p} * p, c});
}

template <typename T>
Tensor<T> grid_unpartition(const Tensor<T>& tokens, const Shape& s, int p) {
  check_windows(s, p, "grid_unpartition");
  const std::int64_t n = s[0], c = s[1], gh = s[2] / p, gw = s[3] / p;
  Tensor<T> r = reshape(tokens, {n, gh, gw, p, p, c});
  return reshape(permute(r, {0, 5, 3, 1, 4, 2}), s);
}

// ---- attention ----

template <typename T>
WindowAttention<T>::WindowAttention(const AttentionConfig& cfg, Rng& rng)
    : qkv((cfg.validate(), this->register_module("qkv", std::make_unique<Linear<T>>(cfg.dim, 3 * cfg.dim, false, rng)))),
      proj(this->register_module("proj", std::make_unique<Linear<T>>(cfg.dim, cfg.dim, true, rng))),
      cfg_(cfg) {
  q_bias = this->register_parameter("q_bias", Tensor<T>({cfg.dim}, T(0)));
  v_bias = this->register_parameter("v_bias", Tensor<T>({cfg.dim}, T(0)));
  if (cfg.use_rel_bias) {
    const std::int64_t p = cfg.window, span = 2 * p - 1;
    Tensor<T> table({cfg.heads, span * span});
    for (auto& v : table.data()) v = static_cast<T>(rng.trunc_normal(0.02));
    rel_bias = this->register_parameter("rel_bias", table);
    const std::int64_t len = p * p;
    rel_index_.reserve(static_cast<std::size_t>(cfg.heads * len * len));
    for (std::int64_t h = 0; h < cfg.heads; ++h) {
      for (std::int64_t i = 0; i < len; ++i) {
        for (std::int64_t j = 0; j < len; ++j) {
          const std::int64_t dy = i / p - j / p + p - 1, dx = i % p - j % p + p - 1;
          rel_index_.push_back(h * span * span + dy * span + dx);
        }
      }
    }
  }
}

template <typename T>
Tensor<T> WindowAttention<T>::forward(const Tensor<T>& tokens, Tensor<T>* probs) const {
  if (tokens.ndim() != 3 || tokens.dim(2) != cfg_.dim) {
    throw ShapeError("window_attention: expected (windows, tokens, " + std::to_string(cfg_.dim) + "), got " +
                     to_string(tokens.shape()));
  }
  const std::int64_t b = tokens.dim(0), len = tokens.dim(1), c = cfg_.dim, h = cfg_.heads, d = cfg_.head_dim();
  if (cfg_.use_rel_bias && len != std::int64_t{cfg_.window} * cfg_.window) {
    throw ShapeError("window_attention: relative bias needs " + std::to_string(cfg_.window * cfg_.window) +
                     " tokens per window, got " + std::to_string(len));
  }
  const Tensor<T> bias = concat<T>({q_bias, Tensor<T>({c}, T(0)), v_bias}, 0);
  Tensor<T> packed = permute(reshape(linear(tokens, qkv.weight, bias), {b, len, 3, h, d}), {2, 0, 3, 1, 4});
  auto part = [&](int i) { return reshape(slice(packed, 0, i, 1), {b, h, len, d}); };
  Tensor<T> q = scale(part(0), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  Tensor<T> k = part(1);
  Tensor<T> v = part(2);
  Tensor<T> scores = matmul(q, transpose(k, 2, 3));
  if (cfg_.use_rel_bias) scores = add(scores, take(rel_bias, rel_index_, {h, len, len}));
  Tensor<T> attn = softmax(scores, -1);
  if (probs != nullptr) *probs = attn;
  Tensor<T> out = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {b, len, c});
  return proj.forward(out);
}

// ---- MBConv ----

namespace {
std::int64_t scaled(std::int64_t c, double ratio) {
  return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(static_cast<double>(c) * ratio)));
}
}  // namespace

template <typename T>
MBConv<T>::MBConv(std::int64_t in, std::int64_t out, int stride, const MBConvOptions& o, Rng& rng)
    : pre_norm(this->register_module("pre_norm", std::make_unique<BatchNorm2d<T>>(in))),
      expand(this->register_module(
          "expand", std::make_unique<Conv2d<T>>(in, scaled(out, o.expansion), 1, Conv2dOptions{}, false, rng))),
      depthwise(this->register_module(
          "depthwise", std::make_unique<Conv2d<T>>(
                           scaled(out, o.expansion), scaled(out, o.expansion), 3,
                           Conv2dOptions{.stride = stride, .padding = 1, .groups = static_cast<int>(scaled(out, o.expansion))},
                           false, rng))),
      norm(this->register_module("norm", std::make_unique<BatchNorm2d<T>>(scaled(out, o.expansion)))),
      se_reduce(this->register_module(
          "se_reduce", std::make_unique<Conv2d<T>>(scaled(out, o.expansion), scaled(in, o.se_ratio), 1, Conv2dOptions{},
                                                   true, rng))),
      se_expand(this->register_module(
          "se_expand", std::make_unique<Conv2d<T>>(scaled(in, o.se_ratio), scaled(out, o.expansion), 1, Conv2dOptions{},
                                                   true, rng))),
      project(this->register_module(
          "project", std::make_unique<Conv2d<T>>(scaled(out, o.expansion), out, 1, Conv2dOptions{}, true, rng))),
      residual_(stride == 1 && in == out) {
  if (stride != 1 && stride != 2) throw std::invalid_argument("MBConv stride must be 1 or 2");
}

template <typename T>
Tensor<T> MBConv<T>::forward(const Tensor<T>& x) {
  Tensor<T> h = gelu(expand.forward(pre_norm.forward(x)));
  h = gelu(norm.forward(depthwise.forward(h)));
  Tensor<T> gate = mean(h, {2, 3}, true);
  gate = sigmoid(se_expand.forward(gelu(se_reduce.forward(gate))));
  h = project.forward(mul(h, gate));
  return residual_ ? add(x, h) : h;
}

// ---- attention sublayer / MaxViT ----

template <typename T>
AttentionSublayer<T>::AttentionSublayer(const AttentionConfig& cfg, PartitionKind kind, Rng& rng, int ffn_ratio)
    : norm1(this->register_module("norm1", std::make_unique<LayerNorm<T>>(cfg.dim))),
      attn(this->register_module("attn", std::make_unique<WindowAttention<T>>(cfg, rng))),
      norm2(this->register_module("norm2", std::make_unique<LayerNorm<T>>(cfg.dim))),
      ffn1(this->register_module("ffn1", std::make_unique<Linear<T>>(cfg.dim, ffn_ratio * cfg.dim, true, rng))),
      ffn2(this->register_module("ffn2", std::make_unique<Linear<T>>(ffn_ratio * cfg.dim, cfg.dim, true, rng))),
      kind_(kind) {}

template <typename T>
Tensor<T> AttentionSublayer<T>::forward(const Tensor<T>& x, Tensor<T>* probs) {
  const int p = attn.config().window;
  Tensor<T> t = kind_ == PartitionKind::kBlock ? block_partition(x, p) : grid_partition(x, p);
  t = add(t, attn.forward(norm1.forward(t), probs));
  t = add(t, ffn2.forward(gelu(ffn1.forward(norm2.forward(t)))));
  return kind_ == PartitionKind::kBlock ? block_unpartition(t, x.shape(), p) : grid_unpartition(t, x.shape(), p);
}

template <typename T>
Tensor<T> multi_axis_attention(AttentionSublayer<T>& block, AttentionSublayer<T>& grid, const Tensor<T>& x,
                               int window) {
  const std::int64_t h = x.dim(2), w = x.dim(3);
  const std::int64_t ph = (window - h % window) % window, pw = (window - w % window) % window;
  Tensor<T> y = pad_bottom_right(x, ph, pw);
  y = grid.forward(block.forward(y));
  return crop_top_left(y, h, w);
}

template <typename T>
MaxViTBlock<T>::MaxViTBlock(std::int64_t in, std::int64_t out, int stride, const MaxViTOptions& o, Rng& rng)
    : window_(o.window) {
  if (o.depth < 1) throw std::invalid_argument("MaxViT depth must be >= 1");
  const AttentionConfig cfg = AttentionConfig::for_dim(out, o.window, o.use_rel_bias);
  for (int i = 0; i < o.depth; ++i) {
    const std::string p = std::to_string(i) + ".";
    Layer layer;
    layer.mbconv = &this->register_module(
        p + "mbconv", std::make_unique<MBConv<T>>(i == 0 ? in : out, out, i == 0 ? stride : 1, o.mbconv, rng));
    layer.block = &this->register_module(p + "block_attn",
                                         std::make_unique<AttentionSublayer<T>>(cfg, PartitionKind::kBlock, rng));
    layer.grid = &this->register_module(p + "grid_attn",
                                        std::make_unique<AttentionSublayer<T>>(cfg, PartitionKind::kGrid, rng));
    layers_.push_back(layer);
  }
}

template <typename T>
Tensor<T> MaxViTBlock<T>::forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& layer : layers_) {
    y = layer.mbconv->forward(y);
    y = multi_axis_attention(*layer.block, *layer.grid, y, window_);
  }
  return y;
}

#define NHVT_BLOCKS(T)                                                                                       \
  template Tensor<T> block_partition<T>(const Tensor<T>&, int);                                              \
  template Tensor<T> block_unpartition<T>(const Tensor<T>&, const Shape&, int);                              \
  template Tensor<T> grid_partition<T>(const Tensor<T>&, int);                                               \
  template Tensor<T> grid_unpartition<T>(const Tensor<T>&, const Shape&, int);                               \
  template Tensor<T> multi_axis_attention<T>(AttentionSublayer<T>&, AttentionSublayer<T>&, const Tensor<T>&, \
                                             int);                                                           \
  template class WindowAttention<T>;                                                                         \
  template class MBConv<T>;                                                                                  \
  template class AttentionSublayer<T>;                                                                       \
  template class MaxViTBlock<T>;
NHVT_INSTANTIATE(NHVT_BLOCKS)

}  // namespace nhvt
