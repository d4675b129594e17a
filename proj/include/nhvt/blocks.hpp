#pragma once

#include <cstdint>
#include <vector>

#include "nhvt/module.hpp"

namespace nhvt {

struct AttentionConfig {
  std::int64_t dim = 32;
  int heads = 1;
  int window = 8;
  bool use_rel_bias = true;

  std::int64_t head_dim() const { return dim / heads; }
  // Throws std::invalid_argument when heads does not divide dim or window < 1.
  void validate() const;
  // dim / 32, at least 1, lowered until it divides dim.
  static int default_heads(std::int64_t dim);
  static AttentionConfig for_dim(std::int64_t dim, int window, bool use_rel_bias = true);
};

// Non-overlapping P x P windows: (N, C, H, W) -> (N * H/P * W/P, P*P, C).
// Windows are ordered row-major over the window grid, tokens row-major inside.
template <typename T> Tensor<T> block_partition(const Tensor<T>& x, int window);
template <typename T> Tensor<T> block_unpartition(const Tensor<T>& tokens, const Shape& nchw, int window);

// Strided P x P sets: window (a, b) holds pixels (i * H/P + a, j * W/P + b)
// for i, j in [0, P). Same output layout as block_partition.
template <typename T> Tensor<T> grid_partition(const Tensor<T>& x, int window);
template <typename T> Tensor<T> grid_unpartition(const Tensor<T>& tokens, const Shape& nchw, int window);

// Multi-head self-attention inside each window of a (windows, tokens, dim)
// batch. Query and value projections carry a bias; the key bias is omitted
// because softmax cancels it.
template <typename T>
class WindowAttention : public Module<T> {
 public:
  WindowAttention(const AttentionConfig& cfg, Rng& rng);

  // `probs`, when given, receives the attention weights (windows, heads, L, L).
  Tensor<T> forward(const Tensor<T>& tokens, Tensor<T>* probs = nullptr) const;

  const AttentionConfig& config() const { return cfg_; }

  Linear<T>& qkv;
  Linear<T>& proj;
  Tensor<T> q_bias, v_bias;
  Tensor<T> rel_bias;  // (heads, (2P-1)^2), undefined when disabled

 private:
  AttentionConfig cfg_;
  std::vector<std::int64_t> rel_index_;
};

struct MBConvOptions {
  double expansion = 4.0;
  double se_ratio = 0.25;
};

// pre-BN -> 1x1 expand -> GELU -> depthwise 3x3 (stride) -> BN -> GELU ->
// squeeze-excitation -> 1x1 project, plus identity residual when
// stride == 1 and in == out.
template <typename T>
class MBConv : public Module<T> {
 public:
  MBConv(std::int64_t in, std::int64_t out, int stride, const MBConvOptions& options, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x);
  bool has_residual() const { return residual_; }

  BatchNorm2d<T>& pre_norm;
  Conv2d<T>& expand;
  Conv2d<T>& depthwise;
  BatchNorm2d<T>& norm;
  Conv2d<T>& se_reduce;
  Conv2d<T>& se_expand;
  Conv2d<T>& project;

 private:
  bool residual_;
};

enum class PartitionKind { kBlock, kGrid };

// Pre-norm transformer layer over block or grid windows of an NCHW map whose
// extents are multiples of the window: x + Attn(LN(x)), then x + FFN(LN(x)).
template <typename T>
class AttentionSublayer : public Module<T> {
 public:
  AttentionSublayer(const AttentionConfig& cfg, PartitionKind kind, Rng& rng, int ffn_ratio = 4);
  Tensor<T> forward(const Tensor<T>& x, Tensor<T>* probs = nullptr);

  LayerNorm<T>& norm1;
  WindowAttention<T>& attn;
  LayerNorm<T>& norm2;
  Linear<T>& ffn1;
  Linear<T>& ffn2;

 private:
  PartitionKind kind_;
};

struct MaxViTOptions {
  int window = 8;
  int depth = 1;
  bool use_rel_bias = true;
  MBConvOptions mbconv;
};

// MBConv -> block attention -> grid attention, repeated `depth` times. Maps
// are zero-padded bottom/right to a multiple of the window around the
// attention sublayers and cropped back.
template <typename T>
class MaxViTBlock : public Module<T> {
 public:
  MaxViTBlock(std::int64_t in, std::int64_t out, int stride, const MaxViTOptions& options, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x);

  struct Layer {
    MBConv<T>* mbconv;
    AttentionSublayer<T>* block;
    AttentionSublayer<T>* grid;
  };
  const std::vector<Layer>& layers() const { return layers_; }

 private:
  int window_;
  std::vector<Layer> layers_;
};

// Pads bottom/right so both extents are multiples of `window`, runs block
// then grid attention, and crops back.
template <typename T>
Tensor<T> multi_axis_attention(AttentionSublayer<T>& block, AttentionSublayer<T>& grid, const Tensor<T>& x,
                               int window);

}  // namespace nhvt
