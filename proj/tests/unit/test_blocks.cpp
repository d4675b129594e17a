#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nhvt/blocks.hpp"
#include "nhvt/gradcheck.hpp"

using namespace nhvt;

namespace {

Tensorf iota_tensor(const Shape& s) {
  Tensorf t(s);
  std::iota(t.data().begin(), t.data().end(), 0.f);
  return t;
}

void fill(Tensord t, double v) {
  for (auto& x : t.data()) x = v;
}

// Gradients are checked at a random point rather than at initialisation,
// where the small attention weights leave key-projection gradients near the
// finite-difference noise floor.
std::vector<Tensord> param_list(const Module<double>& m, std::uint64_t seed = 99) {
  std::vector<Tensord> out;
  for (auto& [name, t] : m.parameters()) {
    Tensord r = random_tensor(t.shape(), seed++, 0.5);
    std::copy(r.data().begin(), r.data().end(), Tensord(t).data().begin());
    out.push_back(t);
  }
  return out;
}

Tensord weighted(const Tensord& y, std::uint64_t seed) { return sum(mul(y, random_tensor(y.shape(), seed))); }

}  // namespace

TEST(Partition, BlockCountsAndRoundTrip) {
  Tensorf x = iota_tensor({2, 3, 16, 16});
  Tensorf t = block_partition(x, 8);
  EXPECT_EQ(t.shape(), (Shape{2 * 4, 64, 3}));
  Tensorf back = block_unpartition(t, x.shape(), 8);
  for (int64_t i = 0; i < x.numel(); ++i) ASSERT_EQ(back.data()[i], x.data()[i]);
}

TEST(Partition, BlockWindowContents) {
  Tensorf x = iota_tensor({1, 1, 16, 16});
  Tensorf t = block_partition(x, 8);
  // window 1 is the top-right block; token (r, c) is pixel (r, 8 + c).
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) EXPECT_EQ(t.data()[64 + r * 8 + c], static_cast<float>(r * 16 + 8 + c));
}

TEST(Partition, DegenerateWindowIsRowMajor) {
  Tensorf x = iota_tensor({1, 2, 4, 4});
  Tensorf b = block_partition(x, 4), g = grid_partition(x, 4);
  ASSERT_EQ(b.shape(), (Shape{1, 16, 2}));
  for (int tok = 0; tok < 16; ++tok)
    for (int c = 0; c < 2; ++c) EXPECT_EQ(b.data()[tok * 2 + c], static_cast<float>(c * 16 + tok));
  for (int64_t i = 0; i < b.numel(); ++i) EXPECT_EQ(b.data()[i], g.data()[i]);
}

TEST(Partition, GridGathersStridedPixels) {
  // Encode coordinates so every token reveals where it came from.
  Tensorf x({1, 1, 16, 16});
  for (int y = 0; y < 16; ++y)
    for (int c = 0; c < 16; ++c) x.data()[y * 16 + c] = static_cast<float>(y * 100 + c);
  Tensorf t = grid_partition(x, 8);
  ASSERT_EQ(t.shape(), (Shape{4, 64, 1}));
  for (int w = 0; w < 4; ++w) {
    const int a = w / 2, b = w % 2;
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j) {
        const float v = t.data()[w * 64 + i * 8 + j];
        const int y = static_cast<int>(v) / 100, c = static_cast<int>(v) % 100;
        EXPECT_EQ(y, i * 2 + a);
        EXPECT_EQ(c, j * 2 + b);
      }
    // positions inside a window differ by multiples of the stride 2
    for (int tok = 0; tok < 64; ++tok) {
      const int v = static_cast<int>(t.data()[w * 64 + tok]);
      EXPECT_EQ((v / 100 - a) % 2, 0);
      EXPECT_EQ((v % 100 - b) % 2, 0);
    }
  }
}

TEST(Partition, RoundTripsAndMultisetsAcrossShapes) {
  for (auto [h, w, p] : std::vector<std::tuple<int, int, int>>{{8, 8, 8}, {16, 24, 8}, {12, 6, 3}, {5, 5, 1}}) {
    Tensorf x = iota_tensor({2, 3, h, w});
    Tensorf b = block_partition(x, p), g = grid_partition(x, p);
    Tensorf rb = block_unpartition(b, x.shape(), p), rg = grid_unpartition(g, x.shape(), p);
    for (int64_t i = 0; i < x.numel(); ++i) {
      ASSERT_EQ(rb.data()[i], x.data()[i]);
      ASSERT_EQ(rg.data()[i], x.data()[i]);
    }
    std::vector<float> sb(b.data().begin(), b.data().end()), sg(g.data().begin(), g.data().end());
    std::sort(sb.begin(), sb.end());
    std::sort(sg.begin(), sg.end());
    EXPECT_EQ(sb, sg);
  }
  EXPECT_THROW(block_partition(Tensorf({1, 1, 10, 8}), 8), ShapeError);
  EXPECT_THROW(grid_partition(Tensorf({1, 1, 8, 10}), 8), ShapeError);
}

TEST(AttentionConfig, HeadsRule) {
  EXPECT_EQ(AttentionConfig::default_heads(8), 1);
  EXPECT_EQ(AttentionConfig::default_heads(64), 2);
  EXPECT_EQ(AttentionConfig::default_heads(128), 4);
  EXPECT_EQ(AttentionConfig::default_heads(96), 3);
  EXPECT_THROW((AttentionConfig{10, 3, 8, true}).validate(), std::invalid_argument);
}

TEST(WindowAttention, RowsSumToOne) {
  Rng rng(1);
  WindowAttention<float> attn(AttentionConfig{16, 2, 4, true}, rng);
  Tensorf x({3, 16, 16});
  for (auto& v : x.data()) v = static_cast<float>(rng.normal());
  Tensorf probs;
  Tensorf y = attn.forward(x, &probs);
  EXPECT_EQ(y.shape(), x.shape());
  ASSERT_EQ(probs.shape(), (Shape{3, 2, 16, 16}));
  for (int64_t r = 0; r < probs.numel() / 16; ++r) {
    double s = 0;
    for (int j = 0; j < 16; ++j) s += probs.data()[r * 16 + j];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(WindowAttention, ConstantTokensStayConstant) {
  Rng rng(2);
  WindowAttention<double> attn(AttentionConfig{4, 1, 2, true}, rng);
  auto w = attn.qkv.weight.data();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) w[(8 + r) * 4 + c] = r == c ? 1.0 : 0.0;  // value projection = identity
  Tensord x({2, 4, 4});
  for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = 0.3 * static_cast<double>(i % 4) - 0.2;
  Tensord y = attn.forward(x);
  for (int b = 0; b < 2; ++b)
    for (int t = 1; t < 4; ++t)
      for (int c = 0; c < 4; ++c) EXPECT_NEAR(y.data()[(b * 4 + t) * 4 + c], y.data()[b * 16 + c], 1e-14);
}

TEST(WindowAttention, TwoTokenHandExample) {
  Rng rng(3);
  WindowAttention<double> attn(AttentionConfig{1, 1, 1, false}, rng);
  fill(attn.qkv.weight, 1.0);
  fill(attn.proj.weight, 1.0);
  Tensord x({1, 2, 1}, std::vector<double>{1.0, 2.0});
  Tensord y = attn.forward(x);
  const double e = std::exp(1.0);
  EXPECT_NEAR(y.data()[0], (1.0 + 2.0 * e) / (1.0 + e), 1e-14);
  EXPECT_NEAR(y.data()[1], (1.0 + 2.0 * e * e) / (1.0 + e * e), 1e-14);
}

TEST(WindowAttention, PermutationEquivariantWithoutRelBias) {
  Rng rng(4);
  WindowAttention<double> attn(AttentionConfig{8, 2, 3, false}, rng);
  Tensord x = random_tensor({2, 9, 8}, 5);
  std::vector<int> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  Rng(6).shuffle(perm);
  Tensord xp({2, 9, 8});
  for (int b = 0; b < 2; ++b)
    for (int t = 0; t < 9; ++t)
      for (int c = 0; c < 8; ++c) xp.data()[(b * 9 + t) * 8 + c] = x.data()[(b * 9 + perm[t]) * 8 + c];
  Tensord y = attn.forward(x), yp = attn.forward(xp);
  for (int b = 0; b < 2; ++b)
    for (int t = 0; t < 9; ++t)
      for (int c = 0; c < 8; ++c)
        EXPECT_NEAR(yp.data()[(b * 9 + t) * 8 + c], y.data()[(b * 9 + perm[t]) * 8 + c], 1e-13);
}

TEST(WindowAttention, SingleTokenIsValueThenProjection) {
  Rng rng(7);
  WindowAttention<double> attn(AttentionConfig{4, 1, 1, true}, rng);
  Tensord x = random_tensor({5, 1, 4}, 8);
  Tensord y = attn.forward(x);
  // softmax over one token is 1, so out = proj(Wv x + bv)
  Tensord wv = slice(attn.qkv.weight, 0, 8, 4);
  Tensord ref = linear(linear(x, wv, attn.v_bias), attn.proj.weight, attn.proj.bias);
  for (int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.data()[i], ref.data()[i], 1e-14);
}

TEST(WindowAttention, RejectsDimMismatch) {
  Rng rng(9);
  WindowAttention<float> attn(AttentionConfig{8, 1, 2, true}, rng);
  EXPECT_THROW(attn.forward(Tensorf({1, 4, 6})), ShapeError);
  EXPECT_THROW(attn.forward(Tensorf({1, 9, 8})), ShapeError);
}

TEST(MBConv, ZeroBranchIsResidual) {
  Rng rng(10);
  MBConv<double> mb(4, 4, 1, {}, rng);
  ASSERT_TRUE(mb.has_residual());
  for (auto& [name, t] : mb.parameters()) fill(t, 0.0);
  // gate forced open: sigmoid(large bias) == 1
  fill(mb.se_expand.bias, 50.0);
  Tensord x = random_tensor({2, 4, 8, 8}, 11);
  Tensord y = mb.forward(x);
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(MBConv, StrideTwoHalvesAndResidualRule) {
  Rng rng(12);
  MBConv<float> down(4, 8, 2, {}, rng);
  EXPECT_FALSE(down.has_residual());
  EXPECT_EQ(down.forward(Tensorf({2, 4, 8, 10}, 0.5f)).shape(), (Shape{2, 8, 4, 5}));
  EXPECT_FALSE(MBConv<float>(4, 8, 1, {}, rng).has_residual());
  EXPECT_FALSE(MBConv<float>(4, 4, 2, {}, rng).has_residual());
}

TEST(MBConv, GradCheck) {
  Rng rng(13);
  MBConv<double> mb(4, 4, 1, {}, rng);
  Tensord x = random_tensor({2, 4, 8, 8}, 14);
  std::vector<Tensord> inputs = param_list(mb);
  inputs.insert(inputs.begin(), x);
  auto r = grad_check([&](const std::vector<Tensord>& v) { return weighted(mb.forward(v[0]), 15); }, inputs);
  EXPECT_LE(r.max_rel_error, 1e-4) << "input " << r.worst_input << " index " << r.worst_index;
}

TEST(MaxViTBlock, ShapePreservedAndPadded) {
  Rng rng(16);
  MaxViTBlock<float> blk(8, 8, 1, {.window = 4}, rng);
  for (int64_t s : {4, 6, 8, 13}) EXPECT_EQ(blk.forward(Tensorf({2, 8, s, s + 1}, 0.1f)).shape(), (Shape{2, 8, s, s + 1}));
  MaxViTBlock<float> down(4, 8, 2, {.window = 4}, rng);
  EXPECT_EQ(down.forward(Tensorf({1, 4, 16, 16}, 0.1f)).shape(), (Shape{1, 8, 8, 8}));
}

TEST(MaxViTBlock, ZeroedAttentionBranchesReduceToMBConv) {
  Rng rng(17);
  MaxViTBlock<double> blk(4, 4, 1, {.window = 4, .depth = 2}, rng);
  for (auto& layer : blk.layers()) {
    for (auto* sub : {layer.block, layer.grid}) {
      fill(sub->attn.proj.weight, 0.0);
      fill(sub->attn.proj.bias, 0.0);
      fill(sub->ffn2.weight, 0.0);
      fill(sub->ffn2.bias, 0.0);
    }
  }
  Tensord x = random_tensor({2, 4, 8, 8}, 18);
  Tensord ref = blk.layers()[1].mbconv->forward(blk.layers()[0].mbconv->forward(x));
  Tensord y = blk.forward(x);
  for (int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.data()[i], ref.data()[i], 1e-12);
}

TEST(MaxViTBlock, FiniteForLargeInputs) {
  Rng rng(19);
  MaxViTBlock<float> blk(8, 8, 1, {.window = 4}, rng);
  Tensorf x({2, 8, 12, 12});
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform(-1e3, 1e3));
  const Tensorf y = blk.forward(x);
  for (float v : y.data()) ASSERT_TRUE(std::isfinite(v));
}

TEST(MaxViTBlock, GradCheck) {
  Rng rng(20);
  MaxViTBlock<double> blk(4, 4, 1, {.window = 4}, rng);
  Tensord x = random_tensor({2, 4, 6, 6}, 21);
  std::vector<Tensord> inputs = param_list(blk);
  inputs.insert(inputs.begin(), x);
  auto r = grad_check([&](const std::vector<Tensord>& v) { return weighted(blk.forward(v[0]), 22); }, inputs);
  EXPECT_LE(r.max_rel_error, 1e-4) << "input " << r.worst_input << " index " << r.worst_index << " a "
                                   << r.worst_analytic << " n " << r.worst_numeric;
}
