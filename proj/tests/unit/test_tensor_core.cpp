#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "nhvt/gradcheck.hpp"
#include "nhvt/ops.hpp"
#include "nhvt/rng.hpp"
#include "nhvt/runtime.hpp"

using namespace nhvt;

namespace {

// Direct sliding-window convolution, used as an independent reference.
Tensord reference_conv(const Tensord& x, const Tensord& w, int stride, int pad, int dil) {
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto o = w.dim(0), k = w.dim(2);
  const auto oh = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  const auto ow = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  Tensord out({n, o, oh, ow});
  auto xv = x.data();
  auto wv = w.data();
  auto ov = out.data();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t oc = 0; oc < o; ++oc)
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t xx = 0; xx < ow; ++xx) {
          double s = 0;
          for (int64_t ic = 0; ic < c; ++ic)
            for (int64_t ky = 0; ky < k; ++ky)
              for (int64_t kx = 0; kx < k; ++kx) {
                const int64_t iy = y * stride - pad + ky * dil, ix = xx * stride - pad + kx * dil;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                s += xv[((b * c + ic) * h + iy) * wd + ix] * wv[((oc * c + ic) * k + ky) * k + kx];
              }
          ov[((b * o + oc) * oh + y) * ow + xx] = s;
        }
  return out;
}

// Weighted sum so that gradients are O(1) and not symmetric.
Tensord weighted(const Tensord& y, std::uint64_t seed) {
  return sum(mul(y, random_tensor(y.shape(), seed)));
}

double check(const ScalarFn& fn, const std::vector<Tensord>& inputs) {
  return grad_check(fn, inputs).max_rel_error;
}

}  // namespace

TEST(Tensor, ShapeAndData) {
  Tensorf t({2, 3}, 1.5f);
  EXPECT_EQ(t.numel(), 6);
  EXPECT_EQ(t.dim(-1), 3);
  EXPECT_THROW(Tensorf({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  EXPECT_FALSE(t.has_grad());
}

TEST(Autograd, SumGivesOnes) {
  Tensord x = random_tensor({3, 4}, 1);
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Autograd, SquareGivesTwoX) {
  Tensord x = random_tensor({5}, 2);
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  backward(sum(mul(x, x)));
  for (int i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x.data()[i]);
}

TEST(Autograd, ReuseAccumulates) {
  Tensord a({3}, 0.7);
  a.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  backward(sum(add(a, a)));
  for (double g : a.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Autograd, RejectsNonScalarRootAndSecondBackward) {
  Tensord a({3}, 1.0);
  a.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  Tensord y = scale(a, 2.0);
  EXPECT_THROW(backward(y), AutogradError);
  Tensord s = sum(y);
  backward(s);
  EXPECT_THROW(backward(s), AutogradError);
}

TEST(Autograd, UntrackedTensorGetsNoGrad) {
  Tensord a({3}, 1.0), b({3}, 2.0);
  a.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  backward(sum(mul(a, b)));
  EXPECT_FALSE(b.has_grad());
}

TEST(GradCheck, IdentitySumIsExact) {
  // Zero inputs make x +- eps and the difference quotient exact in binary.
  Tensord x({4, 3}, 0.0);
  EXPECT_EQ(check([](const std::vector<Tensord>& v) { return sum(v[0]); }, {x}), 0.0);
}

TEST(Conv2d, IdentityKernel) {
  Tensorf x({2, 1, 5, 4});
  std::iota(x.data().begin(), x.data().end(), 0.f);
  Tensorf w({1, 1, 1, 1}, 1.f);
  Tensorf y = conv2d(x, w, Tensorf{});
  ASSERT_EQ(y.shape(), x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, OnesKernelCenterAndCorner) {
  Tensorf x({1, 1, 3, 3}, 1.f);
  Tensorf w({1, 1, 3, 3}, 1.f);
  Tensorf y = conv2d(x, w, Tensorf{}, {.padding = 1});
  EXPECT_EQ(y.data()[4], 9.f);
  EXPECT_EQ(y.data()[0], 4.f);
  EXPECT_EQ(y.data()[8], 4.f);
  EXPECT_EQ(y.data()[1], 6.f);
}

TEST(Conv2d, DilatedDeltaTaps) {
  Tensord x({1, 1, 9, 9}, 0.0);
  x.data()[4 * 9 + 4] = 1.0;
  Tensord w = random_tensor({1, 1, 3, 3}, 4);
  Tensord y = conv2d(x, w, Tensord{}, {.padding = 2, .dilation = 2});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 9, 9}));
  for (int r = 0; r < 9; ++r)
    for (int c = 0; c < 9; ++c) {
      const double v = y.data()[r * 9 + c];
      if ((r - 4) % 2 != 0 || (c - 4) % 2 != 0 || std::abs(r - 4) > 2 || std::abs(c - 4) > 2) {
        EXPECT_EQ(v, 0.0) << r << "," << c;
      } else {
        EXPECT_NE(v, 0.0);
      }
    }
  Tensord ref = reference_conv(x, w, 1, 2, 2);
  for (int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.data()[i], ref.data()[i], 1e-12);
}

TEST(Conv2d, MatchesReferenceAcrossConfigs) {
  struct Cfg { int k, stride, pad, dil; };
  for (Cfg cfg : {Cfg{3, 1, 1, 1}, Cfg{3, 2, 1, 1}, Cfg{3, 1, 2, 2}, Cfg{1, 1, 0, 1}, Cfg{5, 3, 0, 1}}) {
    Tensord x = random_tensor({2, 3, 11, 9}, 5);
    Tensord w = random_tensor({4, 3, cfg.k, cfg.k}, 6);
    Tensord y = conv2d(x, w, Tensord{}, {.stride = cfg.stride, .padding = cfg.pad, .dilation = cfg.dil});
    Tensord ref = reference_conv(x, w, cfg.stride, cfg.pad, cfg.dil);
    ASSERT_EQ(y.shape(), ref.shape());
    for (int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.data()[i], ref.data()[i], 1e-12);
  }
}

TEST(Conv2d, OddKernelSamePaddingPreservesSize) {
  for (int k : {1, 3, 5, 7}) {
    Tensorf x({1, 2, 13, 10}, 1.f);
    Tensorf w({3, 2, k, k}, 0.1f);
    EXPECT_EQ(conv2d(x, w, Tensorf{}, {.padding = (k - 1) / 2}).shape(), (Shape{1, 3, 13, 10}));
  }
}

TEST(Conv2d, RejectsChannelMismatchNamingDimension) {
  Tensorf x({1, 3, 8, 8}), w({4, 2, 3, 3});
  try {
    conv2d(x, w, Tensorf{});
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos);
  }
  EXPECT_THROW(conv2d(x, Tensorf({4, 3, 3, 3}), Tensorf{}, {.stride = 0}), ShapeError);
}

TEST(ConvTranspose2d, ReplicatesIntoBlocks) {
  Tensorf x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  Tensorf w({1, 1, 2, 2}, 1.f);
  Tensorf y = conv_transpose2d(x, w, Tensorf{}, 2, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  const float expect[16] = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  for (int i = 0; i < 16; ++i) EXPECT_EQ(y.data()[i], expect[i]);
}

TEST(ConvTranspose2d, GradIsForwardConv) {
  Tensord x = random_tensor({1, 2, 4, 4}, 7);
  Tensord w = random_tensor({2, 3, 3, 3}, 8);
  Tensord up = random_tensor({1, 3, 9, 9}, 9);  // (4-1)*2 + 3 = 9
  x.set_requires_grad(true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    backward(sum(mul(conv_transpose2d(x, w, Tensord{}, 2, 0), up)));
  }
  // conv2d weight layout is (out, in): here out = 2 (x channels), in = 3.
  Tensord ref = conv2d(up, w, Tensord{}, {.stride = 2});
  ASSERT_EQ(ref.shape(), x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x.grad()[i], ref.data()[i], 1e-10);
}

TEST(ConvTranspose2d, RoundTripWithStridedConv) {
  for (int64_t h : {4, 7, 16}) {
    Tensorf x({1, 2, h, h}, 1.f);
    Tensorf up = conv_transpose2d(x, Tensorf({2, 2, 2, 2}, 1.f), Tensorf{}, 2, 0);
    EXPECT_EQ(up.dim(2), 2 * h);
    Tensorf down = conv2d(up, Tensorf({2, 2, 2, 2}, 1.f), Tensorf{}, {.stride = 2});
    EXPECT_EQ(down.dim(2), h);
  }
}

TEST(MaxPool, ForwardCases) {
  Tensorf x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  EXPECT_EQ(maxpool2d(x, 2, 2, 0).data()[0], 4.f);
  Tensorf c({1, 2, 5, 6}, 3.f);
  Tensorf y = maxpool2d(c, 3, 1, 1);
  EXPECT_EQ(y.shape(), c.shape());
  for (float v : y.data()) EXPECT_EQ(v, 3.f);
  EXPECT_THROW(maxpool2d(x, 5, 1, 0), ShapeError);
}

TEST(MaxPool, BackwardRoutesToArgmax) {
  Tensorf x({1, 1, 2, 2}, std::vector<float>{1, 5, 2, 3});
  x.set_requires_grad(true);
  Tape<float> tape;
  TapeScope<float> scope(tape);
  backward(sum(maxpool2d(x, 2, 2, 0)));
  const float expect[4] = {0, 1, 0, 0};
  for (int i = 0; i < 4; ++i) EXPECT_EQ(x.grad()[i], expect[i]);
}

TEST(MaxPool, TieGoesToFirstIndexAndPaddingNeverWins) {
  Tensorf x({1, 1, 2, 2}, -7.f);
  x.set_requires_grad(true);
  Tape<float> tape;
  TapeScope<float> scope(tape);
  Tensorf y = maxpool2d(x, 3, 1, 1);
  for (float v : y.data()) EXPECT_EQ(v, -7.f);
  backward(sum(y));
  EXPECT_EQ(x.grad()[0], 4.f);
  EXPECT_EQ(x.grad()[3], 0.f);
}

TEST(MaxPool, GradNonzeroOnlyAtArgmax) {
  Tensord x = random_tensor({2, 3, 8, 8}, 10);
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  Tensord y = maxpool2d(x, 2, 2, 0);
  backward(sum(y));
  std::vector<bool> is_max(static_cast<size_t>(x.numel()), false);
  for (int64_t p = 0; p < 6; ++p)
    for (int oy = 0; oy < 4; ++oy)
      for (int ox = 0; ox < 4; ++ox) {
        int64_t best = -1;
        for (int ky = 0; ky < 2; ++ky)
          for (int kx = 0; kx < 2; ++kx) {
            const int64_t i = p * 64 + (2 * oy + ky) * 8 + 2 * ox + kx;
            if (best < 0 || x.data()[i] > x.data()[best]) best = i;
          }
        is_max[best] = true;
      }
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x.grad()[i] != 0.0, is_max[i]);
}

TEST(Resample, AdaptivePoolAndResizeMatchSimpleCases) {
  Tensorf x({1, 1, 4, 4});
  std::iota(x.data().begin(), x.data().end(), 0.f);
  Tensorf p = adaptive_avgpool2d(x, 2, 2);
  Tensorf a = avgpool2d(x, 2, 2);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(p.data()[i], a.data()[i]);
  EXPECT_FLOAT_EQ(adaptive_avgpool2d(x, 1, 1).data()[0], 7.5f);
  Tensorf r = resize_nearest(x, 8, 8), u = upsample_nearest(x, 2);
  for (int i = 0; i < 64; ++i) EXPECT_EQ(r.data()[i], u.data()[i]);
  Tensorf odd({1, 1, 3, 3});
  std::iota(odd.data().begin(), odd.data().end(), 0.f);
  Tensorf q = adaptive_avgpool2d(odd, 2, 2);  // overlapping bins rows/cols {0,1} and {1,2}
  EXPECT_FLOAT_EQ(q.data()[0], (0 + 1 + 3 + 4) / 4.f);
  EXPECT_FLOAT_EQ(q.data()[3], (4 + 5 + 7 + 8) / 4.f);
}

TEST(BatchNorm, TrainModeNormalises) {
  Tensorf x({4, 3, 5, 5});
  Rng rng(11);
  for (auto& v : x.data()) v = static_cast<float>(rng.normal() * 3 + 2);
  Tensorf g({3}, 1.f), b({3}, 0.f);
  BatchNormState<float> st{Tensorf({3}, 0.f), Tensorf({3}, 1.f)};
  Tensorf y = batchnorm2d(x, g, b, st);
  for (int c = 0; c < 3; ++c) {
    double s = 0, ss = 0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) {
        const double v = y.data()[(n * 3 + c) * 25 + i];
        s += v;
        ss += v * v;
      }
    EXPECT_NEAR(s / 100, 0.0, 1e-5);
    EXPECT_NEAR(ss / 100, 1.0, 1e-3);
    EXPECT_NE(st.running_mean.data()[c], 0.f);
  }
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  Tensorf x = Tensorf({2, 2, 3, 3}, 1.f);
  x.data()[0] = 5.f;
  BatchNormState<float> st{Tensorf({2}, 0.f), Tensorf({2}, 1.f)};
  Tensorf y = batchnorm2d(x, Tensorf({2}, 0.f), Tensorf({2}, std::vector<float>{0.5f, -1.f}), st);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 9; ++i) EXPECT_EQ(y.data()[(n * 2 + c) * 9 + i], c == 0 ? 0.5f : -1.f);
}

TEST(BatchNorm, EvalIdentityWithUnitState) {
  Tensorf x({1, 2, 2, 2}, std::vector<float>{1, -2, 3, 4, 5, 6, -7, 8});
  BatchNormState<float> st{Tensorf({2}, 0.f), Tensorf({2}, 1.f)};
  Tensorf y = batchnorm2d(x, Tensorf({2}, 1.f), Tensorf({2}, 0.f), st, {.training = false, .eps = 0.0});
  for (int i = 0; i < 8; ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
  EXPECT_THROW(batchnorm2d(Tensorf({0, 2, 2, 2}), Tensorf({2}, 1.f), Tensorf({2}, 0.f), st), ShapeError);
}

TEST(BatchNorm, RunningStatsUseUnbiasedVariance) {
  Tensorf x({2, 1, 1, 1}, std::vector<float>{1, 3});
  BatchNormState<float> st{Tensorf({1}, 0.f), Tensorf({1}, 1.f)};
  batchnorm2d(x, Tensorf({1}, 1.f), Tensorf({1}, 0.f), st);
  EXPECT_NEAR(st.running_mean.data()[0], 0.2f, 1e-7);
  EXPECT_NEAR(st.running_var.data()[0], 0.9f + 0.1f * 2.f, 1e-6);
}

TEST(Mish, KnownValues) {
  Tensord x({3}, std::vector<double>{0.0, 20.0, 1.0});
  Tensord y = mish(x);
  EXPECT_EQ(y.data()[0], 0.0);
  EXPECT_NEAR(y.data()[1], 20.0, 1e-6);
  EXPECT_NEAR(y.data()[2], 0.865098, 1e-6);
}

TEST(Softmax, KnownValuesAndShiftInvariance) {
  Tensord x({2}, std::vector<double>{0.0, std::log(3.0)});
  Tensord y = softmax(x, 0);
  EXPECT_NEAR(y.data()[0], 0.25, 1e-15);
  EXPECT_NEAR(y.data()[1], 0.75, 1e-15);
  Tensorf u({4, 5}, 2.f);
  Tensorf su = softmax(u, 1);
  for (float v : su.data()) EXPECT_FLOAT_EQ(v, 0.2f);
  Tensord r = random_tensor({3, 7}, 12);
  Tensord a = softmax(r, -1), b = softmax(add_scalar(r, 123.0), -1);
  for (int64_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
}

TEST(Softmax, SumsToOneAtLargeMagnitude) {
  for (int axis : {0, 1, 2}) {
    Tensorf x({4, 6, 5});
    Rng rng(13 + axis);
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform(-1e4, 1e4));
    Tensorf y = softmax(x, axis);
    Tensorf s = sum(y, {axis}, false);
    for (float v : s.data()) EXPECT_NEAR(v, 1.0, 1e-6);
    for (float v : y.data()) {
      EXPECT_GE(v, 0.f);
      EXPECT_LE(v, 1.f);
    }
  }
}

TEST(Shapes, MatmulConcatReshape) {
  Tensorf eye({3, 3}, 0.f);
  for (int i = 0; i < 3; ++i) eye.data()[i * 4] = 1.f;
  Tensorf b({3, 2}, std::vector<float>{1, 2, 3, 4, 5, 6});
  Tensorf p = matmul(eye, b);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(p.data()[i], b.data()[i]);
  EXPECT_EQ(concat<float>({Tensorf({1, 2, 4, 4}), Tensorf({1, 3, 4, 4})}, 1).shape(), (Shape{1, 5, 4, 4}));
  Tensorf r({2, 3, 4});
  std::iota(r.data().begin(), r.data().end(), 0.f);
  Tensorf rr = reshape(reshape(r, {4, -1}), {2, 3, 4});
  for (int i = 0; i < 24; ++i) EXPECT_EQ(rr.data()[i], static_cast<float>(i));
  EXPECT_THROW(matmul(Tensorf({2, 3}), Tensorf({2, 3})), ShapeError);
  EXPECT_THROW(concat<float>({Tensorf({1, 2, 4, 4}), Tensorf({1, 3, 4, 5})}, 1), ShapeError);
}

TEST(Shapes, PermuteMatchesIndexing) {
  Tensorf x({2, 3, 4});
  std::iota(x.data().begin(), x.data().end(), 0.f);
  Tensorf y = permute(x, {2, 0, 1});
  ASSERT_EQ(y.shape(), (Shape{4, 2, 3}));
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 3; ++b)
      for (int c = 0; c < 4; ++c) EXPECT_EQ(y.data()[(c * 2 + a) * 3 + b], x.data()[(a * 3 + b) * 4 + c]);
}

// Every differentiable op against finite differences on three shapes.
class OpGradCheck : public ::testing::TestWithParam<int> {};

TEST_P(OpGradCheck, ElementwiseAndReductions) {
  const std::vector<Shape> shapes = {{5}, {2, 3, 4}, {3, 1, 2, 5}};
  const Shape s = shapes[GetParam()];
  Tensord a = random_tensor(s, 20), b = random_tensor(s, 21);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(add(v[0], v[1]), 1); }, {a, b}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(sub(v[0], v[1]), 2); }, {a, b}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(mul(v[0], v[1]), 3); }, {a, b}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(scale(v[0], 1.7), 4); }, {a}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(add_scalar(v[0], 0.3), 5); }, {a}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(sigmoid(v[0]), 6); }, {a}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(gelu(v[0]), 7); }, {a}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(mish(v[0]), 8); }, {a}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(softmax(v[0], -1), 9); }, {a}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(softmax(v[0], 0), 10); }, {a}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return mean(mul(v[0], v[0])); }, {a}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(sum(v[0], {0}, true), 11); }, {a}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(mean(v[0], {-1}, false), 12); }, {a}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(reshape(v[0], {-1}), 13); }, {a}), 1e-4);
  if (s.size() >= 2) {
    EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(transpose(v[0], 0, -1), 14); }, {a}), 1e-4);
    EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(concat<double>({v[0], v[1]}, 1), 15); }, {a, b}),
              1e-4);
    EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(slice(v[0], 0, 1, 1), 16); }, {a}), 1e-4);
    Shape row(s.size(), 1);
    row.back() = s.back();
    Tensord r = random_tensor(row, 22);
    EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(mul(v[0], v[1]), 17); }, {a, r}), 1e-4);
    EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(add(v[0], v[1]), 18); }, {a, r}), 1e-4);
    EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(sub(v[1], v[0]), 19); }, {a, r}), 1e-4);
  }
  Tensord table = random_tensor({7}, 23);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(take(v[0], {0, 3, 3, 6, 1, 0}, {2, 3}), 24); },
                  {table}),
            1e-4);
}

TEST_P(OpGradCheck, LinearAlgebra) {
  const int i = GetParam();
  const int64_t m = 2 + i, k = 3 + i, n = 4 - i;
  Tensord a = random_tensor({2, m, k}, 30), b = random_tensor({2, k, n}, 31), b2 = random_tensor({k, n}, 32);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(matmul(v[0], v[1]), 33); }, {a, b}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(matmul(v[0], v[1]), 34); }, {a, b2}), 1e-4);
  Tensord w = random_tensor({n, k}, 35), bias = random_tensor({n}, 36);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(linear(v[0], v[1], v[2]), 37); }, {a, w, bias}),
            1e-4);
}

TEST_P(OpGradCheck, ConvolutionAndPooling) {
  const int i = GetParam();
  const int64_t h = 5 + 2 * i, w = 6 + i;
  Tensord x = random_tensor({2, 4, h, w}, 40);
  Tensord k3 = random_tensor({6, 4, 3, 3}, 41), bias = random_tensor({6}, 42);
  Tensord kd = random_tensor({4, 1, 3, 3}, 43);
  Tensord k1 = random_tensor({3, 4, 1, 1}, 44);
  const int stride = 1 + (i % 2), dil = 1 + (i == 2);
  EXPECT_LE(check([&](const std::vector<Tensord>& v) {
              return weighted(conv2d(v[0], v[1], v[2], {.stride = stride, .padding = dil, .dilation = dil}), 45);
            }, {x, k3, bias}), 1e-4);
  EXPECT_LE(check([&](const std::vector<Tensord>& v) {
              return weighted(conv2d(v[0], v[1], Tensord{}, {.stride = stride, .padding = 1, .groups = 4}), 46);
            }, {x, kd}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(conv2d(v[0], v[1], Tensord{}), 47); }, {x, k1}),
            1e-4);
  Tensord kt = random_tensor({4, 3, 2 + i, 2 + i}, 48), bt = random_tensor({3}, 49);
  EXPECT_LE(check([&](const std::vector<Tensord>& v) { return weighted(conv_transpose2d(v[0], v[1], v[2], 2, i > 0), 50); },
                  {x, kt, bt}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(maxpool2d(v[0], 2, 2, 0), 51); }, {x}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(maxpool2d(v[0], 3, 1, 1), 52); }, {x}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(avgpool2d(v[0], 2, 2), 53); }, {x}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(upsample_nearest(v[0], 2), 54); }, {x}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(adaptive_avgpool2d(v[0], 2, 3), 57); }, {x}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(resize_nearest(v[0], 9, 4), 58); }, {x}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(pad_bottom_right(v[0], 3, 2), 55); }, {x}), 1e-4);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(crop_top_left(v[0], 4, 3), 56); }, {x}), 1e-4);
}

TEST_P(OpGradCheck, Normalisation) {
  const int i = GetParam();
  Tensord x = random_tensor({2 + i, 3, 3 + i, 4}, 60);
  Tensord g = random_tensor({3}, 61), b = random_tensor({3}, 62);
  for (bool training : {true, false}) {
    BatchNormState<double> st{Tensord({3}, 0.1), Tensord({3}, 1.3)};
    EXPECT_LE(check([&](const std::vector<Tensord>& v) {
                return weighted(batchnorm2d(v[0], v[1], v[2], st, {.training = training}), 63);
              }, {x, g, b}), 1e-4);
  }
  Tensord lg = random_tensor({4}, 64), lb = random_tensor({4}, 65);
  EXPECT_LE(check([](const std::vector<Tensord>& v) { return weighted(layer_norm(v[0], v[1], v[2]), 66); }, {x, lg, lb}),
            1e-4);
}

INSTANTIATE_TEST_SUITE_P(Shapes, OpGradCheck, ::testing::Values(0, 1, 2));

TEST(Determinism, GemmIndependentOfWorkerCount) {
  Tensorf a({300, 200}), b({200, 1100});
  Rng rng(70);
  for (auto& v : a.data()) v = static_cast<float>(rng.normal());
  for (auto& v : b.data()) v = static_cast<float>(rng.normal());
  kernels::set_worker_count(1);
  Tensorf serial = matmul(a, b);
  kernels::set_worker_count(3);
  Tensorf again = matmul(a, b);
  kernels::set_worker_count(1);
  for (int64_t i = 0; i < serial.numel(); ++i) ASSERT_EQ(serial.data()[i], again.data()[i]);
}
