#include "nhvt/gradcheck_suite.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "nhvt/blocks.hpp"
#include "nhvt/gradcheck.hpp"
#include "nhvt/loss.hpp"
#include "nhvt/models.hpp"
#include "nhvt/ops.hpp"
#include "nhvt/rng.hpp"

namespace nhvt {

namespace {

using Inputs = std::vector<Tensord>;

Tensord weighted(const Tensord& y, std::uint64_t seed) { return sum(mul(y, random_tensor(y.shape(), seed))); }

// Accumulates the worst case over several grad_check calls into one row.
class RowBuilder {
 public:
  RowBuilder(std::string group, std::string name) : start_(std::chrono::steady_clock::now()) {
    row_.group = std::move(group);
    row_.name = std::move(name);
  }

  void check(const ScalarFn& fn, const Inputs& inputs, const GradCheckOptions& opts = {}) {
    const GradCheckResult r = grad_check(fn, inputs, opts);
    row_.checked += r.elements_checked;
    row_.skipped += r.elements_skipped;
    if (r.max_rel_error >= row_.max_rel_error) {
      row_.max_rel_error = r.max_rel_error;
      char buf[160];
      std::snprintf(buf, sizeof buf, "input %zu index %lld a=%.6g n=%.6g", r.worst_input,
                    static_cast<long long>(r.worst_index), r.worst_analytic, r.worst_numeric);
      row_.worst = buf;
    }
  }

  GradCheckRow finish() {
    row_.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    return row_;
  }

 private:
  GradCheckRow row_;
  std::chrono::steady_clock::time_point start_;
};

// Overwrites every parameter with N(0, s^2) entries and returns them in store
// order. scale <= 0 selects s = 1/sqrt(fan_in) for weights and 0.5 for
// vectors, which keeps a deep stack out of saturation.
Inputs randomize(const Module<double>& m, std::uint64_t seed, double scale) {
  Inputs out;
  for (auto& [name, t] : m.parameters()) {
    double s = scale > 0 ? scale : 0.5;
    if (scale <= 0 && t.ndim() >= 2) s = 1.0 / std::sqrt(static_cast<double>(t.numel() / t.dim(0)));
    Tensord r = random_tensor(t.shape(), seed++, s);
    Tensord dst = t;
    std::copy(r.data().begin(), r.data().end(), dst.data().begin());
    out.push_back(t);
  }
  return out;
}

LabelBatch random_labels(std::int64_t n, std::int64_t h, std::int64_t w, int k, std::uint64_t seed) {
  LabelBatch t(n, h, w);
  Rng rng(seed);
  for (auto& v : t.labels) v = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(k)));
  return t;
}

using Emit = std::function<void(GradCheckRow)>;

void op_rows(const Emit& emit) {
  const std::vector<Shape> shapes = {{5}, {2, 3, 4}, {3, 1, 2, 5}};
  using Unary = std::function<Tensord(const Tensord&)>;
  auto unary_all = [&](const std::string& name, const std::vector<Unary>& fs, bool need_2d = false) {
    RowBuilder row("ops", name);
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      if (need_2d && shapes[i].size() < 2) continue;
      for (const auto& f : fs) {
        row.check([&](const Inputs& v) { return weighted(f(v[0]), 100 + i); }, {random_tensor(shapes[i], 10 + i)});
      }
    }
    emit(row.finish());
  };
  auto unary = [&](const std::string& name, Unary f, bool need_2d = false) { unary_all(name, {std::move(f)}, need_2d); };
  auto binary = [&](const std::string& name, std::function<Tensord(const Tensord&, const Tensord&)> f) {
    RowBuilder row("ops", name);
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      const Shape& s = shapes[i];
      row.check([&](const Inputs& v) { return weighted(f(v[0], v[1]), 110 + i); },
                {random_tensor(s, 20 + i), random_tensor(s, 30 + i)});
      if (s.size() >= 2) {
        // Broadcast against a row vector.
        Shape r(s.size(), 1);
        r.back() = s.back();
        row.check([&](const Inputs& v) { return weighted(f(v[0], v[1]), 120 + i); },
                  {random_tensor(s, 40 + i), random_tensor(r, 50 + i)});
      }
    }
    emit(row.finish());
  };

  binary("add", [](const Tensord& a, const Tensord& b) { return add(a, b); });
  binary("sub", [](const Tensord& a, const Tensord& b) { return sub(a, b); });
  binary("mul", [](const Tensord& a, const Tensord& b) { return mul(a, b); });
  unary("scale", [](const Tensord& x) { return scale(x, 1.7); });
  unary("add_scalar", [](const Tensord& x) { return add_scalar(x, 0.3); });
  unary("sigmoid", [](const Tensord& x) { return sigmoid(x); });
  unary("gelu", [](const Tensord& x) { return gelu(x); });
  unary("mish", [](const Tensord& x) { return mish(x); });
  unary_all("softmax", {[](const Tensord& x) { return softmax(x, -1); }, [](const Tensord& x) { return softmax(x, 0); }});
  unary_all("sum", {[](const Tensord& x) { return sum(x, {0}, false); }, [](const Tensord& x) { return sum(x); }});
  unary_all("mean", {[](const Tensord& x) { return mean(x, {-1}, true); }, [](const Tensord& x) { return mean(mul(x, x)); }});
  unary("reshape", [](const Tensord& x) { return reshape(x, {-1}); });
  unary("permute", [](const Tensord& x) {
    std::vector<int> axes(static_cast<std::size_t>(x.ndim()));
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(axes.size() - 1 - i);
    return permute(x, axes);
  }, true);
  unary("transpose", [](const Tensord& x) { return transpose(x, 0, -1); }, true);
  unary("concat", [](const Tensord& x) { return concat<double>({x, scale(x, 2.0)}, -1); });
  unary("slice", [](const Tensord& x) { return slice(x, -1, 1, x.dim(-1) - 2); });
  unary("take", [](const Tensord& x) {
    return take(x, {0, 3, 3, x.numel() - 1, 1, 0}, {2, 3});
  });

  {
    RowBuilder row("ops", "matmul");
    for (int i = 0; i < 3; ++i) {
      const std::int64_t m = 2 + i, k = 3 + i, n = 4 - i;
      row.check([&](const Inputs& v) { return weighted(matmul(v[0], v[1]), 130 + i); },
                {random_tensor({2, m, k}, 60 + i), random_tensor({2, k, n}, 63 + i)});
      row.check([&](const Inputs& v) { return weighted(matmul(v[0], v[1]), 133 + i); },
                {random_tensor({2, m, k}, 66 + i), random_tensor({k, n}, 69 + i)});
    }
    emit(row.finish());
  }
  {
    RowBuilder row("ops", "linear");
    for (int i = 0; i < 3; ++i) {
      const std::int64_t k = 3 + i, n = 4 - i;
      row.check([&](const Inputs& v) { return weighted(linear(v[0], v[1], v[2]), 140 + i); },
                {random_tensor({2, 2 + i, k}, 72 + i), random_tensor({n, k}, 75 + i), random_tensor({n}, 78 + i)});
    }
    emit(row.finish());
  }

  // NCHW ops on three spatial shapes.
  auto spatial = [](int i) { return random_tensor({2, 4, 5 + 2 * i, 6 + i}, 80 + i); };
  auto nchw = [&](const std::string& name, std::function<Tensord(const Tensord&, int)> f) {
    RowBuilder row("ops", name);
    for (int i = 0; i < 3; ++i) row.check([&](const Inputs& v) { return weighted(f(v[0], i), 150 + i); }, {spatial(i)});
    emit(row.finish());
  };
  {
    RowBuilder row("ops", "conv2d");
    for (int i = 0; i < 3; ++i) {
      const int stride = 1 + (i % 2), dil = 1 + (i == 2);
      row.check([&](const Inputs& v) {
        return weighted(conv2d(v[0], v[1], v[2], {.stride = stride, .padding = dil, .dilation = dil}), 160 + i);
      }, {spatial(i), random_tensor({6, 4, 3, 3}, 90 + i), random_tensor({6}, 93 + i)});
      row.check([&](const Inputs& v) {
        return weighted(conv2d(v[0], v[1], Tensord{}, {.stride = stride, .padding = 1, .groups = 4}), 163 + i);
      }, {spatial(i), random_tensor({4, 1, 3, 3}, 96 + i)});
      row.check([&](const Inputs& v) { return weighted(conv2d(v[0], v[1], Tensord{}), 166 + i); },
                {spatial(i), random_tensor({3, 4, 1, 1}, 99 + i)});
    }
    emit(row.finish());
  }
  {
    RowBuilder row("ops", "conv_transpose2d");
    for (int i = 0; i < 3; ++i) {
      row.check([&](const Inputs& v) { return weighted(conv_transpose2d(v[0], v[1], v[2], 2, i > 0), 170 + i); },
                {spatial(i), random_tensor({4, 3, 2 + i, 2 + i}, 102 + i), random_tensor({3}, 105 + i)});
    }
    emit(row.finish());
  }
  nchw("maxpool2d", [](const Tensord& x, int i) { return i == 1 ? maxpool2d(x, 3, 1, 1) : maxpool2d(x, 2, 2, 0); });
  nchw("avgpool2d", [](const Tensord& x, int) { return avgpool2d(x, 2, 2); });
  nchw("upsample_nearest", [](const Tensord& x, int i) { return upsample_nearest(x, 2 + (i == 2)); });
  nchw("adaptive_avgpool2d", [](const Tensord& x, int i) { return adaptive_avgpool2d(x, 1 + i, 3); });
  nchw("resize_nearest", [](const Tensord& x, int i) { return resize_nearest(x, 9 - i, 4 + i); });
  nchw("pad_bottom_right", [](const Tensord& x, int i) { return pad_bottom_right(x, 3 - i, i); });
  nchw("crop_top_left", [](const Tensord& x, int i) { return crop_top_left(x, 4 - i, 3); });
  {
    RowBuilder row("ops", "batchnorm2d");
    for (int i = 0; i < 3; ++i) {
      for (bool training : {true, false}) {
        BatchNormState<double> st{Tensord({3}, 0.1), Tensord({3}, 1.3)};
        row.check([&](const Inputs& v) {
          return weighted(batchnorm2d(v[0], v[1], v[2], st, {.training = training}), 180 + i);
        }, {random_tensor({2 + i, 3, 3 + i, 4}, 110 + i), random_tensor({3}, 113 + i), random_tensor({3}, 116 + i)});
      }
    }
    emit(row.finish());
  }
  {
    RowBuilder row("ops", "layer_norm");
    for (int i = 0; i < 3; ++i) {
      const std::int64_t d = 3 + i;
      row.check([&](const Inputs& v) { return weighted(layer_norm(v[0], v[1], v[2]), 190 + i); },
                {random_tensor({2, 2 + i, d}, 120 + i), random_tensor({d}, 123 + i), random_tensor({d}, 126 + i)});
    }
    emit(row.finish());
  }
}

void loss_rows(const Emit& emit) {
  const std::vector<Shape> shapes = {{2, 2, 8, 8}, {1, 5, 4, 4}, {3, 3, 5, 6}};
  auto run = [&](const std::string& name, std::function<Tensord(const Tensord&, const LabelBatch&)> f) {
    RowBuilder row("loss", name);
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      const Shape& s = shapes[i];
      const LabelBatch t = random_labels(s[0], s[2], s[3], static_cast<int>(s[1]), 200 + i);
      row.check([&](const Inputs& v) { return f(v[0], t); }, {random_tensor(s, 210 + i, 2.0)});
    }
    emit(row.finish());
  };
  run("cross_entropy", [](const Tensord& z, const LabelBatch& t) { return cross_entropy(z, t); });
  run("soft_dice_loss", [](const Tensord& z, const LabelBatch& t) { return soft_dice_loss(softmax(z, 1), t); });
  run("combined_loss", [](const Tensord& z, const LabelBatch& t) { return combined_loss(z, t); });
}

void block_rows(const Emit& emit) {
  {
    RowBuilder row("blocks", "mbconv");
    Rng rng(13);
    MBConv<double> mb(4, 4, 1, {}, rng);
    Inputs in = randomize(mb, 99, 0.5);
    in.insert(in.begin(), random_tensor({2, 4, 8, 8}, 14));
    row.check([&](const Inputs& v) { return weighted(mb.forward(v[0]), 15); }, in);
    emit(row.finish());
  }
  {
    RowBuilder row("blocks", "maxvit_block");
    Rng rng(20);
    MaxViTOptions mo;
    mo.window = 4;
    MaxViTBlock<double> blk(4, 4, 1, mo, rng);
    Inputs in = randomize(blk, 99, 0.5);
    in.insert(in.begin(), random_tensor({2, 4, 6, 6}, 21));
    row.check([&](const Inputs& v) { return weighted(blk.forward(v[0]), 22); }, in);
    emit(row.finish());
  }
  {
    RowBuilder row("blocks", "cb_fusion");
    Rng rng(17);
    ModelConfig cfg = ModelConfig::toy();
    cfg.window = 4;
    CBFusion<double> f(4, cfg, rng);
    Inputs in = randomize(f, 300, 0.5);
    in.insert(in.begin(), {random_tensor({2, 4, 4, 4}, 18), random_tensor({2, 4, 4, 4}, 19)});
    row.check([&](const Inputs& v) { return weighted(f.forward(v[0], v[1]), 20); }, in);
    emit(row.finish());
  }
}

void model_rows(const Emit& emit) {
  // Smallest configuration whose LayerNorms span more than two channels and
  // whose 32x32 input needs no window padding at any stage.
  ModelConfig cfg;
  cfg.base_channels = 4;
  cfg.window = 2;
  cfg.seed = 5;
  NucleiHVT<double> m(cfg);
  Inputs in = randomize(m, 500, 0.0);
  in.insert(in.begin(), random_tensor({1, 3, 32, 32}, 23));
  GradCheckOptions opts;
  opts.max_elements_per_input = 2;
  opts.seed = 24;
  RowBuilder row("model", "nucleihvt_toy");
  row.check([&](const Inputs& v) { return weighted(m.forward(v[0]), 25); }, in, opts);
  emit(row.finish());
}

}  // namespace

std::vector<GradCheckRow> run_gradcheck_suite(const std::string& scope,
                                              const std::function<void(const GradCheckRow&)>& on_row) {
  const bool all = scope == "all";
  if (!all && scope != "ops" && scope != "loss" && scope != "blocks" && scope != "model") {
    throw std::invalid_argument("unknown gradcheck scope '" + scope + "' (expected ops, loss, blocks, model or all)");
  }
  std::vector<GradCheckRow> rows;
  const Emit emit = [&](GradCheckRow r) {
    if (on_row) on_row(r);
    rows.push_back(std::move(r));
  };
  if (all || scope == "ops") op_rows(emit);
  if (all || scope == "loss") loss_rows(emit);
  if (all || scope == "blocks") block_rows(emit);
  if (all || scope == "model") model_rows(emit);
  return rows;
}

std::string format_gradcheck_table(const std::vector<GradCheckRow>& rows) {
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-7s %-20s %12s %8s %8s %8s  %s\n", "group", "name", "max_rel_err", "checked",
                "skipped", "seconds", "result");
  out << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-7s %-20s %12.3e %8lld %8lld %8.2f  %s\n", r.group.c_str(), r.name.c_str(),
                  r.max_rel_error, static_cast<long long>(r.checked), static_cast<long long>(r.skipped), r.seconds,
                  r.pass() ? "PASS" : "FAIL");
    out << buf;
  }
  return out.str();
}

}  // namespace nhvt
