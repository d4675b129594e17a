#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "nhvt/config.hpp"
#include "nhvt/trainer.hpp"

using namespace nhvt;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("nhvt_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ModelConfig tiny(Variant v = Variant::kNucleiHVT) {
  ModelConfig cfg = ModelConfig::toy(v);
  cfg.base_channels = 4;
  cfg.window = 4;
  cfg.seed = 3;
  return cfg;
}

std::vector<Sample> blobs(int n, std::int64_t size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) {
    NamedPair p = synthetic_pair(size, size, 2, rng, "s" + std::to_string(i));
    out.push_back({image_to_tensor(p.image), p.mask, p.stem});
  }
  return out;
}

TrainConfig quick(std::int64_t steps, std::int64_t batch = 2) {
  TrainConfig c;
  c.total_steps = steps;
  c.batch_size = batch;
  c.seed = 11;
  c.base_lr = 1e-3;
  return c;
}

ParamStore<double> scalar_param(double value) {
  ParamStore<double> ps;
  ps.emplace("theta", Tensord({1}, value));
  return ps;
}

}  // namespace

// ---- optimizer ----

TEST(AdamW, ZeroGradientAppliesDecayOnly) {
  auto ps = scalar_param(2.0);
  AdamW<double> opt(ps, {.weight_decay = 0.01});
  Tensord theta = ps.at("theta");
  for (int i = 0; i < 3; ++i) {
    const double before = theta.data()[0];
    theta.mutable_grad()[0] = 0.0;
    opt.step(0.1);
    EXPECT_DOUBLE_EQ(theta.data()[0], before * (1.0 - 0.1 * 0.01));
  }
}

TEST(AdamW, ConstantGradientStepTendsToLr) {
  auto ps = scalar_param(0.0);
  AdamW<double> opt(ps, {.weight_decay = 0.0});
  Tensord theta = ps.at("theta");
  double prev = 0.0, delta = 0.0;
  for (int i = 0; i < 200; ++i) {
    theta.mutable_grad()[0] = 0.37;
    opt.step(0.01);
    delta = prev - theta.data()[0];
    prev = theta.data()[0];
  }
  EXPECT_NEAR(delta, 0.01, 1e-8);
}

TEST(AdamW, ThreeStepScalarTrace) {
  // theta0 = 0.5, g = 2 theta, lr 0.1, wd 0.01; values from a 50-digit
  // decimal evaluation of the update rule.
  auto ps = scalar_param(0.5);
  AdamW<double> opt(ps, {.weight_decay = 0.01});
  Tensord theta = ps.at("theta");
  const double expected[3] = {3.99500000999999990000e-1, 3.00297839259460390580e-1, 2.03712382973763607258e-1};
  for (int t = 0; t < 3; ++t) {
    theta.mutable_grad()[0] = 2.0 * theta.data()[0];
    opt.step(0.1);
    EXPECT_NEAR(theta.data()[0], expected[t], 1e-10) << "step " << t + 1;
  }
  EXPECT_EQ(opt.state().step, 3);
  EXPECT_NEAR(opt.state().m.at("theta").data()[0], 2.12969568031892076316e-1, 1e-10);
  EXPECT_NEAR(opt.state().v.at("theta").data()[0], 1.99647877124840681312e-3, 1e-12);
}

TEST(AdamW, MissingGradientNamesParameter) {
  ParamStore<double> ps;
  ps.emplace("a.weight", Tensord({2}, 1.0));
  ps.emplace("b.bias", Tensord({3}, 1.0));
  AdamW<double> opt(ps);
  Tensord(ps.at("a.weight")).mutable_grad()[0] = 1.0;
  try {
    opt.step(0.1);
    FAIL() << "expected a throw";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("b.bias"), std::string::npos) << e.what();
  }
  EXPECT_EQ(opt.state().step, 0);
  EXPECT_EQ(ps.at("a.weight").data()[0], 1.0);
}

TEST(AdamW, KeepsShapesAndKeys) {
  ParamStore<double> ps;
  ps.emplace("w", Tensord({2, 3}, 0.5));
  ps.emplace("b", Tensord({3}, 0.5));
  AdamW<double> opt(ps);
  for (auto& [n, t] : ps) Tensord(t).mutable_grad()[0] = 1.0;
  opt.step(0.1);
  EXPECT_EQ(ps.at("w").shape(), (Shape{2, 3}));
  EXPECT_EQ(opt.state().m.size(), 2u);
  EXPECT_EQ(opt.state().v.at("w").shape(), (Shape{2, 3}));
}

// ---- schedule ----

TEST(CosineLr, EndpointsAndMidpoint) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 0.005, 5e-5), 0.005);
  EXPECT_DOUBLE_EQ(cosine_lr(100, 100, 0.005, 5e-5), 5e-5);
  EXPECT_NEAR(cosine_lr(50, 100, 0.005, 5e-5), (0.005 + 5e-5) / 2, 1e-15);
  EXPECT_DOUBLE_EQ(cosine_lr(250, 100, 0.005, 5e-5), 5e-5);
  EXPECT_THROW(cosine_lr(-1, 100, 1, 0), std::invalid_argument);
  EXPECT_THROW(cosine_lr(0, 0, 1, 0), std::invalid_argument);
}

TEST(CosineLr, NonIncreasing) {
  for (std::int64_t total : {1, 7, 500}) {
    double prev = cosine_lr(0, total, 1e-3, 1e-5);
    for (std::int64_t s = 1; s <= total; ++s) {
      const double lr = cosine_lr(s, total, 1e-3, 1e-5);
      EXPECT_LE(lr, prev);
      prev = lr;
    }
  }
}

// ---- configuration ----

TEST(TrainConfig, DefaultsAndVariantLearningRates) {
  TrainConfig c;
  EXPECT_EQ(c.batch_size, 4);
  EXPECT_DOUBLE_EQ(c.adamw.beta1, 0.9);
  EXPECT_DOUBLE_EQ(c.adamw.beta2, 0.999);
  EXPECT_DOUBLE_EQ(c.adamw.eps, 1e-8);
  EXPECT_DOUBLE_EQ(c.adamw.weight_decay, 0.001);
  EXPECT_DOUBLE_EQ(c.resolved_base_lr(Variant::kNucleiHVT), 0.005);
  EXPECT_DOUBLE_EQ(c.resolved_base_lr(Variant::kCBNucleiHVT), 0.001);
  EXPECT_DOUBLE_EQ(c.resolved_min_lr(Variant::kNucleiHVT), 0.00005);
  EXPECT_EQ(c.grad_clip, 0.0);
}

TEST(TrainConfig, ListsEveryProblem) {
  TrainConfig c;
  c.total_steps = 0;
  c.batch_size = 0;
  c.adamw.beta2 = 1.5;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("total_steps"), std::string::npos);
    EXPECT_NE(m.find("batch_size"), std::string::npos);
    EXPECT_NE(m.find("beta2"), std::string::npos);
  }
}

TEST(RunConfig, UnknownKeysAndTypeErrorsReportedTogether) {
  const std::string text = R"({"model": {"base_channels": "wide", "colour": 1},
                               "train": {"total_steps": 10, "lr": 0.1, "augment": {"flip": true}},
                               "extra": 0})";
  try {
    RunConfig::parse(text);
    FAIL();
  } catch (const ConfigError& e) {
    const std::string m = e.what();
    for (const char* key : {"model.base_channels", "model.colour", "train.lr", "train.augment.flip", "extra"}) {
      EXPECT_NE(m.find(key), std::string::npos) << key << " missing from:\n" << m;
    }
  }
}

TEST(RunConfig, SemanticErrorsCarrySection) {
  try {
    RunConfig::parse(R"({"train": {"batch_size": 0}, "model": {"window": 0}})");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("train: batch_size"), std::string::npos) << m;
    EXPECT_NE(m.find("model: "), std::string::npos) << m;
  }
}

TEST(RunConfig, DumpParseRoundTrip) {
  RunConfig rc;
  rc.model = tiny(Variant::kCBNucleiHVT);
  rc.model.decoder = DecoderKind::kUperNet;
  rc.train = quick(37, 3);
  rc.train.augment.rotation_deg = 7.5;
  rc.train.loss.dice = 2.0;
  rc.data.train = "data/train";
  rc.deterministic = true;
  const std::string text = rc.dump();
  EXPECT_EQ(RunConfig::parse(text).dump(), text);
  const RunConfig back = RunConfig::parse(text);
  EXPECT_EQ(back.model.variant, Variant::kCBNucleiHVT);
  EXPECT_EQ(back.train.total_steps, 37);
  EXPECT_DOUBLE_EQ(back.train.augment.rotation_deg, 7.5);
  EXPECT_TRUE(back.deterministic);
}

TEST(RunConfig, EmptyDocumentGivesDefaults) {
  const RunConfig rc = RunConfig::parse("{}");
  EXPECT_EQ(rc.model.base_channels, ModelConfig::toy().base_channels);
  EXPECT_EQ(rc.train.batch_size, 4);
  EXPECT_THROW(RunConfig::parse("{not json"), ConfigError);
}

// ---- batches ----

TEST(Batches, EachEpochVisitsEverySampleOnce) {
  const std::size_t n = 7;
  std::vector<std::size_t> drawn;
  for (std::int64_t s = 0; s < 7; ++s) {
    const auto b = batch_indices(5, s, 3, n);
    drawn.insert(drawn.end(), b.begin(), b.end());
  }
  for (std::size_t e = 0; e < 3; ++e) {
    std::set<std::size_t> epoch(drawn.begin() + static_cast<std::ptrdiff_t>(e * n),
                                drawn.begin() + static_cast<std::ptrdiff_t>((e + 1) * n));
    EXPECT_EQ(epoch.size(), n);
  }
  EXPECT_EQ(batch_indices(5, 4, 3, n), batch_indices(5, 4, 3, n));
  EXPECT_NE(batch_indices(5, 0, 7, n), batch_indices(6, 0, 7, n));
}

// ---- checkpoints ----

TEST(Checkpoint, RoundTripIsBitwiseAndByteIdentical) {
  auto m = build_model<float>(tiny());
  Checkpoint c = capture(*m);
  c.step = 12;
  c.seed = 99;
  c.train = quick(20);
  OptimState<float> s;
  s.step = 12;
  for (const auto& [n, t] : c.params) {
    s.m.emplace(n, Tensorf(t.shape(), 0.25f));
    s.v.emplace(n, Tensorf(t.shape(), 1e-30f));
  }
  c.optim = s;
  const fs::path dir = scratch("roundtrip");
  save_checkpoint(dir / "a.nhvt", c);
  const Checkpoint back = load_checkpoint(dir / "a.nhvt");
  save_checkpoint(dir / "b.nhvt", back);
  EXPECT_EQ(file_bytes(dir / "a.nhvt"), file_bytes(dir / "b.nhvt"));
  EXPECT_EQ(back.step, 12);
  EXPECT_EQ(back.seed, 99u);
  ASSERT_TRUE(back.optim.has_value());
  EXPECT_EQ(back.optim->step, 12);
  ASSERT_EQ(back.params.size(), c.params.size());
  for (const auto& [n, t] : c.params) {
    const auto a = t.data(), b = back.params.at(n).data();
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end())) << n;
  }
  EXPECT_FALSE(fs::exists(dir / "a.nhvt.tmp"));
}

TEST(Checkpoint, FileStartsWithMagicAndVersion) {
  auto bytes = serialize(capture(*build_model<float>(tiny())));
  ASSERT_GT(bytes.size(), 13u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "NHVT");
  EXPECT_EQ(bytes[4], kCheckpointVersion);
}

TEST(Checkpoint, RejectsBadMagicVersionAndTruncation) {
  const auto good = serialize(capture(*build_model<float>(tiny())));
  auto bad = good;
  bad[0] = 'X';
  EXPECT_THROW(deserialize(bad), DataError);
  bad = good;
  bad[4] = 9;
  try {
    deserialize(bad);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("version 9"), std::string::npos);
  }
  bad.assign(good.begin(), good.end() - 5);
  EXPECT_THROW(deserialize(bad), DataError);
}

TEST(Checkpoint, MissingTensorIsNamed) {
  auto m = build_model<float>(tiny());
  Checkpoint c = capture(*m);
  c.params.erase("dec.head.bias");
  try {
    load_weights(*m, c);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("dec.head.bias"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, ShapeMismatchIsNamedAndLeavesModelUntouched) {
  auto small = build_model<float>(tiny());
  ModelConfig wide = tiny();
  wide.base_channels = 8;
  auto big = build_model<float>(wide);
  const auto before = big->parameters().begin()->second.clone();
  try {
    load_weights(*big, capture(*small));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos) << e.what();
  }
  const auto after = big->parameters().begin()->second.data();
  EXPECT_TRUE(std::equal(after.begin(), after.end(), before.data().begin()));
}

TEST(Checkpoint, EncoderPrefixMapIntoChannelBoostedModel) {
  ModelConfig src_cfg = tiny();
  src_cfg.seed = 21;
  auto src = build_model<float>(src_cfg);
  auto dst = build_model<float>(tiny(Variant::kCBNucleiHVT));
  Checkpoint c = capture(*src);
  for (auto* store : {&c.params, &c.buffers}) {
    for (auto it = store->begin(); it != store->end();) {
      it = it->first.rfind("enc.", 0) == 0 ? std::next(it) : store->erase(it);
    }
  }
  const auto untouched = dst->parameters().at("enc_b.s1.0.block_attn.attn.proj.weight").clone();
  load_weights(*dst, c, {{"enc.", "enc_a."}});
  std::size_t mapped = 0;
  for (const auto& [name, t] : src->parameters()) {
    if (name.rfind("enc.", 0) != 0) continue;
    const auto a = t.data();
    const auto b = dst->parameters().at("enc_a." + name.substr(4)).data();
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end())) << name;
    ++mapped;
  }
  EXPECT_GT(mapped, 10u);
  const auto now = dst->parameters().at("enc_b.s1.0.block_attn.attn.proj.weight").data();
  EXPECT_TRUE(std::equal(now.begin(), now.end(), untouched.data().begin()));
}

// ---- training ----

TEST(Train, ZeroLearningRateLeavesParameters) {
  auto m = build_model<float>(tiny());
  const Checkpoint before = capture(*m);
  TrainConfig c = quick(3);
  c.base_lr = 0.0;
  c.min_lr = 0.0;
  const auto r = train(*m, blobs(2, 32, 1), c, NormStats{});
  ASSERT_FALSE(r.diverged) << r.message;
  ASSERT_EQ(r.log.size(), 3u);
  for (const auto& [n, t] : m->parameters()) {
    const auto a = t.data(), b = before.params.at(n).data();
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end())) << n;
  }
}

TEST(Train, LossDecreasesOnFixedBatch) {
  auto m = build_model<float>(tiny());
  TrainConfig c = quick(20);
  c.min_lr = 1e-3;
  c.augment = AugmentPolicy::none();
  const auto r = train(*m, blobs(2, 32, 2), c, NormStats{});
  ASSERT_EQ(r.log.size(), 20u) << r.message;
  for (std::size_t i = 1; i < r.log.size(); ++i) {
    EXPECT_LT(r.log[i].loss, r.log[i - 1].loss) << "step " << r.log[i].step;
  }
  EXPECT_DOUBLE_EQ(r.log[0].lr, 1e-3);
}

TEST(Train, SameSeedGivesIdenticalLogAndCheckpoint) {
  const auto data = blobs(3, 32, 4);
  const fs::path dir = scratch("determinism");
  std::vector<std::vector<LogEntry>> logs;
  for (const char* name : {"a.nhvt", "b.nhvt"}) {
    auto m = build_model<float>(tiny());
    TrainHooks h;
    h.checkpoint_path = dir / name;
    logs.push_back(train(*m, data, quick(4), NormStats{}, h).log);
  }
  ASSERT_EQ(logs[0].size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(format_log_line(logs[0][i]), format_log_line(logs[1][i]));
  EXPECT_EQ(file_bytes(dir / "a.nhvt"), file_bytes(dir / "b.nhvt"));
}

TEST(Train, ResumeReproducesUninterruptedRun) {
  const auto data = blobs(3, 32, 5);
  const fs::path dir = scratch("resume");
  TrainConfig c = quick(6);
  c.eval_interval = 3;
  auto full_model = build_model<float>(tiny());
  TrainHooks h;
  h.checkpoint_path = dir / "run.nhvt";
  h.on_step = [&](const LogEntry& e) {
    if (e.step == 3) fs::copy_file(dir / "run.nhvt", dir / "mid.nhvt");
  };
  const auto full = train(*full_model, data, c, NormStats{}, h);
  ASSERT_EQ(full.log.size(), 6u);

  const Checkpoint mid = load_checkpoint(dir / "mid.nhvt");
  EXPECT_EQ(mid.step, 3);
  auto resumed_model = build_model<float>(mid.model);
  TrainHooks h2;
  h2.checkpoint_path = dir / "resumed.nhvt";
  const auto resumed = train(*resumed_model, data, c, NormStats{}, h2, &mid);
  ASSERT_EQ(resumed.log.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(format_log_line(resumed.log[i]), format_log_line(full.log[i + 3]));
  EXPECT_EQ(file_bytes(dir / "resumed.nhvt"), file_bytes(dir / "run.nhvt"));

  TrainConfig other = c;
  other.seed = 12;
  EXPECT_THROW(train(*resumed_model, data, other, NormStats{}, {}, &mid), std::invalid_argument);
}

TEST(Train, NonFiniteLossKeepsLastGoodCheckpoint) {
  const auto data = blobs(2, 32, 6);
  const fs::path dir = scratch("diverge");
  auto m = build_model<float>(tiny());
  TrainConfig c = quick(8);
  c.eval_interval = 1;
  TrainHooks h;
  h.checkpoint_path = dir / "run.nhvt";
  h.on_step = [&](const LogEntry& e) {
    if (e.step == 3) Tensorf(m->head().bias).data()[0] = std::numeric_limits<float>::quiet_NaN();
  };
  const auto r = train(*m, data, c, NormStats{}, h);
  EXPECT_TRUE(r.diverged);
  EXPECT_EQ(r.log.size(), 3u);
  EXPECT_NE(r.message.find("step 4"), std::string::npos) << r.message;
  const Checkpoint kept = load_checkpoint(dir / "run.nhvt");
  EXPECT_EQ(kept.step, 3);
  for (const auto& [n, t] : kept.params) {
    for (float v : t.data()) ASSERT_TRUE(std::isfinite(v)) << n;
  }
}

TEST(Train, RejectsEmptyDatasetAndBadMasks) {
  auto m = build_model<float>(tiny());
  EXPECT_THROW(train(*m, {}, quick(1), NormStats{}), DataError);
  auto data = blobs(1, 32, 7);
  data[0].mask.at(0, 0) = 5;
  EXPECT_THROW(train(*m, data, quick(1), NormStats{}), DataError);
}

TEST(LogLine, StepLrLoss) {
  EXPECT_EQ(format_log_line({7, 0.005, 0.25}), "7 0.005 0.25");
}

// ---- evaluation ----

TEST(Evaluate, AllBackgroundIsPerfectAndOrderInvariant) {
  auto m = build_model<float>(tiny());
  auto head_b = Tensorf(m->head().bias).data();
  head_b[0] = 1e4f;
  head_b[1] = -1e4f;
  std::vector<Sample> data;
  for (int i = 0; i < 3; ++i) {
    Sample s = blobs(1, 32, 8 + i)[0];
    for (auto& v : s.mask.pixels) v = 0;
    data.push_back(s);
  }
  const MetricsReport r = evaluate(*m, data, NormStats{});
  EXPECT_DOUBLE_EQ(r.mdice, 1.0);
  EXPECT_DOUBLE_EQ(r.miou, 1.0);

  auto mixed = blobs(4, 32, 20);
  const MetricsReport a = evaluate(*m, mixed, NormStats{});
  std::reverse(mixed.begin(), mixed.end());
  const MetricsReport b = evaluate(*m, mixed, NormStats{});
  EXPECT_EQ(a.confusion, b.confusion);
  EXPECT_EQ(a.mdice, b.mdice);
  EXPECT_THROW(evaluate(*m, {}, NormStats{}), DataError);
}

TEST(Predict, HandlesSizesTheNetworkCannotTakeDirectly) {
  auto m = build_model<float>(tiny());
  for (auto [h, w] : {std::pair<std::int64_t, std::int64_t>{37, 50}, {20, 20}, {32, 48}}) {
    Tensorf img({3, h, w}, 0.5f);
    const Image out = predict(*m, img, NormStats{});
    EXPECT_EQ(out.height, h);
    EXPECT_EQ(out.width, w);
    EXPECT_EQ(out.channels, 1);
    for (auto v : out.pixels) EXPECT_LT(v, 2);
  }
  EXPECT_TRUE(m->training());
}
