// nhvt: prepare data, train, evaluate and inspect NucleiHVT models.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error
// (unreadable/missing files, bad checkpoints, shape mismatches), 3 numeric
// failure (divergence, failed gradient check).

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "nhvt/config.hpp"
#include "nhvt/datapipe.hpp"
#include "nhvt/gradcheck_suite.hpp"
#include "nhvt/metrics.hpp"
#include "nhvt/models.hpp"
#include "nhvt/runtime.hpp"
#include "nhvt/trainer.hpp"

namespace fs = std::filesystem;
using namespace nhvt;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kDataError = 2, kNumeric = 3 };

struct NumericFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
  cmd->add_option("--config", c.config, "run configuration (JSON)");
  cmd->add_option("--seed", c.seed, "overrides train.seed and model.seed");
  cmd->add_flag("--deterministic", c.deterministic, "single-threaded kernels; byte-reproducible outputs");
  auto* o = cmd->add_option("--out", c.out, "output directory; nothing is written elsewhere");
  if (out_required) o->required();
}

RunConfig load_config(const Common& c) {
  RunConfig rc = c.config.empty() ? RunConfig{} : RunConfig::load(c.config);
  if (c.seed) {
    rc.train.seed = *c.seed;
    rc.model.seed = *c.seed;
  }
  if (c.deterministic) rc.deterministic = true;
  if (rc.deterministic) kernels::set_worker_count(1);
  return rc;
}

fs::path out_dir(const Common& c) {
  fs::create_directories(c.out);
  return c.out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw DataError("cannot write " + path.string());
}

// Normalisation for a dataset directory: explicit path, else <dir>/norm.txt.
NormStats norm_for(const RunConfig& rc, const std::string& dataset_dir) {
  fs::path p = rc.data.norm;
  if (p.empty()) p = fs::path(dataset_dir) / "norm.txt";
  return NormStats::load(p);
}

std::unique_ptr<SegmentationModel<float>> model_from_checkpoint(const Checkpoint& ckpt) {
  auto m = build_model<float>(ckpt.model);
  load_weights(*m, ckpt);
  return m;
}

NormStats inference_norm(const Checkpoint& ckpt, const RunConfig& rc) {
  if (ckpt.norm) return *ckpt.norm;
  if (!rc.data.norm.empty()) return NormStats::load(rc.data.norm);
  if (!rc.data.train.empty()) return norm_for(rc, rc.data.train);
  throw DataError("checkpoint carries no normalisation stats and the config names none");
}

// ---- prepare ----

struct PrepareArgs {
  std::string input;
  int synthetic = 0;
  std::int64_t synthetic_size = 64;
  std::int64_t size = 256;
  std::int64_t stride = 0;
  int classes = 0;
};

int cmd_prepare(const Common& c, const PrepareArgs& a) {
  const RunConfig rc = load_config(c);
  const int k = a.classes > 0 ? a.classes : rc.model.num_classes;
  const std::int64_t stride = a.stride > 0 ? a.stride : a.size;
  if (a.size <= 0) throw std::invalid_argument("--size must be > 0");
  if (a.input.empty() == (a.synthetic == 0)) throw std::invalid_argument("give exactly one of --input or --synthetic");

  std::vector<NamedPair> sources;
  std::size_t failed = 0;
  if (a.synthetic > 0) {
    Rng rng(mix_seed(rc.train.seed, 7, 0));
    for (int i = 0; i < a.synthetic; ++i) {
      char stem[32];
      std::snprintf(stem, sizeof stem, "syn%03d", i);
      sources.push_back(synthetic_pair(a.synthetic_size, a.synthetic_size, k, rng, stem));
    }
  } else {
    const fs::path images = fs::path(a.input) / "images", masks = fs::path(a.input) / "masks";
    if (!fs::is_directory(images)) throw DataError("input has no images/ directory: " + images.string());
    std::vector<std::string> stems;
    for (const auto& e : fs::directory_iterator(images)) {
      if (e.path().extension() == ".ppm") stems.push_back(e.path().stem().string());
    }
    std::sort(stems.begin(), stems.end());
    if (stems.empty()) throw DataError("no .ppm images in " + images.string());
    for (const auto& stem : stems) {
      try {
        NamedPair p{stem, read_ppm(images / (stem + ".ppm")), read_mask(masks / (stem + ".pgm"), k)};
        if (p.image.height != p.mask.height || p.image.width != p.mask.width) {
          throw DataError("image and mask sizes differ");
        }
        sources.push_back(std::move(p));
      } catch (const std::exception& e) {
        std::cerr << "skipping " << stem << ": " << e.what() << "\n";
        ++failed;
      }
    }
    if (sources.empty()) throw DataError("every input pair failed to load");
  }

  std::vector<NamedPair> patches;
  std::vector<Tensorf> tensors;
  for (const auto& s : sources) {
    for (auto& p : extract_patches(s.image, s.mask, a.size, stride, s.stem)) {
      tensors.push_back(image_to_tensor(p.image));
      patches.push_back({p.name(), std::move(p.image), std::move(p.mask)});
    }
  }
  const fs::path out = out_dir(c);
  write_dataset(out, patches);
  std::string warning;
  const NormStats ns = compute_norm_stats(tensors, &warning);
  if (!warning.empty()) std::cerr << "warning: " << warning << "\n";
  ns.save(out / "norm.txt");
  std::cout << sources.size() << " source pair(s) -> " << patches.size() << " patch(es) in " << out.string() << "\n";
  if (failed > 0) std::cout << failed << " input pair(s) skipped\n";
  return kOk;
}

// ---- train ----

struct TrainArgs {
  std::string resume;
  std::int64_t steps = 0;
};

int cmd_train(const Common& c, const TrainArgs& a) {
  if (c.config.empty()) throw std::invalid_argument("train needs --config");
  RunConfig rc = load_config(c);
  if (a.steps > 0) rc.train.total_steps = a.steps;
  if (rc.data.train.empty()) throw ConfigError("config: data.train is required for training");
  std::vector<std::string> missing;
  if (!fs::is_directory(rc.data.train)) missing.push_back("data.train: no such directory " + rc.data.train);
  if (!rc.data.norm.empty() && !fs::exists(rc.data.norm)) missing.push_back("data.norm: no such file " + rc.data.norm);
  if (!missing.empty()) {
    std::string msg = "invalid config:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw ConfigError(msg);
  }

  const Dataset ds = Dataset::open(rc.data.train);
  const auto samples = load_samples(ds, rc.model.num_classes);
  NormStats norm;
  if (rc.data.norm.empty() && !fs::exists(fs::path(rc.data.train) / "norm.txt")) {
    std::vector<Tensorf> imgs;
    for (const auto& s : samples) imgs.push_back(s.image);
    std::string warning;
    norm = compute_norm_stats(imgs, &warning);
    std::cerr << "note: no norm.txt; using statistics of the training set\n";
    if (!warning.empty()) std::cerr << "warning: " << warning << "\n";
  } else {
    norm = norm_for(rc, rc.data.train);
  }

  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) {
    resume = load_checkpoint(a.resume);
    rc.model = resume->model;
  }
  auto model = build_model<float>(rc.model);

  const fs::path out = out_dir(c);
  write_text(out / "config.json", rc.dump());
  std::ofstream log(out / "loss.log", std::ios::binary);
  TrainHooks hooks;
  hooks.checkpoint_path = out / "checkpoint.nhvt";
  hooks.on_step = [&](const LogEntry& e) {
    log << format_log_line(e) << '\n';
    log.flush();
    if (e.step % 25 == 0 || e.step == rc.train.total_steps) std::cout << format_log_line(e) << std::endl;
  };
  const TrainResult r = train(*model, samples, rc.train, norm, hooks, resume ? &*resume : nullptr);
  if (r.diverged) throw NumericFailure(r.message);
  std::cout << "checkpoint: " << hooks.checkpoint_path.string() << "\n";
  return kOk;
}

// ---- eval / predict / errormap ----

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string image;
  std::string pred, truth;
};

int cmd_eval(const Common& c, const EvalArgs& a) {
  const RunConfig rc = load_config(c);
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  std::string dir = a.data;
  if (dir.empty()) dir = !rc.data.val.empty() ? rc.data.val : rc.data.train;
  if (dir.empty()) throw std::invalid_argument("eval needs --data or a config naming data.val / data.train");
  auto model = model_from_checkpoint(ckpt);
  const auto samples = load_samples(Dataset::open(dir), ckpt.model.num_classes);
  const MetricsReport r = evaluate(*model, samples, inference_norm(ckpt, rc));
  std::cout << format_table(r);
  if (!c.out.empty()) {
    const fs::path out = out_dir(c);
    write_text(out / "metrics.txt", format_kv(r));
    write_text(out / "metrics_table.txt", format_table(r));
  }
  return kOk;
}

int cmd_predict(const Common& c, const EvalArgs& a) {
  const RunConfig rc = load_config(c);
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  auto model = model_from_checkpoint(ckpt);
  const Image mask = predict(*model, image_to_tensor(read_ppm(a.image)), inference_norm(ckpt, rc));
  const fs::path path = out_dir(c) / (fs::path(a.image).stem().string() + "_pred.pgm");
  write_mask(path, mask);
  std::cout << path.string() << "\n";
  return kOk;
}

int cmd_errormap(const Common& c, const EvalArgs& a) {
  load_config(c);
  const Image pred = read_mask(a.pred), truth = read_mask(a.truth);
  if (pred.height != truth.height || pred.width != truth.width) {
    throw DataError("prediction and truth sizes differ");
  }
  const fs::path path = out_dir(c) / (fs::path(a.pred).stem().string() + "_errors.ppm");
  write_ppm(path, render_error_map(pred, truth));
  std::cout << path.string() << "\n";
  return kOk;
}

// ---- gradcheck / summary ----

int cmd_gradcheck(const Common& c, const std::string& scope) {
  load_config(c);
  std::cout << format_gradcheck_table({}).substr(0, format_gradcheck_table({}).find('\n') + 1);
  const auto rows = run_gradcheck_suite(scope, [](const GradCheckRow& r) {
    const std::string table = format_gradcheck_table({r});
    std::cout << table.substr(table.find('\n') + 1) << std::flush;
  });
  std::size_t failed = 0;
  for (const auto& r : rows) failed += r.pass() ? 0 : 1;
  if (!c.out.empty()) write_text(out_dir(c) / "gradcheck.txt", format_gradcheck_table(rows));
  if (failed > 0) {
    std::ostringstream msg;
    msg << failed << " of " << rows.size() << " rows exceed " << kGradCheckTolerance << ":";
    for (const auto& r : rows) {
      if (!r.pass()) msg << "\n  " << r.group << "/" << r.name << " " << r.worst;
    }
    throw NumericFailure(msg.str());
  }
  return kOk;
}

int cmd_summary(const Common& c, std::int64_t size) {
  const RunConfig rc = load_config(c);
  const ModelConfig& m = rc.model;
  try {
    check_input_shape(m, {1, m.in_channels, size, size});
  } catch (const ShapeError& e) {
    throw std::invalid_argument(std::string("--size: ") + e.what());
  }
  auto model = build_model<float>(m);
  std::map<std::string, std::int64_t> groups;
  for (const auto& [name, t] : model->parameters()) groups[name.substr(0, name.find('.'))] += t.numel();
  const std::int64_t params = param_count(m);
  const std::int64_t flops = flop_estimate(m, {1, m.in_channels, size, size});
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "model        %s / %s decoder, C=%lld, window %d\n", to_string(m.variant).c_str(),
                to_string(m.decoder).c_str(), static_cast<long long>(m.base_channels), m.window);
  out << buf;
  std::snprintf(buf, sizeof buf, "parameters   %lld (%.3f M)\n", static_cast<long long>(params), params / 1e6);
  out << buf;
  for (const auto& [g, n] : groups) {
    std::snprintf(buf, sizeof buf, "  %-10s %lld\n", g.c_str(), static_cast<long long>(n));
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "flops        %lld (%.3f G) at 1x%lldx%lldx%lld\n", static_cast<long long>(flops),
                flops / 1e9, static_cast<long long>(m.in_channels), static_cast<long long>(size),
                static_cast<long long>(size));
  out << buf;
  std::cout << out.str();
  if (!c.out.empty()) write_text(out_dir(c) / "summary.txt", out.str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NucleiHVT segmentation toolkit"};
  app.require_subcommand(1);

  Common common;
  PrepareArgs prep;
  TrainArgs tr;
  EvalArgs ev;
  std::string scope = "all";
  std::int64_t summary_size = 256;

  auto* prepare = app.add_subcommand("prepare", "tile raw image/mask pairs into a patch dataset");
  add_common(prepare, common, true);
  prepare->add_option("--input", prep.input, "raw directory with images/*.ppm and masks/*.pgm");
  prepare->add_option("--synthetic", prep.synthetic, "generate this many synthetic pairs instead of --input");
  prepare->add_option("--synthetic-size", prep.synthetic_size, "side of each synthetic pair");
  prepare->add_option("--size", prep.size, "patch side")->capture_default_str();
  prepare->add_option("--stride", prep.stride, "patch stride (default: size)");
  prepare->add_option("--classes", prep.classes, "number of classes (default: model.num_classes)");

  auto* trn = app.add_subcommand("train", "train a model; writes loss.log, checkpoint.nhvt, config.json");
  add_common(trn, common, true);
  trn->add_option("--resume", tr.resume, "continue from this checkpoint");
  trn->add_option("--steps", tr.steps, "overrides train.total_steps");

  auto* evl = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_common(evl, common, false);
  evl->add_option("--checkpoint", ev.checkpoint)->required();
  evl->add_option("--data", ev.data, "dataset directory (default: data.val, then data.train)");

  auto* prd = app.add_subcommand("predict", "segment one PPM image; writes <stem>_pred.pgm");
  add_common(prd, common, true);
  prd->add_option("--checkpoint", ev.checkpoint)->required();
  prd->add_option("--image", ev.image)->required();

  auto* err = app.add_subcommand("errormap", "colour-code prediction errors; writes <stem>_errors.ppm");
  add_common(err, common, true);
  err->add_option("--pred", ev.pred)->required();
  err->add_option("--truth", ev.truth)->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks at 64-bit precision");
  add_common(gc, common, false);
  gc->add_option("--scope", scope, "ops, loss, blocks, model or all")->capture_default_str();

  auto* sum = app.add_subcommand("summary", "parameter and FLOP report for a configuration");
  add_common(sum, common, false);
  sum->add_option("--size", summary_size, "input side for the FLOP estimate")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*prepare) return cmd_prepare(common, prep);
    if (*trn) return cmd_train(common, tr);
    if (*evl) return cmd_eval(common, ev);
    if (*prd) return cmd_predict(common, ev);
    if (*err) return cmd_errormap(common, ev);
    if (*gc) return cmd_gradcheck(common, scope);
    if (*sum) return cmd_summary(common, summary_size);
  } catch (const NumericFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  }
  return kUsage;
}
