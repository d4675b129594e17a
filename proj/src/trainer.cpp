#include "nhvt/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

#include "config_json.hpp"
#include "nhvt/ops.hpp"

namespace nhvt {

namespace fs = std::filesystem;

// ---- optimizer ----

template <typename T>
AdamW<T>::AdamW(ParamStore<T> params, AdamWOptions options) : params_(std::move(params)) {
  state_.options = options;
  for (const auto& [name, p] : params_) {
    state_.m.emplace(name, Tensor<T>(p.shape()));
    state_.v.emplace(name, Tensor<T>(p.shape()));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  for (const auto& [name, p] : params_) {
    if (!p.has_grad()) throw std::invalid_argument("AdamW: parameter '" + name + "' has no gradient");
  }
  const AdamWOptions& o = state_.options;
  const std::int64_t t = ++state_.step;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(t));
  for (auto& [name, p] : params_) {
    auto theta = Tensor<T>(p).data();
    const auto g = p.grad();
    auto m = state_.m.at(name).data();
    auto v = state_.v.at(name).data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g[i];
      const double mi = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
      const double vi = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / c1) / (std::sqrt(vi / c2) + o.eps) + o.weight_decay * theta[i];
      theta[i] = static_cast<T>(theta[i] - lr * update);
    }
  }
}

template <typename T>
void AdamW<T>::load_state(const OptimState<T>& s) {
  if (s.step < 0) throw std::invalid_argument("optimizer step must be >= 0");
  for (const auto& [name, p] : params_) {
    for (const auto* store : {&s.m, &s.v}) {
      auto it = store->find(name);
      if (it == store->end()) throw DataError("optimizer state lacks moments for '" + name + "'");
      if (it->second.shape() != p.shape()) {
        throw DataError("optimizer moment shape mismatch for '" + name + "': " + to_string(it->second.shape()) +
                        " vs " + to_string(p.shape()));
      }
    }
  }
  if (s.m.size() != params_.size() || s.v.size() != params_.size()) {
    throw DataError("optimizer state holds moments for unknown parameters");
  }
  state_.options = s.options;
  state_.step = s.step;
  for (auto& [name, p] : params_) {
    const auto sm = s.m.at(name).data(), sv = s.v.at(name).data();
    auto m = state_.m.at(name).data(), v = state_.v.at(name).data();
    std::copy(sm.begin(), sm.end(), m.begin());
    std::copy(sv.begin(), sv.end(), v.begin());
  }
}

template class AdamW<float>;
template class AdamW<double>;

double cosine_lr(std::int64_t step, std::int64_t total, double base_lr, double min_lr) {
  if (total <= 0) throw std::invalid_argument("cosine_lr: total must be > 0");
  if (step < 0) throw std::invalid_argument("cosine_lr: step must be >= 0");
  if (step >= total) return min_lr;
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * frac));
}

// ---- configuration ----

double TrainConfig::resolved_base_lr(Variant v) const {
  if (base_lr >= 0) return base_lr;
  return v == Variant::kCBNucleiHVT ? 0.001 : 0.005;
}

double TrainConfig::resolved_min_lr(Variant v) const { return min_lr >= 0 ? min_lr : resolved_base_lr(v) / 100.0; }

void TrainConfig::validate() const {
  std::vector<std::string> errs;
  if (total_steps <= 0) errs.push_back("total_steps must be > 0");
  if (batch_size < 1) errs.push_back("batch_size must be >= 1");
  if (eval_interval < 0) errs.push_back("eval_interval must be >= 0");
  if (!std::isfinite(base_lr)) errs.push_back("base_lr must be finite");
  if (!std::isfinite(min_lr)) errs.push_back("min_lr must be finite");
  if (base_lr >= 0 && min_lr > base_lr) errs.push_back("min_lr must not exceed base_lr");
  if (!(adamw.beta1 >= 0 && adamw.beta1 < 1)) errs.push_back("adamw.beta1 must be in [0, 1)");
  if (!(adamw.beta2 >= 0 && adamw.beta2 < 1)) errs.push_back("adamw.beta2 must be in [0, 1)");
  if (!(adamw.eps > 0)) errs.push_back("adamw.eps must be > 0");
  if (!(adamw.weight_decay >= 0)) errs.push_back("adamw.weight_decay must be >= 0");
  if (!(grad_clip >= 0)) errs.push_back("grad_clip must be >= 0");
  try {
    loss.validate();
  } catch (const std::invalid_argument& e) {
    errs.push_back(std::string("loss_weights: ") + e.what());
  }
  try {
    augment.validate();
  } catch (const std::invalid_argument& e) {
    std::string m = e.what();
    const auto nl = m.find('\n');
    if (nl != std::string::npos) m = m.substr(nl + 1);
    std::size_t pos = 0;
    while (pos < m.size()) {
      const auto end = m.find('\n', pos);
      std::string line = m.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
      line.erase(0, line.find_first_not_of(' '));
      if (!line.empty()) errs.push_back("augment." + line);
      if (end == std::string::npos) break;
      pos = end + 1;
    }
  }
  if (errs.empty()) return;
  std::string msg = "invalid training config:";
  for (const auto& e : errs) msg += "\n  " + e;
  throw ConfigError(msg);
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[4] = {'N', 'H', 'V', 'T'};

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

void put_floats(std::vector<std::uint8_t>& out, std::span<const float> data) {
  for (float f : data) {
    const auto u = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
}

void get_floats(const std::uint8_t* p, std::span<float> data) {
  for (float& f : data) {
    const std::uint32_t u = static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
                            static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
    f = std::bit_cast<float>(u);
    p += 4;
  }
}

struct Section {
  const char* kind;
  const ParamStore<float>* store;
};

}  // namespace

Checkpoint capture(const SegmentationModel<float>& model) {
  Checkpoint c;
  c.model = model.config();
  for (const auto& [name, t] : model.parameters()) c.params.emplace(name, t.clone());
  for (const auto& [name, t] : model.buffers()) c.buffers.emplace(name, t.clone());
  return c;
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  using json_io::json;
  std::vector<Section> sections{{"param", &ckpt.params}, {"buffer", &ckpt.buffers}};
  if (ckpt.optim) {
    sections.push_back({"adam_m", &ckpt.optim->m});
    sections.push_back({"adam_v", &ckpt.optim->v});
  }
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& s : sections) {
    for (const auto& [name, t] : *s.store) {
      tensors.push_back({{"name", name}, {"kind", s.kind}, {"shape", t.shape()}, {"offset", offset}});
      offset += static_cast<std::uint64_t>(t.numel()) * 4;
    }
  }
  json header = {{"format", kCheckpointVersion},
                 {"step", ckpt.step},
                 {"seed", ckpt.seed},
                 {"model", json_io::to_json(ckpt.model)},
                 {"train", ckpt.train ? json_io::to_json(*ckpt.train) : json(nullptr)},
                 {"tensors", tensors}};
  header["norm"] = ckpt.norm ? json{{"mean", ckpt.norm->mean}, {"std", ckpt.norm->std}} : json(nullptr);
  if (ckpt.optim) {
    const auto& o = ckpt.optim->options;
    header["optim"] = {{"step", ckpt.optim->step},
                       {"beta1", o.beta1},
                       {"beta2", o.beta2},
                       {"eps", o.eps},
                       {"weight_decay", o.weight_decay}};
  } else {
    header["optim"] = nullptr;
  }
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(kCheckpointVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& s : sections) {
    for (const auto& [name, t] : *s.store) put_floats(out, t.data());
  }
  return out;
}

Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
  using json_io::json;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw DataError("checkpoint: bad magic (expected NHVT)");
  if (bytes.size() < 13) throw DataError("checkpoint: truncated preamble");
  if (bytes[4] != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(bytes[4]) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t hlen = get_u64(bytes.data() + 5);
  if (hlen > bytes.size() - 13) throw DataError("checkpoint: header length exceeds file size");
  json h;
  try {
    h = json::parse(bytes.begin() + 13, bytes.begin() + 13 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header: ") + e.what());
  }
  const std::uint8_t* blobs = bytes.data() + 13 + hlen;
  const std::uint64_t blob_size = bytes.size() - 13 - hlen;
  Checkpoint c;
  try {
    std::vector<std::string> errors;
    c.model = json_io::model_from_json(h.at("model"), "model", errors);
    if (!h.at("train").is_null()) c.train = json_io::train_from_json(h.at("train"), "train", errors);
    if (!errors.empty()) throw DataError("checkpoint: bad config echo: " + errors.front());
    c.step = h.at("step").get<std::int64_t>();
    c.seed = h.at("seed").get<std::uint64_t>();
    if (!h.at("optim").is_null()) {
      const json& o = h.at("optim");
      OptimState<float> s;
      s.step = o.at("step").get<std::int64_t>();
      s.options = {o.at("beta1").get<double>(), o.at("beta2").get<double>(), o.at("eps").get<double>(),
                   o.at("weight_decay").get<double>()};
      c.optim = std::move(s);
    }
    if (h.contains("norm") && !h.at("norm").is_null()) {
      NormStats ns;
      ns.mean = h.at("norm").at("mean").get<std::array<double, 3>>();
      ns.std = h.at("norm").at("std").get<std::array<double, 3>>();
      c.norm = ns;
    }
    for (const json& t : h.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto kind = t.at("kind").get<std::string>();
      const auto shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::uint64_t>();
      std::int64_t numel = 1;
      for (auto d : shape) {
        if (d < 0) throw DataError("checkpoint: negative extent in tensor '" + name + "'");
        numel *= d;
      }
      if (offset > blob_size || static_cast<std::uint64_t>(numel) * 4 > blob_size - offset) {
        throw DataError("checkpoint: tensor '" + name + "' runs past the end of the file");
      }
      Tensorf v(shape);
      get_floats(blobs + offset, v.data());
      ParamStore<float>* store = nullptr;
      if (kind == "param") store = &c.params;
      if (kind == "buffer") store = &c.buffers;
      if (c.optim && kind == "adam_m") store = &c.optim->m;
      if (c.optim && kind == "adam_v") store = &c.optim->v;
      if (store == nullptr) throw DataError("checkpoint: tensor '" + name + "' has unknown kind '" + kind + "'");
      if (!store->emplace(name, std::move(v)).second) throw DataError("checkpoint: duplicate tensor '" + name + "'");
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header: ") + e.what());
  }
  return c;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize(ckpt);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  try {
    return deserialize(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

namespace {

bool starts_with(const std::string& s, const std::string& prefix) { return s.compare(0, prefix.size(), prefix) == 0; }

void copy_section(const ParamStore<float>& model_side, const ParamStore<float>& ckpt_side, const char* what,
                  const std::map<std::string, std::string>& prefix_map) {
  ParamStore<float> source;
  if (prefix_map.empty()) {
    source = ckpt_side;
  } else {
    for (const auto& [name, t] : ckpt_side) {
      for (const auto& [from, to] : prefix_map) {
        if (starts_with(name, from)) {
          source.emplace(to + name.substr(from.size()), t);
          break;
        }
      }
    }
  }
  auto required = [&](const std::string& name) {
    if (prefix_map.empty()) return true;
    for (const auto& [from, to] : prefix_map) {
      if (starts_with(name, to)) return true;
    }
    return false;
  };
  for (const auto& [name, t] : model_side) {
    if (!required(name)) continue;
    auto it = source.find(name);
    if (it == source.end()) throw DataError(std::string("checkpoint lacks ") + what + " '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw DataError(std::string("shape mismatch for ") + what + " '" + name + "': checkpoint " +
                      to_string(it->second.shape()) + ", model " + to_string(t.shape()));
    }
  }
  for (const auto& [name, t] : source) {
    if (!model_side.count(name)) throw DataError(std::string("checkpoint ") + what + " '" + name + "' has no counterpart in the model");
  }
  for (const auto& [name, t] : source) {
    const auto src = t.data();
    auto dst = Tensorf(model_side.at(name)).data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace

void load_weights(SegmentationModel<float>& model, const Checkpoint& ckpt,
                  const std::map<std::string, std::string>& prefix_map) {
  // Validate both sections before touching anything.
  const auto params = model.parameters(), buffers = model.buffers();
  ParamStore<float> scratch_p, scratch_b;
  for (const auto& [n, t] : params) scratch_p.emplace(n, Tensorf(t.shape()));
  for (const auto& [n, t] : buffers) scratch_b.emplace(n, Tensorf(t.shape()));
  copy_section(scratch_p, ckpt.params, "parameter", prefix_map);
  copy_section(scratch_b, ckpt.buffers, "buffer", prefix_map);
  copy_section(params, ckpt.params, "parameter", prefix_map);
  copy_section(buffers, ckpt.buffers, "buffer", prefix_map);
}

// ---- training ----

std::string format_log_line(const LogEntry& e) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%lld %.9g %.9g", static_cast<long long>(e.step), e.lr, e.loss);
  return buf;
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::int64_t step, std::int64_t batch_size,
                                       std::size_t n) {
  if (n == 0) throw DataError("empty dataset");
  std::vector<std::size_t> out;
  std::int64_t cached_epoch = -1;
  std::vector<std::size_t> perm(n);
  for (std::int64_t j = 0; j < batch_size; ++j) {
    const std::int64_t draw = step * batch_size + j;
    const std::int64_t epoch = draw / static_cast<std::int64_t>(n);
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng rng(mix_seed(seed, 3, static_cast<std::uint64_t>(epoch)));
      rng.shuffle(perm);
      cached_epoch = epoch;
    }
    out.push_back(perm[static_cast<std::size_t>(draw % static_cast<std::int64_t>(n))]);
  }
  return out;
}

namespace {

Tensorf stack_images(const std::vector<Tensorf>& imgs) {
  const Shape& s = imgs.front().shape();
  std::vector<float> v;
  v.reserve(static_cast<std::size_t>(imgs.front().numel()) * imgs.size());
  for (const auto& t : imgs) {
    if (t.shape() != s) throw ShapeError("batch images differ in size: " + to_string(t.shape()) + " vs " + to_string(s));
    v.insert(v.end(), t.data().begin(), t.data().end());
  }
  return Tensorf({static_cast<std::int64_t>(imgs.size()), s[0], s[1], s[2]}, std::move(v));
}

void check_dataset(const std::vector<Sample>& data, int num_classes) {
  if (data.empty()) throw DataError("empty dataset");
  for (const auto& s : data) {
    if (s.image.ndim() != 3 || s.image.dim(0) != 3 || s.mask.height != s.image.dim(1) || s.mask.width != s.image.dim(2)) {
      throw DataError("sample '" + s.id + "': image and mask shapes disagree");
    }
    try {
      validate_mask(s.mask, num_classes);
    } catch (const DataError& e) {
      throw DataError("sample '" + s.id + "': " + e.what());
    }
  }
}

// Global-norm clip; returns the pre-clip norm.
double clip_gradients(const ParamStore<float>& params, double max_norm) {
  double sq = 0;
  for (const auto& [name, p] : params) {
    for (float g : p.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& [name, p] : params) {
      for (float& g : p.mutable_grad()) g = static_cast<float>(g * scale);
    }
  }
  return norm;
}

std::vector<std::vector<float>> snapshot(const ParamStore<float>& store) {
  std::vector<std::vector<float>> out;
  for (const auto& [name, t] : store) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

void restore(const ParamStore<float>& store, const std::vector<std::vector<float>>& snap) {
  std::size_t i = 0;
  for (const auto& [name, t] : store) {
    std::copy(snap[i].begin(), snap[i].end(), Tensorf(t).data().begin());
    ++i;
  }
}

}  // namespace

TrainResult train(SegmentationModel<float>& model, const std::vector<Sample>& data, const TrainConfig& cfg,
                  const NormStats& norm, const TrainHooks& hooks, const Checkpoint* resume) {
  cfg.validate();
  norm.validate();
  const ModelConfig& mc = model.config();
  check_dataset(data, mc.num_classes);
  const double base_lr = cfg.resolved_base_lr(mc.variant), min_lr = cfg.resolved_min_lr(mc.variant);

  const ParamStore<float> params = model.parameters();
  const ParamStore<float> buffers = model.buffers();
  model.set_requires_grad(true);
  model.set_training(true);
  AdamW<float> opt(params, cfg.adamw);
  std::int64_t start = 0;
  if (resume != nullptr) {
    if (resume->seed != cfg.seed) {
      throw std::invalid_argument("resume checkpoint was trained with seed " + std::to_string(resume->seed) +
                                  ", config has " + std::to_string(cfg.seed));
    }
    load_weights(model, *resume);
    if (resume->optim) opt.load_state(*resume->optim);
    start = resume->step;
    if (start > cfg.total_steps) throw std::invalid_argument("resume step lies beyond total_steps");
  }

  auto make_checkpoint = [&](std::int64_t step) {
    Checkpoint c = capture(model);
    c.step = step;
    c.seed = cfg.seed;
    c.train = cfg;
    c.norm = norm;
    OptimState<float> s;
    s.options = opt.state().options;
    s.step = opt.state().step;
    for (const auto& [n, t] : opt.state().m) s.m.emplace(n, t.clone());
    for (const auto& [n, t] : opt.state().v) s.v.emplace(n, t.clone());
    c.optim = std::move(s);
    return c;
  };

  TrainResult result;
  std::int64_t done = start;
  for (std::int64_t s = start; s < cfg.total_steps; ++s) {
    const auto idx = batch_indices(cfg.seed, s, cfg.batch_size, data.size());
    std::vector<Tensorf> imgs;
    std::vector<Image> masks;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      Rng rng(mix_seed(cfg.seed, 2, static_cast<std::uint64_t>(s * cfg.batch_size) + j));
      Sample a = augment(data[idx[j]], rng, cfg.augment);
      imgs.push_back(normalize(a.image, norm));
      masks.push_back(std::move(a.mask));
    }
    const Tensorf x = stack_images(imgs);
    const LabelBatch y = LabelBatch::stack(masks);
    const double lr = cosine_lr(s, cfg.total_steps, base_lr, min_lr);

    const auto saved_buffers = snapshot(buffers);
    Tape<float> tape;
    double loss_value;
    {
      TapeScope<float> scope(tape);
      const Tensorf loss = combined_loss(model.forward(x), y, cfg.loss);
      loss_value = loss.item();
      if (std::isfinite(loss_value)) tape.backward(loss);
    }
    double gnorm = 0;
    if (std::isfinite(loss_value)) gnorm = clip_gradients(params, cfg.grad_clip);
    if (!std::isfinite(loss_value) || !std::isfinite(gnorm)) {
      restore(buffers, saved_buffers);
      model.zero_grad();
      result.diverged = true;
      result.message = "non-finite " + std::string(std::isfinite(loss_value) ? "gradient" : "loss") + " at step " +
                       std::to_string(s + 1) + "; keeping the state after step " + std::to_string(s);
      break;
    }
    opt.step(lr);
    model.zero_grad();
    done = s + 1;
    const LogEntry e{s + 1, lr, loss_value};
    result.log.push_back(e);
    if (done == cfg.total_steps) {
      result.final = make_checkpoint(done);
      if (!hooks.checkpoint_path.empty()) save_checkpoint(hooks.checkpoint_path, result.final);
    } else if (!hooks.checkpoint_path.empty() && cfg.eval_interval > 0 && done % cfg.eval_interval == 0) {
      save_checkpoint(hooks.checkpoint_path, make_checkpoint(done));
    }
    if (hooks.on_step) hooks.on_step(e);
  }
  if (result.diverged || done == start) result.final = make_checkpoint(done);
  return result;
}

Image predict(SegmentationModel<float>& model, const Tensorf& image, const NormStats& norm) {
  if (image.ndim() != 3 || image.dim(0) != 3) throw ShapeError("predict expects a (3, H, W) image");
  const ModelConfig& mc = model.config();
  std::int64_t multiple = 1;
  for (const auto& s : mc.resolved_stages()) multiple *= s.downsample ? 2 : 1;
  const std::int64_t h = image.dim(1), w = image.dim(2);
  auto fit = [&](std::int64_t n) {
    const std::int64_t m = std::max(n, kMinInputSide);
    return (m + multiple - 1) / multiple * multiple;
  };
  const std::int64_t ph = fit(h), pw = fit(w);
  // Reflect-pad bottom/right so any image size can be segmented.
  const Tensorf x0 = normalize(image, norm);
  std::vector<float> buf(static_cast<std::size_t>(3 * ph * pw));
  const auto src = x0.data();
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < ph; ++y)
      for (std::int64_t xx = 0; xx < pw; ++xx)
        buf[static_cast<std::size_t>((c * ph + y) * pw + xx)] =
            src[static_cast<std::size_t>((c * h + reflect_index(y, h)) * w + reflect_index(xx, w))];
  const bool was_training = model.training();
  model.set_training(false);
  LabelBatch labels;
  {
    TapeScope<float> off(nullptr);
    labels = argmax_labels(model.forward(Tensorf({1, 3, ph, pw}, std::move(buf))));
  }
  model.set_training(was_training);
  Image out(h, w, 1);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t xx = 0; xx < w; ++xx) out.at(y, xx) = labels.labels[static_cast<std::size_t>(y * pw + xx)];
  return out;
}

MetricsReport evaluate(SegmentationModel<float>& model, const std::vector<Sample>& data, const NormStats& norm) {
  const int k = model.config().num_classes;
  check_dataset(data, k);
  ConfusionMatrix cm(k);
  for (const auto& s : data) cm.add(LabelBatch::from_mask(predict(model, s.image, norm)), LabelBatch::from_mask(s.mask));
  return cm.report();
}

}  // namespace nhvt
