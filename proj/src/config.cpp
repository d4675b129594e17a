#include "nhvt/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "config_json.hpp"

namespace nhvt {

namespace json_io {

namespace {

// Typed access to one JSON object; records type errors and unknown keys.
class Fields {
 public:
  Fields(const json& j, std::string path, std::vector<std::string>& errors)
      : j_(j), path_(std::move(path)), errors_(errors) {
    if (!j_.is_object()) {
      errors_.push_back(path_ + ": expected an object");
      ok_ = false;
    }
  }

  ~Fields() {
    if (!ok_) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) errors_.push_back(at(key) + ": unknown key");
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return ok_ && j_.contains(key);
  }
  const json& raw(const std::string& key) const { return j_.at(key); }
  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::vector<std::string>& errors() { return errors_; }

  void get(const std::string& key, bool& out) { read(key, out, "a boolean", [](const json& v) { return v.is_boolean(); }); }
  void get(const std::string& key, double& out) { read(key, out, "a number", [](const json& v) { return v.is_number(); }); }
  void get(const std::string& key, std::string& out) {
    read(key, out, "a string", [](const json& v) { return v.is_string(); });
  }
  void get(const std::string& key, int& out) { read(key, out, "an integer", [](const json& v) { return v.is_number_integer(); }); }
  void get(const std::string& key, std::int64_t& out) {
    read(key, out, "an integer", [](const json& v) { return v.is_number_integer(); });
  }
  void get(const std::string& key, std::uint64_t& out) {
    read(key, out, "a non-negative integer", [](const json& v) { return v.is_number_unsigned(); });
  }

 private:
  template <typename T, typename Check>
  void read(const std::string& key, T& out, const char* what, Check check) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!check(v)) {
      errors_.push_back(at(key) + ": expected " + std::string(what) + ", got " + v.dump());
      return;
    }
    out = v.get<T>();
  }

  const json& j_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
  bool ok_ = true;
};

}  // namespace

json to_json(const ModelConfig& c) {
  json stages = json::array();
  for (const auto& s : c.stages) {
    stages.push_back({{"channels", s.channels},
                      {"conv_kernels", s.conv_kernels},
                      {"dilation", s.dilation},
                      {"has_maxvit", s.has_maxvit},
                      {"downsample", s.downsample}});
  }
  return {{"variant", to_string(c.variant)},
          {"in_channels", c.in_channels},
          {"num_classes", c.num_classes},
          {"base_channels", c.base_channels},
          {"stages", stages},
          {"window", c.window},
          {"use_rel_bias", c.use_rel_bias},
          {"maxvit_depth", c.maxvit_depth},
          {"mbconv_expansion", c.mbconv_expansion},
          {"se_ratio", c.se_ratio},
          {"decoder", to_string(c.decoder)},
          {"seed", c.seed}};
}

json to_json(const AugmentPolicy& p) {
  return {{"flip_h", p.flip_h},
          {"flip_h_prob", p.flip_h_prob},
          {"flip_v", p.flip_v},
          {"flip_v_prob", p.flip_v_prob},
          {"affine", p.affine},
          {"rotation_deg", p.rotation_deg},
          {"translate", p.translate},
          {"scale_min", p.scale_min},
          {"scale_max", p.scale_max},
          {"photometric", p.photometric},
          {"brightness", p.brightness},
          {"contrast", p.contrast},
          {"saturation", p.saturation}};
}

json to_json(const TrainConfig& c) {
  return {{"base_lr", c.base_lr},
          {"min_lr", c.min_lr},
          {"total_steps", c.total_steps},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"eval_interval", c.eval_interval},
          {"loss_weights", {{"ce", c.loss.ce}, {"dice", c.loss.dice}}},
          {"adamw",
           {{"beta1", c.adamw.beta1},
            {"beta2", c.adamw.beta2},
            {"eps", c.adamw.eps},
            {"weight_decay", c.adamw.weight_decay}}},
          {"grad_clip", c.grad_clip},
          {"augment", to_json(c.augment)}};
}

ModelConfig model_from_json(const json& j, const std::string& path, std::vector<std::string>& errors) {
  ModelConfig c = ModelConfig::toy();
  Fields f(j, path, errors);
  std::string variant = to_string(c.variant), decoder = to_string(c.decoder);
  f.get("variant", variant);
  try {
    c.variant = parse_variant(variant);
  } catch (const std::invalid_argument& e) {
    errors.push_back(f.at("variant") + ": " + e.what());
  }
  f.get("in_channels", c.in_channels);
  f.get("num_classes", c.num_classes);
  f.get("base_channels", c.base_channels);
  if (f.has("stages")) {
    const json& arr = f.raw("stages");
    if (!arr.is_array()) {
      errors.push_back(f.at("stages") + ": expected an array");
    } else {
      for (std::size_t i = 0; i < arr.size(); ++i) {
        StageSpec s;
        s.index = static_cast<int>(i);
        Fields sf(arr[i], f.at("stages") + "[" + std::to_string(i) + "]", errors);
        sf.get("channels", s.channels);
        if (sf.has("conv_kernels")) {
          const json& k = sf.raw("conv_kernels");
          bool ok = k.is_array();
          for (const auto& v : k) ok = ok && v.is_number_integer();
          if (ok) {
            s.conv_kernels = k.get<std::vector<int>>();
          } else {
            errors.push_back(sf.at("conv_kernels") + ": expected an array of integers");
          }
        }
        sf.get("dilation", s.dilation);
        sf.get("has_maxvit", s.has_maxvit);
        sf.get("downsample", s.downsample);
        c.stages.push_back(s);
      }
    }
  }
  f.get("window", c.window);
  f.get("use_rel_bias", c.use_rel_bias);
  f.get("maxvit_depth", c.maxvit_depth);
  f.get("mbconv_expansion", c.mbconv_expansion);
  f.get("se_ratio", c.se_ratio);
  f.get("decoder", decoder);
  try {
    c.decoder = parse_decoder(decoder);
  } catch (const std::invalid_argument& e) {
    errors.push_back(f.at("decoder") + ": " + e.what());
  }
  f.get("seed", c.seed);
  return c;
}

AugmentPolicy augment_from_json(const json& j, const std::string& path, std::vector<std::string>& errors) {
  AugmentPolicy p;
  Fields f(j, path, errors);
  f.get("flip_h", p.flip_h);
  f.get("flip_h_prob", p.flip_h_prob);
  f.get("flip_v", p.flip_v);
  f.get("flip_v_prob", p.flip_v_prob);
  f.get("affine", p.affine);
  f.get("rotation_deg", p.rotation_deg);
  f.get("translate", p.translate);
  f.get("scale_min", p.scale_min);
  f.get("scale_max", p.scale_max);
  f.get("photometric", p.photometric);
  f.get("brightness", p.brightness);
  f.get("contrast", p.contrast);
  f.get("saturation", p.saturation);
  return p;
}

TrainConfig train_from_json(const json& j, const std::string& path, std::vector<std::string>& errors) {
  TrainConfig c;
  Fields f(j, path, errors);
  f.get("base_lr", c.base_lr);
  f.get("min_lr", c.min_lr);
  f.get("total_steps", c.total_steps);
  f.get("batch_size", c.batch_size);
  f.get("seed", c.seed);
  f.get("eval_interval", c.eval_interval);
  if (f.has("loss_weights")) {
    Fields w(f.raw("loss_weights"), f.at("loss_weights"), errors);
    w.get("ce", c.loss.ce);
    w.get("dice", c.loss.dice);
  }
  if (f.has("adamw")) {
    Fields a(f.raw("adamw"), f.at("adamw"), errors);
    a.get("beta1", c.adamw.beta1);
    a.get("beta2", c.adamw.beta2);
    a.get("eps", c.adamw.eps);
    a.get("weight_decay", c.adamw.weight_decay);
  }
  f.get("grad_clip", c.grad_clip);
  if (f.has("augment")) c.augment = augment_from_json(f.raw("augment"), f.at("augment"), errors);
  return c;
}

}  // namespace json_io

namespace {

// Appends the lines of a multi-line validation message under `section`.
void absorb(const std::exception& e, const std::string& section, std::vector<std::string>& errors) {
  std::istringstream in(e.what());
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    const auto start = line.find_first_not_of(' ');
    if (start == std::string::npos) continue;
    // The first line is a heading when more lines follow.
    if (first && line.back() == ':') {
      first = false;
      continue;
    }
    first = false;
    errors.push_back(section + ": " + line.substr(start));
  }
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
  using json_io::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  std::vector<std::string> errors;
  RunConfig rc;
  {
    json_io::Fields f(j, "", errors);
    if (f.has("model")) rc.model = json_io::model_from_json(f.raw("model"), "model", errors);
    if (f.has("train")) rc.train = json_io::train_from_json(f.raw("train"), "train", errors);
    if (f.has("data")) {
      json_io::Fields d(f.raw("data"), "data", errors);
      d.get("train", rc.data.train);
      d.get("val", rc.data.val);
      d.get("norm", rc.data.norm);
    }
    f.get("deterministic", rc.deterministic);
  }
  // Fields that failed to parse keep their defaults, so semantic checks stay
  // meaningful and every problem is reported in one pass.
  try {
    rc.model.validate();
  } catch (const std::exception& e) {
    absorb(e, "model", errors);
  }
  try {
    rc.train.validate();
  } catch (const std::exception& e) {
    absorb(e, "train", errors);
  }
  if (!errors.empty()) {
    std::string msg = "invalid config (" + std::to_string(errors.size()) + " problem" + (errors.size() > 1 ? "s" : "") + "):";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return rc;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string RunConfig::dump() const {
  json_io::json j = {{"model", json_io::to_json(model)},
                     {"train", json_io::to_json(train)},
                     {"data", {{"train", data.train}, {"val", data.val}, {"norm", data.norm}}},
                     {"deterministic", deterministic}};
  return j.dump(2) + "\n";
}

std::string model_config_to_json(const ModelConfig& cfg) { return json_io::to_json(cfg).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
  std::vector<std::string> errors;
  ModelConfig c;
  try {
    c = json_io::model_from_json(json_io::json::parse(text), "model", errors);
  } catch (const json_io::json::parse_error& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
  if (!errors.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return c;
}

}  // namespace nhvt
