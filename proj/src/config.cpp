#include "kpd/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <openssl/evp.h>

namespace kpd {

SamplerOptions TrainConfig::sampler(int64_t batch_size) const {
  auto options = default_sampler_options(batch_size, discriminative_parts);
  if (candidates > 0) options.candidates = std::min(candidates, batch_size);
  if (selected > 0) options.selected = std::min(selected, options.candidates);
  options.policy = sampler_policy;
  return options;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("config: " + what); };
  if (!(lr > 0.0)) fail("lr must be positive");
  if (parts < 2) fail("parts must be >= 2");
  if (discriminative_parts < 1 || discriminative_parts >= parts) {
    fail("discriminative_parts must satisfy 1 <= K_w < K");
  }
  if (classes < 2) fail("classes must be >= 2");
  if (batch < 1) fail("batch must be >= 1");
  if (epochs < 0) fail("epochs must be >= 0");
  if (selected < 0 || candidates < 0) fail("candidates/selected must be >= 0");
  if (selected > 0 && candidates > 0 && selected > candidates) fail("need N_v <= N_s");
  if (candidates > batch) fail("need N_s <= batch");
  if (weights.perceptual < 0 || weights.weak < 0 || weights.equivariance < 0) {
    fail("loss weights must be nonnegative");
  }
  if (weights.curriculum_epoch < 0) fail("curriculum_epoch must be >= 0");
  if (tps_grid < 2) fail("tps_grid must be >= 2");
  if (!(tps_scale >= 0.0) || tps_scale >= 0.5 / (tps_grid - 1)) {
    fail("tps_scale must lie in [0, half the control spacing)");
  }
  if (!(keypoint_sigma > 0.0)) fail("keypoint_sigma must be positive");
  if (!(softmax_temperature > 0.0)) fail("softmax_temperature must be positive");
  if (!(bottleneck_grad_cap >= 0.0)) fail("bottleneck_grad_cap must be >= 0");
  if (!(fraction > 0.0 && fraction <= 1.0)) fail("fraction must lie in (0, 1]");
  if (!(alpha > 0.0)) fail("alpha must be positive");
  if (pck_normalizer != "max" && pck_normalizer != "diagonal") {
    fail("pck_normalizer must be max or diagonal");
  }
  if (checkpoint_interval < 1) fail("checkpoint_interval must be >= 1");
}

std::vector<std::string> preset_names() {
  return {"celeba", "cub", "animalpose", "stanforddogs", "toy"};
}

TrainConfig preset(const std::string& name) {
  TrainConfig c;
  c.preset = name;
  c.lr = 0.001;
  c.weights = LossWeights{1.0, 1.0, 1.0, 0};
  c.discriminative_parts = 5;
  c.epochs = 60;
  if (name == "celeba") {
    c.profile = ScaleProfile::full();
    c.parts = 10;
    c.classes = 2;  // unused: reconstruction only
    c.weights = LossWeights{1.0, 0.0, 0.0, 0};
  } else if (name == "cub") {
    c.profile = ScaleProfile::full();
    c.parts = 15;
    c.classes = 200;
    c.weights.curriculum_epoch = 30;
  } else if (name == "animalpose") {
    c.profile = ScaleProfile::full();
    c.parts = 20;
    c.classes = 5;
    c.weights.curriculum_epoch = 40;
  } else if (name == "stanforddogs") {
    c.profile = ScaleProfile::full();
    c.parts = 24;
    c.classes = 120;
    c.weights.curriculum_epoch = 30;
  } else if (name == "toy") {
    c.profile = ScaleProfile::desk();
    c.parts = 8;
    c.discriminative_parts = 3;
    c.classes = 3;
    c.lr = 0.002;
    c.lr_decay = 0.95;
    c.bottleneck_grad_cap = 0.1;
    c.weights.equivariance = 10.0;
    c.epochs = 24;
    c.weights.curriculum_epoch = 10;
    c.batch = 32;
    c.n = 2000;
  } else {
    throw std::invalid_argument("unknown preset '" + name + "'");
  }
  return c;
}

namespace {

struct KeySpec {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
  bool hashed;  // part of the model/optimisation identity
};

int64_t parse_int(const std::string& key, const std::string& v) {
  int64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw std::invalid_argument("config: '" + key + "' expects an integer, got '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double out = std::stod(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw std::invalid_argument("config: '" + key + "' expects a number, got '" + v + "'");
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw std::invalid_argument("config: '" + key + "' expects a boolean, got '" + v + "'");
}

std::string real_text(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

template <typename T>
KeySpec int_key(T TrainConfig::*field, bool hashed) {
  return {[field](TrainConfig& c, const std::string& v) { c.*field = T(parse_int("", v)); },
          [field](const TrainConfig& c) { return std::to_string(c.*field); }, hashed};
}

KeySpec real_key(double TrainConfig::*field, bool hashed) {
  return {[field](TrainConfig& c, const std::string& v) { c.*field = parse_real("", v); },
          [field](const TrainConfig& c) { return real_text(c.*field); }, hashed};
}

KeySpec bool_key(bool TrainConfig::*field, bool hashed) {
  return {[field](TrainConfig& c, const std::string& v) { c.*field = parse_bool("", v); },
          [field](const TrainConfig& c) { return std::string(c.*field ? "true" : "false"); },
          hashed};
}

KeySpec string_key(std::string TrainConfig::*field, bool hashed) {
  return {[field](TrainConfig& c, const std::string& v) { c.*field = v; },
          [field](const TrainConfig& c) { return c.*field; }, hashed};
}

const std::map<std::string, KeySpec>& key_table() {
  static const std::map<std::string, KeySpec> table = [] {
    std::map<std::string, KeySpec> t;
    t["preset"] = string_key(&TrainConfig::preset, true);
    t["profile"] = {[](TrainConfig& c, const std::string& v) { c.profile = ScaleProfile::by_name(v); },
                    [](const TrainConfig& c) { return c.profile.name; }, true};
    t["parts"] = int_key(&TrainConfig::parts, true);
    t["discriminative_parts"] = int_key(&TrainConfig::discriminative_parts, true);
    t["classes"] = int_key(&TrainConfig::classes, true);
    t["w_perc"] = {[](TrainConfig& c, const std::string& v) { c.weights.perceptual = parse_real("w_perc", v); },
                   [](const TrainConfig& c) { return real_text(c.weights.perceptual); }, true};
    t["w_weak"] = {[](TrainConfig& c, const std::string& v) { c.weights.weak = parse_real("w_weak", v); },
                   [](const TrainConfig& c) { return real_text(c.weights.weak); }, true};
    t["w_equiv"] = {[](TrainConfig& c, const std::string& v) { c.weights.equivariance = parse_real("w_equiv", v); },
                    [](const TrainConfig& c) { return real_text(c.weights.equivariance); }, true};
    t["curriculum_epoch"] = {
        [](TrainConfig& c, const std::string& v) { c.weights.curriculum_epoch = parse_int("curriculum_epoch", v); },
        [](const TrainConfig& c) { return std::to_string(c.weights.curriculum_epoch); }, true};
    t["lr"] = real_key(&TrainConfig::lr, true);
    t["momentum"] = real_key(&TrainConfig::momentum, true);
    t["lr_decay"] = real_key(&TrainConfig::lr_decay, true);
    t["epochs"] = int_key(&TrainConfig::epochs, false);
    t["batch"] = int_key(&TrainConfig::batch, true);
    t["candidates"] = int_key(&TrainConfig::candidates, true);
    t["selected"] = int_key(&TrainConfig::selected, true);
    t["sampler_policy"] = {
        [](TrainConfig& c, const std::string& v) {
          if (v == "relative") c.sampler_policy = FacingPolicy::relative;
          else if (v == "absolute") c.sampler_policy = FacingPolicy::absolute;
          else throw std::invalid_argument("config: sampler_policy must be relative or absolute");
        },
        [](const TrainConfig& c) {
          return std::string(c.sampler_policy == FacingPolicy::relative ? "relative" : "absolute");
        },
        true};
    t["equivariance_reduction"] = {
        [](TrainConfig& c, const std::string& v) {
          if (v == "squared") c.equivariance_reduction = EquivarianceReduction::squared;
          else if (v == "root") c.equivariance_reduction = EquivarianceReduction::root;
          else throw std::invalid_argument("config: equivariance_reduction must be squared or root");
        },
        [](const TrainConfig& c) {
          return std::string(c.equivariance_reduction == EquivarianceReduction::squared ? "squared" : "root");
        },
        true};
    t["tps_grid"] = int_key(&TrainConfig::tps_grid, true);
    t["tps_scale"] = real_key(&TrainConfig::tps_scale, true);
    t["jitter"] = bool_key(&TrainConfig::jitter, true);
    t["keypoint_sigma"] = real_key(&TrainConfig::keypoint_sigma, true);
    t["softmax_temperature"] = real_key(&TrainConfig::softmax_temperature, true);
    t["bottleneck_grad_cap"] = real_key(&TrainConfig::bottleneck_grad_cap, true);
    t["perceptual_layers"] = int_key(&TrainConfig::perceptual_layers, true);
    t["perceptual_weights"] = string_key(&TrainConfig::perceptual_weights, true);
    t["pretrained_encoder"] = string_key(&TrainConfig::pretrained_encoder, true);
    t["seed"] = {[](TrainConfig& c, const std::string& v) { c.seed = uint64_t(parse_int("seed", v)); },
                 [](const TrainConfig& c) { return std::to_string(c.seed); }, true};
    t["deterministic"] = bool_key(&TrainConfig::deterministic, false);
    t["checkpoint_interval"] = int_key(&TrainConfig::checkpoint_interval, false);
    t["manifest"] = string_key(&TrainConfig::manifest, true);
    t["out"] = string_key(&TrainConfig::out, false);
    t["checkpoint"] = string_key(&TrainConfig::checkpoint, false);
    t["resume"] = string_key(&TrainConfig::resume, false);
    t["n"] = int_key(&TrainConfig::n, true);
    t["fraction"] = real_key(&TrainConfig::fraction, false);
    t["finetune_epochs"] = int_key(&TrainConfig::finetune_epochs, false);
    t["metric"] = string_key(&TrainConfig::metric, false);
    t["alpha"] = real_key(&TrainConfig::alpha, false);
    t["pck_normalizer"] = string_key(&TrainConfig::pck_normalizer, false);
    t["mode"] = string_key(&TrainConfig::mode, false);
    return t;
  }();
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, spec] : key_table()) keys.push_back(k);
  return keys;
}

bool is_config_key(const std::string& key) { return key_table().count(key) > 0; }

void set_config_value(TrainConfig& config, const std::string& key, const std::string& value) {
  auto it = key_table().find(key);
  if (it == key_table().end()) throw std::invalid_argument("config: unknown key '" + key + "'");
  try {
    it->second.set(config, value);
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument("config: bad value '" + value + "' for '" + key + "'");
  }
}

std::string get_config_value(const TrainConfig& config, const std::string& key) {
  auto it = key_table().find(key);
  if (it == key_table().end()) throw std::invalid_argument("config: unknown key '" + key + "'");
  return it->second.get(config);
}

TrainConfig parse_config_text(const std::string& text, TrainConfig base) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
    }
    entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  TrainConfig config = std::move(base);
  for (const auto& [k, v] : entries) {
    if (k == "preset") config = preset(v);
  }
  for (const auto& [k, v] : entries) {
    if (k != "preset") set_config_value(config, k, v);
  }
  return config;
}

TrainConfig load_config_file(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config_text(buffer.str(), std::move(base));
}

std::string to_config_text(const TrainConfig& config) {
  std::ostringstream out;
  out << "preset = " << config.preset << "\n";
  for (const auto& [k, spec] : key_table()) {
    if (k != "preset") out << k << " = " << spec.get(config) << "\n";
  }
  return out.str();
}

std::string config_hash(const TrainConfig& config) {
  std::ostringstream canonical;
  for (const auto& [k, spec] : key_table()) {
    if (spec.hashed) canonical << k << "=" << spec.get(config) << "\n";
  }
  const auto text = canonical.str();
  return sha256_hex(text.data(), text.size());
}

std::string sha256_hex(const void* data, size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(data, size, digest, &length, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < length; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  }
  return hex.str();
}

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes.data(), bytes.size());
}

}  // namespace kpd
