#pragma once

// Training/evaluation configuration, dataset presets and the flat key-value
// file format. Every key is also a command-line flag of the same name.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "kpd/losses.hpp"
#include "kpd/networks.hpp"
#include "kpd/viewpoint_sampler.hpp"

namespace kpd {

struct TrainConfig {
  std::string preset = "toy";
  ScaleProfile profile = ScaleProfile::desk();
  int64_t parts = 8;                 // K
  int64_t discriminative_parts = 3;  // K_w
  int64_t classes = 3;
  LossWeights weights;
  double lr = 0.001;
  double momentum = 0.9;
  double lr_decay = 1.0;  // per-epoch multiplier; 1 disables decay
  int64_t epochs = 30;
  int64_t batch = 32;
  int64_t candidates = 0;  // N_s, 0 -> ceil(batch / 2)
  int64_t selected = 0;    // N_v, 0 -> ceil(batch / 4)
  FacingPolicy sampler_policy = FacingPolicy::relative;
  EquivarianceReduction equivariance_reduction = EquivarianceReduction::squared;
  int tps_grid = 5;
  double tps_scale = 0.05;
  bool jitter = true;
  double keypoint_sigma = 0.02;
  double softmax_temperature = 1.0;
  // Per-keypoint cap on the gradient norm reconstruction sends back into the
  // keypoint coordinates; 0 leaves it uncapped.
  double bottleneck_grad_cap = 0.0;
  int64_t perceptual_layers = 4;
  std::string perceptual_weights;  // optional parameter archive
  std::string pretrained_encoder;  // optional parameter archive
  uint64_t seed = 0;
  bool deterministic = false;
  int64_t checkpoint_interval = 1;
  std::string manifest;
  std::string out = "run";
  std::string checkpoint;
  std::string resume;
  // Synthetic data (synth-data, and train when no manifest is given).
  int64_t n = 2000;
  // Finetuning and evaluation.
  double fraction = 1.0;
  int64_t finetune_epochs = 20;
  std::string metric = "pck";
  double alpha = 0.1;
  std::string pck_normalizer = "max";  // max(w, h) or diagonal
  std::string mode = "keypoints";

  /// Sampler options with N_s / N_v defaults resolved for `batch_size`.
  SamplerOptions sampler(int64_t batch_size) const;
  /// Throws std::invalid_argument on violated invariants.
  void validate() const;
};

/// Known preset names: celeba, cub, animalpose, stanforddogs, toy.
std::vector<std::string> preset_names();
TrainConfig preset(const std::string& name);

/// Names of every configuration key.
std::vector<std::string> config_keys();
bool is_config_key(const std::string& key);
void set_config_value(TrainConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const TrainConfig& config, const std::string& key);

/// Parses `key = value` lines (`#` starts a comment). A `preset` key, if
/// present, is applied first so other keys override it.
TrainConfig parse_config_text(const std::string& text, TrainConfig base = preset("toy"));
TrainConfig load_config_file(const std::filesystem::path& path, TrainConfig base = preset("toy"));
std::string to_config_text(const TrainConfig& config);

/// Hash of the keys that define the model and optimisation trajectory;
/// run-length, paths and evaluation keys are excluded so a run can resume
/// with more epochs.
std::string config_hash(const TrainConfig& config);

std::string sha256_hex(const void* data, size_t size);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace kpd
