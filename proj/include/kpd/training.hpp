#pragma once

// Training orchestration: the appearance / geometry / viewpoint streams of one
// optimisation step, the epoch loop with curriculum and checkpoints, and
// supervised finetuning of the keypoint network.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "kpd/config.hpp"
#include "kpd/data.hpp"
#include "kpd/evaluation.hpp"
#include "kpd/losses.hpp"
#include "kpd/networks.hpp"

namespace kpd {

/// Sets the global torch seed and, when `deterministic`, pins torch to one
/// thread with deterministic kernels.
void configure_runtime(uint64_t seed, bool deterministic);

ModelShape model_shape(const TrainConfig& config);

// ---------------------------------------------------------------------------
// Checkpoints: one torch archive holding the format tag, the config text, the
// epoch, the four sub-network parameter sets and optionally optimizer state
// and a finetuning readout.

inline constexpr const char* kCheckpointFormat = "kpd-checkpoint/1";

struct LoadedCheckpoint {
  TrainConfig config;
  int64_t epoch = 0;
  KeypointModel model{nullptr};
  KeypointReadout readout{nullptr};  // present for finetuned checkpoints
  std::optional<torch::serialize::InputArchive> optimizer_state;
};

void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config,
                     KeypointModel& model, int64_t epoch,
                     torch::optim::Optimizer* optimizer = nullptr,
                     KeypointReadout* readout = nullptr);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// SHA-256 over every parameter and buffer, in registration order.
std::string parameter_checksum(torch::nn::Module& module);

// ---------------------------------------------------------------------------

struct ImageSet {
  std::vector<torch::Tensor> images;  // [3, S, S]
  std::vector<int64_t> labels;

  size_t size() const { return images.size(); }
};

ImageSet load_image_set(const Manifest& manifest, Split split, int64_t image_size);
ImageSet toy_image_set(const ToyDataset& data, Split split);

struct StepScalars {
  double perceptual = 0.0;
  double weak = 0.0;
  std::optional<double> equivariance;  // empty while inactive
  double total = 0.0;
  int64_t correct = 0;
  int64_t count = 0;
};

class Trainer {
 public:
  explicit Trainer(TrainConfig config);

  /// One optimisation step on a batch of pairs. `epoch` is 1-based.
  StepScalars train_step(const std::vector<TrainPair>& batch, int64_t epoch);

  /// Validation loss (L_perc + L_w, weighted) and weak-head accuracy.
  std::pair<double, double> validate(const std::vector<TrainPair>& pairs);

  KeypointModel& model() { return model_; }
  PerceptualNet& perceptual() { return perceptual_; }
  torch::optim::SGD& optimizer() { return *optimizer_; }
  const TrainConfig& config() const { return config_; }
  void set_learning_rate(double lr);

 private:
  TrainConfig config_;
  KeypointModel model_{nullptr};
  PerceptualNet perceptual_{nullptr};
  std::unique_ptr<torch::optim::SGD> optimizer_;
};

struct EpochRecord {
  int64_t epoch = 0;
  double perceptual = 0.0;
  double weak = 0.0;
  std::optional<double> equivariance;
  double total = 0.0;
  double accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct RunLog {
  std::vector<EpochRecord> epochs;
  std::vector<std::string> checkpoints;
  std::string final_checkpoint;
  std::string best_checkpoint;
  double wall_seconds = 0.0;

  /// epoch,L_perc,L_w,L_v,total,acc  (L_v reads "inactive" before the curriculum).
  void write_csv(const std::filesystem::path& path) const;
  void write_summary(const std::filesystem::path& path, const TrainConfig& config) const;
};

using EpochCallback = std::function<void(const EpochRecord&, Trainer&)>;

/// Runs the epoch loop. Checkpoints go to config.out: epoch_NNN.ckpt every
/// checkpoint_interval epochs, last.ckpt and best.ckpt (lowest validation
/// loss). A non-empty config.resume continues from that checkpoint.
RunLog train(const TrainConfig& config, const ImageSet& train_set, const ImageSet& val_set,
             const EpochCallback& on_epoch = {});

/// Loads config.manifest (or synthesises the toy set when it is empty).
RunLog train(const TrainConfig& config);

// ---------------------------------------------------------------------------
// Supervised finetuning.

struct LabeledSet {
  std::vector<torch::Tensor> images;
  torch::Tensor keypoints;  // [n, M, 2] normalized
  torch::Tensor visible;    // [n, M] bool
  torch::Tensor bbox_size;  // [n]
  std::vector<int64_t> labels;

  size_t size() const { return images.size(); }
  LabeledSet subset(const std::vector<int64_t>& indices) const;
};

LabeledSet load_labeled_set(const Manifest& manifest, Split split, int64_t image_size,
                            const std::string& bbox_normalizer = "max");
LabeledSet toy_labeled_set(const ToyDataset& data, Split split);

/// Indices of the first floor(fraction * n) samples when ordered by a seeded
/// hash; smaller fractions are prefixes of larger ones.
std::vector<int64_t> nested_subset(int64_t n, double fraction, uint64_t seed);

/// KL(target || prediction) between per-part normalized Gaussian targets and
/// the spatial softmax of the logits, averaged over visible keypoints.
torch::Tensor supervised_heatmap_loss(const HeatmapStack& logits, const torch::Tensor& targets,
                                      const torch::Tensor& visible, double sigma);

struct FinetuneOptions {
  double fraction = 1.0;
  int64_t epochs = 20;
  int64_t batch = 16;
  int64_t min_steps = 100;
  double lr = 0.01;
  double momentum = 0.9;
  double target_sigma = 0.02;
  double alpha = 0.1;
  uint64_t seed = 0;
};

struct FinetuneResult {
  KeypointModel model{nullptr};
  KeypointReadout readout{nullptr};
  std::vector<double> pck_per_epoch;  // on the evaluation set
  PckResult final_pck;
  int64_t train_samples = 0;
};

/// Predicts annotated-part keypoints through the readout, in eval mode.
torch::Tensor predict_parts(KeypointModel& model, KeypointReadout& readout,
                            const std::vector<torch::Tensor>& images, int64_t batch = 64);

/// Trains encoder + keypoint head + readout on the nested `fraction` of
/// `train_set`, reporting PCK@alpha on `eval_set` after every epoch. The
/// readout starts by copying, per annotated part, the discovered channel
/// closest to it on the labeled subset.
FinetuneResult finetune_keypoints(KeypointModel model, const LabeledSet& train_set,
                                  const LabeledSet& eval_set, const FinetuneOptions& options);

/// Discovered keypoints for a list of images, eval mode, [n, K, 2].
torch::Tensor discover_keypoints(KeypointModel& model, const std::vector<torch::Tensor>& images,
                                 int64_t batch = 64);

}  // namespace kpd
