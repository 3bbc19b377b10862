#pragma once

// Measurement protocols for discovered keypoints: linear-regressor probe,
// normalized errors, PCK, a keypoint-only posture classifier and visual dumps.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

#include "kpd/networks.hpp"

namespace kpd {

/// Least-squares map (with intercept) from 2K discovered coordinates to 2M
/// annotated coordinates, fitted independently per target coordinate.
struct RegressorProbe {
  Eigen::MatrixXd weights;  // (2K + 1) x 2M, last row is the intercept
  int64_t source_parts = 0;
  int64_t target_parts = 0;
  bool ridge_fallback = false;  // design was rank deficient

  torch::Tensor predict(const torch::Tensor& discovered) const;  // [n, K, 2] -> [n, M, 2]
};

RegressorProbe fit_probe(const torch::Tensor& discovered, const torch::Tensor& annotated);

/// Mean over samples and keypoints of |pred - gt| / normalizer, in percent.
/// `normalizers` is [n] (per sample) or a single value.
double normalized_error(const torch::Tensor& predicted, const torch::Tensor& ground_truth,
                        const torch::Tensor& normalizers);
double normalized_error(const torch::Tensor& predicted, const torch::Tensor& ground_truth,
                        double normalizer);

/// Distance between the two eye keypoints of each sample, [n].
torch::Tensor inter_ocular_distance(const torch::Tensor& ground_truth, int64_t left_eye,
                                    int64_t right_eye);

struct PckResult {
  std::vector<double> per_keypoint;  // NaN where a part has no visible instance
  double mean = 0.0;
  bool defined = false;  // false when no keypoint is visible
  double alpha = 0.1;
  int64_t correct = 0;
  int64_t evaluated = 0;
};

/// A keypoint counts as correct iff |pred - gt| <= alpha * bbox_size.
/// Invisible ground truth is excluded from numerator and denominator.
PckResult pck(const torch::Tensor& predicted, const torch::Tensor& ground_truth,
              const torch::Tensor& visible, const torch::Tensor& bbox_size, double alpha);

struct PostureOptions {
  int64_t hidden = 64;
  int64_t epochs = 200;
  int64_t batch = 32;
  double lr = 0.01;
  double momentum = 0.9;
  bool centroid_normalize = true;
  uint64_t seed = 0;
  int64_t patience = 20;  // epochs without training-loss improvement
};

struct PostureResult {
  double accuracy = 0.0;
  std::vector<std::vector<int64_t>> confusion;  // [true][predicted]
  std::vector<int64_t> predictions;
  int64_t epochs_run = 0;
};

/// Two fully connected layers on flattened (optionally centroid-normalized)
/// keypoints. Rejects a training set with a single class.
PostureResult posture_classifier(const torch::Tensor& train_keypoints,
                                 const std::vector<int64_t>& train_labels,
                                 const torch::Tensor& test_keypoints,
                                 const std::vector<int64_t>& test_labels,
                                 const PostureOptions& options = {});

void write_confusion_csv(const std::filesystem::path& path, const PostureResult& result);

// ---------------------------------------------------------------------------
// Visual dumps.

struct KeypointEdit {
  bool flip = false;
  double scale = 1.0;  // about the keypoint centroid
  double shift_u = 0.0;
  double shift_v = 0.0;

  bool is_identity() const { return !flip && scale == 1.0 && shift_u == 0.0 && shift_v == 0.0; }
  torch::Tensor apply(const torch::Tensor& keypoints) const;
};

/// Reconstructs with the appearance of `appearance_images` and the (edited)
/// keypoints discovered on `geometry_images`. Eval mode, no gradients.
torch::Tensor manipulate(KeypointModel& model, const torch::Tensor& geometry_images,
                         const torch::Tensor& appearance_images, const KeypointEdit& edit);

/// Draws coloured keypoint markers on a [3, H, W] image.
torch::Tensor overlay_keypoints(const torch::Tensor& image, const torch::Tensor& keypoints);

enum class VisualMode { keypoints, reconstruction, manipulation };
VisualMode visual_mode_from_string(const std::string& name);

/// Writes one PNG per input image into `dir`, named `<name>_<mode>.png`.
std::vector<std::filesystem::path> dump_visuals(KeypointModel& model,
                                                const std::vector<torch::Tensor>& images,
                                                const std::vector<std::string>& names,
                                                VisualMode mode, const std::filesystem::path& dir);

}  // namespace kpd
