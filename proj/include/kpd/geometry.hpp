#pragma once

// Differentiable heatmap/keypoint kernels shared by every part of the model.
//
// Coordinates are normalized to [0,1]^2 with u horizontal and v vertical. A
// grid of W columns places cell j at u = (j + 0.5) / W, so a horizontal flip
// is exactly u -> 1 - u at every resolution.
//
// Keypoint tensors are [N, K, 2] (u, v). Heatmap tensors are [N, K, H, W].

#include <cstdint>
#include <torch/torch.h>

namespace kpd {

enum class HeatmapKind { logits, normalized };

struct HeatmapStack {
  torch::Tensor values;  // [N, K, H, W]
  HeatmapKind kind = HeatmapKind::logits;

  int64_t channels() const { return values.size(1); }
  int64_t height() const { return values.size(2); }
  int64_t width() const { return values.size(3); }
};

struct GaussianBottleneck {
  torch::Tensor maps;  // [N, K, H, W]
  double sigma = 0.0;
};

/// Cell-center coordinates of a grid: returns {u, v}, each shaped [H, W].
std::pair<torch::Tensor, torch::Tensor> cell_centers(int64_t height, int64_t width,
                                                     const torch::TensorOptions& options);

/// Per-channel softmax over the H*W grid. Rejects non-finite logits, naming
/// the offending sample and channel.
HeatmapStack spatial_softmax(const HeatmapStack& logits, double temperature = 1.0);

/// Expected cell-center coordinate under each normalized channel.
torch::Tensor soft_argmax(const HeatmapStack& normalized);

/// Renders B_k(x) = exp(-|x - p_k|^2 / (2 sigma^2)) / sqrt(2 pi sigma^2) on an
/// H x W grid of cell centers. Differentiable with respect to the keypoints.
GaussianBottleneck render_gaussian(const torch::Tensor& keypoints, double sigma, int64_t height,
                                   int64_t width);

/// Mirrors u -> 1 - u. Channel order is preserved.
torch::Tensor flip_keypoints(const torch::Tensor& keypoints);

/// Mirrors images ([..., H, W]) along the width axis.
torch::Tensor flip_images(const torch::Tensor& images);

/// Validates a [N, K, 2] keypoint tensor; throws std::invalid_argument.
void check_keypoints(const torch::Tensor& keypoints, const char* what);

}  // namespace kpd
