#pragma once

// Training objectives: reconstruction (perceptual), weak supervision
// (cross-entropy over image labels) and viewpoint equivariance, combined with
// a curriculum that switches the equivariance term on after epoch n.

#include <cstdint>
#include <optional>

#include <torch/torch.h>

#include "kpd/networks.hpp"

namespace kpd {

struct LossWeights {
  double perceptual = 1.0;
  double weak = 1.0;
  double equivariance = 1.0;
  int64_t curriculum_epoch = 0;  // L_v is active for epoch > curriculum_epoch

  bool equivariance_active(int64_t epoch) const {
    return equivariance > 0.0 && epoch > curriculum_epoch;
  }
};

enum class EquivarianceReduction { squared, root };

/// Sum over layers of the per-sample L2 norm of the feature difference,
/// averaged over the batch.
torch::Tensor perceptual_loss(PerceptualNet& net, const torch::Tensor& target,
                              const torch::Tensor& reconstruction);

/// Mean negative log-likelihood of the true class.
torch::Tensor weak_loss(const torch::Tensor& logits, const torch::Tensor& labels);

/// squared: mean of squared coordinate errors over samples, keypoints and
/// both coordinates. root: mean over samples of the per-sample L2 norm.
torch::Tensor equivariance_loss(const torch::Tensor& predicted, const torch::Tensor& labels,
                                EquivarianceReduction reduction = EquivarianceReduction::squared);

struct LossComponents {
  torch::Tensor perceptual;
  torch::Tensor weak;
  torch::Tensor equivariance;  // may be undefined while the curriculum holds it off
};

/// w_p L_perc + w_w L_w + w_v L_v 1{epoch > n}. Undefined components count as
/// zero; an inactive L_v is never read.
torch::Tensor total_loss(const LossComponents& components, const LossWeights& weights,
                         int64_t epoch);

}  // namespace kpd
