#pragma once

// Mines same-facing samples from a mini-batch using the model's own keypoint
// predictions, and produces mirrored images with mirrored-keypoint
// pseudo-labels for the equivariance loss.
//
// Steps, for a batch of N predictions:
//   1. s_i = population variance of the u coordinates of sample i.
//   2. Keep the N_s samples with the largest s_i (ties: lower index first).
//   3. mu_i = mean location of the first K_w (discriminative) keypoints.
//   4. Score the facing direction f_i, take the majority sign among the N_s
//      candidates, and keep the N_v most extreme samples in that direction.
//   5. Mirror the kept images; labels are the mirrored predictions.

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace kpd {

enum class FacingPolicy {
  relative,  // f = mean u of the first K_w keypoints - mean u of all keypoints
  absolute,  // f = mean u of the first K_w keypoints - 0.5
};

struct SamplerOptions {
  int64_t discriminative_parts = 5;  // K_w
  int64_t candidates = 0;            // N_s
  int64_t selected = 0;              // N_v
  FacingPolicy policy = FacingPolicy::relative;
};

struct EquivarianceBatch {
  std::vector<int64_t> indices;  // selected batch indices, in selection order
  torch::Tensor images;          // mirrored copies I^v, [N_v, C, H, W]
  torch::Tensor labels;          // mirrored predictions p*, [N_v, K, 2]
  int64_t candidates = 0;
  int64_t selected = 0;
};

/// Population variance of the u coordinates of a [K, 2] keypoint set.
double x_variance(const torch::Tensor& keypoints);

/// Facing score of one [K, 2] keypoint set under `policy`.
double facing_score(const torch::Tensor& keypoints, int64_t discriminative_parts,
                    FacingPolicy policy);

/// Runs the five mining steps. `predictions` are treated as constants; the
/// returned labels carry no autograd history. `images` may be undefined, in
/// which case only indices and labels are produced.
EquivarianceBatch sample_equivariance_batch(const torch::Tensor& predictions,
                                            const torch::Tensor& images,
                                            const SamplerOptions& options);

/// Default N_s = ceil(batch / 2) and N_v = ceil(batch / 4).
SamplerOptions default_sampler_options(int64_t batch, int64_t discriminative_parts);

}  // namespace kpd
