#include "kpd/viewpoint_sampler.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "kpd/geometry.hpp"

namespace kpd {
namespace {

void check_set(const torch::Tensor& keypoints) {
  if (keypoints.dim() != 2 || keypoints.size(1) != 2) {
    throw std::invalid_argument("expected a single keypoint set shaped [K, 2]");
  }
  if (keypoints.size(0) < 2) throw std::invalid_argument("x_variance needs K >= 2 keypoints");
}

}  // namespace

double x_variance(const torch::Tensor& keypoints) {
  check_set(keypoints);
  auto u = keypoints.detach().select(1, 0).to(torch::kFloat64);
  return (u - u.mean()).square().mean().item<double>();
}

double facing_score(const torch::Tensor& keypoints, int64_t discriminative_parts,
                    FacingPolicy policy) {
  check_set(keypoints);
  auto u = keypoints.detach().select(1, 0).to(torch::kFloat64);
  const double lead = u.narrow(0, 0, discriminative_parts).mean().item<double>();
  const double reference = policy == FacingPolicy::relative ? u.mean().item<double>() : 0.5;
  return lead - reference;
}

SamplerOptions default_sampler_options(int64_t batch, int64_t discriminative_parts) {
  SamplerOptions options;
  options.discriminative_parts = discriminative_parts;
  options.candidates = (batch + 1) / 2;
  options.selected = (batch + 3) / 4;
  return options;
}

EquivarianceBatch sample_equivariance_batch(const torch::Tensor& predictions,
                                            const torch::Tensor& images,
                                            const SamplerOptions& options) {
  check_keypoints(predictions, "sample_equivariance_batch");
  const int64_t n = predictions.size(0);
  const int64_t k = predictions.size(1);
  if (options.selected < 1 || options.selected > options.candidates || options.candidates > n) {
    std::ostringstream msg;
    msg << "sample_equivariance_batch: need 1 <= N_v (" << options.selected << ") <= N_s ("
        << options.candidates << ") <= batch (" << n << ")";
    throw std::invalid_argument(msg.str());
  }
  if (options.discriminative_parts < 1 || options.discriminative_parts > k) {
    throw std::invalid_argument("sample_equivariance_batch: K_w must lie in [1, K]");
  }
  if (images.defined() && images.size(0) != n) {
    throw std::invalid_argument("sample_equivariance_batch: image and prediction counts differ");
  }

  auto kps = predictions.detach().to(torch::kCPU, torch::kFloat64).contiguous();

  // Step 1-2: spread in u, stable descending.
  std::vector<double> spread(n);
  for (int64_t i = 0; i < n; ++i) spread[i] = x_variance(kps[i]);
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t a, int64_t b) { return spread[a] > spread[b]; });
  order.resize(options.candidates);

  // Step 3-4: facing score and majority direction.
  std::vector<double> facing(n, 0.0);
  int64_t positive = 0;
  int64_t negative = 0;
  for (int64_t i : order) {
    facing[i] = facing_score(kps[i], options.discriminative_parts, options.policy);
    positive += facing[i] > 0.0;
    negative += facing[i] < 0.0;
  }
  const double direction = positive >= negative ? 1.0 : -1.0;
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    const double fa = direction * facing[a];
    const double fb = direction * facing[b];
    return fa != fb ? fa > fb : a < b;
  });
  order.resize(options.selected);

  // Step 5: mirrored images and pseudo-labels.
  EquivarianceBatch batch;
  batch.indices = order;
  batch.candidates = options.candidates;
  batch.selected = options.selected;
  auto index = torch::tensor(order, torch::kLong);
  batch.labels =
      flip_keypoints(predictions.detach().index_select(0, index.to(predictions.device())));
  if (images.defined()) {
    batch.images = flip_images(images.index_select(0, index.to(images.device())));
  }
  return batch;
}

}  // namespace kpd
