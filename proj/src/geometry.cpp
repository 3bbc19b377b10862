#include "kpd/geometry.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace kpd {

void check_keypoints(const torch::Tensor& keypoints, const char* what) {
  if (!keypoints.defined() || keypoints.dim() != 3 || keypoints.size(2) != 2) {
    std::ostringstream msg;
    msg << what << ": expected keypoints shaped [N, K, 2]";
    if (keypoints.defined()) msg << ", got " << keypoints.sizes();
    throw std::invalid_argument(msg.str());
  }
}

std::pair<torch::Tensor, torch::Tensor> cell_centers(int64_t height, int64_t width,
                                                     const torch::TensorOptions& options) {
  auto u = (torch::arange(width, options) + 0.5) / static_cast<double>(width);
  auto v = (torch::arange(height, options) + 0.5) / static_cast<double>(height);
  return {u.view({1, width}).expand({height, width}), v.view({height, 1}).expand({height, width})};
}

HeatmapStack spatial_softmax(const HeatmapStack& logits, double temperature) {
  const auto& x = logits.values;
  if (!x.defined() || x.dim() != 4) {
    throw std::invalid_argument("spatial_softmax: expected heatmaps shaped [N, K, H, W]");
  }
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("spatial_softmax: temperature must be positive");
  }
  auto finite = torch::isfinite(x.detach()).flatten(2).all(2);  // [N, K]
  if (!finite.all().item<bool>()) {
    auto bad = torch::nonzero(finite.logical_not())[0];
    std::ostringstream msg;
    msg << "spatial_softmax: non-finite logit in channel " << bad[1].item<int64_t>()
        << " (sample " << bad[0].item<int64_t>() << ")";
    throw std::invalid_argument(msg.str());
  }
  auto flat = x.flatten(2);
  if (temperature != 1.0) flat = flat / temperature;
  return {torch::softmax(flat, 2).view_as(x), HeatmapKind::normalized};
}

torch::Tensor soft_argmax(const HeatmapStack& normalized) {
  if (normalized.kind != HeatmapKind::normalized) {
    throw std::invalid_argument("soft_argmax: heatmaps are logits; apply spatial_softmax first");
  }
  const auto& h = normalized.values;
  auto [u, v] = cell_centers(h.size(2), h.size(3), h.options());
  auto pu = (h * u).sum({2, 3});
  auto pv = (h * v).sum({2, 3});
  return torch::stack({pu, pv}, 2);
}

GaussianBottleneck render_gaussian(const torch::Tensor& keypoints, double sigma, int64_t height,
                                   int64_t width) {
  if (!(sigma > 0.0)) throw std::invalid_argument("render_gaussian: sigma must be positive");
  check_keypoints(keypoints, "render_gaussian");
  auto [u, v] = cell_centers(height, width, keypoints.options());
  auto pu = keypoints.select(2, 0).unsqueeze(-1).unsqueeze(-1);
  auto pv = keypoints.select(2, 1).unsqueeze(-1).unsqueeze(-1);
  auto dist2 = (u - pu).square() + (v - pv).square();
  const double norm = 1.0 / std::sqrt(2.0 * std::numbers::pi * sigma * sigma);
  return {torch::exp(dist2 * (-0.5 / (sigma * sigma))) * norm, sigma};
}

torch::Tensor flip_keypoints(const torch::Tensor& keypoints) {
  check_keypoints(keypoints, "flip_keypoints");
  return torch::stack({1.0 - keypoints.select(2, 0), keypoints.select(2, 1)}, 2);
}

torch::Tensor flip_images(const torch::Tensor& images) { return images.flip({-1}); }

}  // namespace kpd
