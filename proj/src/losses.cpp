#include "kpd/losses.hpp"

#include <sstream>
#include <stdexcept>

namespace kpd {

torch::Tensor perceptual_loss(PerceptualNet& net, const torch::Tensor& target,
                              const torch::Tensor& reconstruction) {
  if (!target.sizes().equals(reconstruction.sizes())) {
    std::ostringstream msg;
    msg << "perceptual_loss: target " << target.sizes() << " vs reconstruction "
        << reconstruction.sizes();
    throw std::invalid_argument(msg.str());
  }
  auto target_features = net->forward(target);
  auto recon_features = net->forward(reconstruction);
  auto loss = torch::zeros({}, reconstruction.options());
  for (size_t l = 0; l < target_features.size(); ++l) {
    auto diff = (target_features[l] - recon_features[l]).flatten(1);
    loss = loss + torch::linalg_vector_norm(diff, 2, {1}, false, std::nullopt).mean();
  }
  return loss;
}

torch::Tensor weak_loss(const torch::Tensor& logits, const torch::Tensor& labels) {
  if (logits.dim() != 2 || labels.dim() != 1 || labels.size(0) != logits.size(0)) {
    throw std::invalid_argument("weak_loss: expected logits [N, C] and labels [N]");
  }
  const int64_t classes = logits.size(1);
  if (labels.numel() > 0) {
    const auto lo = labels.min().item<int64_t>();
    const auto hi = labels.max().item<int64_t>();
    if (lo < 0 || hi >= classes) {
      std::ostringstream msg;
      msg << "weak_loss: label " << (lo < 0 ? lo : hi) << " outside [0, " << classes << ")";
      throw std::invalid_argument(msg.str());
    }
  }
  return torch::nn::functional::cross_entropy(logits, labels.to(torch::kLong));
}

torch::Tensor equivariance_loss(const torch::Tensor& predicted, const torch::Tensor& labels,
                                EquivarianceReduction reduction) {
  check_keypoints(predicted, "equivariance_loss");
  check_keypoints(labels, "equivariance_loss");
  if (!predicted.sizes().equals(labels.sizes())) {
    std::ostringstream msg;
    msg << "equivariance_loss: predictions " << predicted.sizes() << " vs labels "
        << labels.sizes();
    throw std::invalid_argument(msg.str());
  }
  auto diff = predicted - labels;
  if (reduction == EquivarianceReduction::squared) return diff.square().mean();
  return torch::linalg_vector_norm(diff.flatten(1), 2, {1}, false, std::nullopt).mean();
}

torch::Tensor total_loss(const LossComponents& components, const LossWeights& weights,
                         int64_t epoch) {
  torch::Tensor total;
  auto add = [&total](const torch::Tensor& term, double w) {
    if (!term.defined() || w == 0.0) return;
    auto weighted = term * w;
    total = total.defined() ? total + weighted : weighted;
  };
  add(components.perceptual, weights.perceptual);
  add(components.weak, weights.weak);
  if (epoch > weights.curriculum_epoch) add(components.equivariance, weights.equivariance);
  return total.defined() ? total : torch::zeros({});
}

}  // namespace kpd
