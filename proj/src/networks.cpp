#include "kpd/networks.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace kpd {

namespace nn = torch::nn;

ScaleProfile ScaleProfile::full() {
  ScaleProfile p;
  p.name = "full";
  p.encoder_widths = {256, 512, 1024, 2048};
  p.lateral_width = 256;
  p.heatmap_size = 64;
  p.image_size = 128;
  p.decoder_widths = {1024, 512, 256, 128, 64};
  p.weak_width = 256;
  p.bottleneck_encoder = true;
  // VGG-16 through pool4.
  p.perceptual_layout = {64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0};
  return p;
}

ScaleProfile ScaleProfile::desk() {
  ScaleProfile p;
  p.name = "desk";
  p.encoder_widths = {16, 32, 64, 128};
  p.lateral_width = 32;
  p.heatmap_size = 32;
  p.image_size = 64;
  p.decoder_widths = {64, 32, 32, 16, 16};
  p.weak_width = 16;
  p.bottleneck_encoder = false;
  p.perceptual_layout = {8, 0, 16, 0, 32, 0, 32, 0};
  return p;
}

ScaleProfile ScaleProfile::by_name(const std::string& name) {
  if (name == "full") return full();
  if (name == "desk") return desk();
  throw std::invalid_argument("unknown scale profile '" + name + "' (expected full or desk)");
}

nn::Sequential conv_bn_relu(int64_t in, int64_t out, int64_t kernel, int64_t stride) {
  return nn::Sequential(
      nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2).bias(false)),
      nn::BatchNorm2d(out), nn::ReLU(nn::ReLUOptions(true)));
}

namespace {

nn::Sequential projection(int64_t in, int64_t out, int64_t stride) {
  if (in == out && stride == 1) return nullptr;
  return nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)),
                        nn::BatchNorm2d(out));
}

nn::Upsample bilinear_to(int64_t size) {
  return nn::Upsample(nn::UpsampleOptions()
                          .size(std::vector<int64_t>{size, size})
                          .mode(torch::kBilinear)
                          .align_corners(false));
}

nn::Upsample bilinear_x2() {
  return nn::Upsample(nn::UpsampleOptions()
                          .scale_factor(std::vector<double>{2.0, 2.0})
                          .mode(torch::kBilinear)
                          .align_corners(false));
}

void expect_channels(const torch::Tensor& block, int64_t expected, const char* where, int level) {
  if (block.size(1) != expected) {
    std::ostringstream msg;
    msg << where << ": block c" << level + 1 << " has " << block.size(1)
        << " channels, profile expects " << expected;
    throw std::invalid_argument(msg.str());
  }
}

}  // namespace

BasicBlockImpl::BasicBlockImpl(int64_t in, int64_t out, int64_t stride) {
  conv1_ = register_module(
      "conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
  bn1_ = register_module("bn1", nn::BatchNorm2d(out));
  conv2_ = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1).bias(false)));
  bn2_ = register_module("bn2", nn::BatchNorm2d(out));
  shortcut_ = projection(in, out, stride);
  if (shortcut_) register_module("shortcut", shortcut_);
}

torch::Tensor BasicBlockImpl::forward(torch::Tensor x) {
  auto out = torch::relu(bn1_(conv1_(x)));
  out = bn2_(conv2_(out));
  return torch::relu(out + (shortcut_ ? shortcut_->forward(x) : x));
}

BottleneckImpl::BottleneckImpl(int64_t in, int64_t mid, int64_t out, int64_t stride) {
  conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, mid, 1).bias(false)));
  bn1_ = register_module("bn1", nn::BatchNorm2d(mid));
  conv2_ = register_module(
      "conv2", nn::Conv2d(nn::Conv2dOptions(mid, mid, 3).stride(stride).padding(1).bias(false)));
  bn2_ = register_module("bn2", nn::BatchNorm2d(mid));
  conv3_ = register_module("conv3", nn::Conv2d(nn::Conv2dOptions(mid, out, 1).bias(false)));
  bn3_ = register_module("bn3", nn::BatchNorm2d(out));
  shortcut_ = projection(in, out, stride);
  if (shortcut_) register_module("shortcut", shortcut_);
}

torch::Tensor BottleneckImpl::forward(torch::Tensor x) {
  auto out = torch::relu(bn1_(conv1_(x)));
  out = torch::relu(bn2_(conv2_(out)));
  out = bn3_(conv3_(out));
  return torch::relu(out + (shortcut_ ? shortcut_->forward(x) : x));
}

EncoderImpl::EncoderImpl(const ScaleProfile& profile) : image_size_(profile.image_size) {
  const auto& w = profile.encoder_widths;
  if (profile.bottleneck_encoder) {
    stem_ = nn::Sequential(
        nn::Conv2d(nn::Conv2dOptions(3, 64, 7).stride(2).padding(3).bias(false)),
        nn::BatchNorm2d(64), nn::ReLU(nn::ReLUOptions(true)),
        nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1)));
    const std::array<int, 4> depth{3, 4, 6, 3};
    int64_t in = 64;
    for (int s = 0; s < 4; ++s) {
      stages_[s] = nn::Sequential();
      const int64_t mid = w[s] / 4;
      for (int b = 0; b < depth[s]; ++b) {
        const int64_t stride = (b == 0 && s > 0) ? 2 : 1;
        stages_[s]->push_back(Bottleneck(in, mid, w[s], stride));
        in = w[s];
      }
    }
  } else {
    stem_ = nn::Sequential(
        nn::Conv2d(nn::Conv2dOptions(3, w[0], 3).stride(2).padding(1).bias(false)),
        nn::BatchNorm2d(w[0]), nn::ReLU(nn::ReLUOptions(true)),
        nn::MaxPool2d(nn::MaxPool2dOptions(2).stride(2)));
    int64_t in = w[0];
    for (int s = 0; s < 4; ++s) {
      stages_[s] = nn::Sequential(BasicBlock(in, w[s], s == 0 ? 1 : 2));
      in = w[s];
    }
  }
  register_module("stem", stem_);
  for (int s = 0; s < 4; ++s) register_module("stage" + std::to_string(s + 1), stages_[s]);
}

MultiScaleFeatures EncoderImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != image_size_ ||
      images.size(3) != image_size_) {
    std::ostringstream msg;
    msg << "encode: expected images [N, 3, " << image_size_ << ", " << image_size_ << "], got "
        << images.sizes();
    throw std::invalid_argument(msg.str());
  }
  MultiScaleFeatures out;
  auto x = stem_->forward(images);
  for (int s = 0; s < 4; ++s) {
    x = stages_[s]->forward(x);
    out.blocks[s] = x;
  }
  return out;
}

KeypointHeadImpl::KeypointHeadImpl(const ScaleProfile& profile, int64_t num_parts)
    : in_widths_(profile.encoder_widths),
      num_parts_(num_parts),
      heatmap_size_(profile.heatmap_size) {
  if (num_parts < 1) throw std::invalid_argument("KeypointHead: need at least one part");
  const int64_t lat = profile.lateral_width;
  for (int l = 0; l < 4; ++l) {
    const int64_t in = in_widths_[3 - l];
    lateral_[l] = register_module("lateral" + std::to_string(l), conv_bn_relu(in, lat, 1));
    if (l < 3) {
      upsample_[l] = register_module(
          "upsample" + std::to_string(l),
          nn::Sequential(bilinear_x2(), nn::Conv2d(nn::Conv2dOptions(lat, lat, 1).bias(false)),
                         nn::BatchNorm2d(lat)));
    }
    auto predict = conv_bn_relu(lat, lat, 1);
    predict->push_back(nn::Conv2d(nn::Conv2dOptions(lat, num_parts, 3).padding(1)));
    predict->push_back(bilinear_to(heatmap_size_));
    predict_[l] = register_module("predict" + std::to_string(l), predict);
  }
}

std::vector<torch::Tensor> KeypointHeadImpl::forward_levels(const MultiScaleFeatures& features) {
  std::vector<torch::Tensor> levels;
  levels.reserve(4);
  torch::Tensor top_down;
  for (int l = 0; l < 4; ++l) {
    const auto& block = features.blocks[3 - l];
    expect_channels(block, in_widths_[3 - l], "keypoint_head", 3 - l);
    auto x = lateral_[l]->forward(block);
    if (top_down.defined()) x = x + top_down;
    levels.push_back(predict_[l]->forward(x));
    if (l < 3) top_down = upsample_[l]->forward(x);
  }
  return levels;
}

HeatmapStack KeypointHeadImpl::forward(const MultiScaleFeatures& features) {
  auto levels = forward_levels(features);
  auto sum = levels[0];
  for (size_t l = 1; l < levels.size(); ++l) sum = sum + levels[l];
  return {sum, HeatmapKind::logits};
}

DecoderImpl::DecoderImpl(const ScaleProfile& profile, int64_t num_parts,
                         std::array<double, 5> sigmas)
    : num_parts_(num_parts), appearance_width_(profile.encoder_widths[3]), sigmas_(sigmas) {
  int64_t in = appearance_width_;
  for (int s = 0; s < 5; ++s) {
    stage_inputs_[s] = in + num_parts;
    stages_[s] = register_module("stage" + std::to_string(s),
                                 conv_bn_relu(stage_inputs_[s], profile.decoder_widths[s], 3));
    in = profile.decoder_widths[s];
  }
  to_rgb_ = register_module("to_rgb", nn::Conv2d(nn::Conv2dOptions(in, 3, 1)));
}

std::vector<torch::Tensor> DecoderImpl::forward_stages(const torch::Tensor& appearance,
                                                       const torch::Tensor& keypoints) {
  check_keypoints(keypoints, "reconstruct");
  if (keypoints.size(1) != num_parts_) {
    std::ostringstream msg;
    msg << "reconstruct: got " << keypoints.size(1) << " keypoints, decoder expects "
        << num_parts_;
    throw std::invalid_argument(msg.str());
  }
  if (appearance.dim() != 4 || appearance.size(1) != appearance_width_) {
    throw std::invalid_argument("reconstruct: appearance feature does not match the profile");
  }
  std::vector<torch::Tensor> outputs;
  auto x = appearance;
  for (int s = 0; s < 5; ++s) {
    x = torch::upsample_nearest2d(x, {x.size(2) * 2, x.size(3) * 2});
    auto bottleneck = render_gaussian(keypoints, sigmas_[s], x.size(2), x.size(3)).maps;
    x = stages_[s]->forward(torch::cat({x, bottleneck.to(x.dtype())}, 1));
    outputs.push_back(x);
  }
  outputs.push_back(to_rgb_(x));
  return outputs;
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& appearance, const torch::Tensor& keypoints) {
  return forward_stages(appearance, keypoints).back();
}

WeakHeadImpl::WeakHeadImpl(const ScaleProfile& profile, int64_t num_parts,
                           int64_t discriminative_parts, int64_t num_classes)
    : in_widths_(profile.encoder_widths),
      heatmap_size_(profile.heatmap_size),
      discriminative_parts_(discriminative_parts) {
  if (discriminative_parts < 1 || discriminative_parts >= num_parts) {
    std::ostringstream msg;
    msg << "weak_head: K_w = " << discriminative_parts << " must lie in [1, K) with K = " << num_parts;
    throw std::invalid_argument(msg.str());
  }
  if (num_classes < 2) throw std::invalid_argument("weak_head: need at least two classes");
  for (int l = 0; l < 4; ++l) {
    auto reduce = nn::Sequential(bilinear_to(heatmap_size_));
    reduce->extend(*conv_bn_relu(in_widths_[l], profile.weak_width, 1));
    reducers_[l] = register_module("reduce" + std::to_string(l + 1), reduce);
  }
  classifier_ = register_module(
      "classifier", nn::Linear(discriminative_parts * 4 * profile.weak_width, num_classes));
}

torch::Tensor WeakHeadImpl::base_features(const MultiScaleFeatures& features) {
  std::vector<torch::Tensor> reduced;
  for (int l = 0; l < 4; ++l) {
    expect_channels(features.blocks[l], in_widths_[l], "weak_head", l);
    reduced.push_back(reducers_[l]->forward(features.blocks[l]));
  }
  return torch::cat(reduced, 1);
}

torch::Tensor WeakHeadImpl::pool_parts(const torch::Tensor& heatmaps, const torch::Tensor& base) {
  if (heatmaps.size(2) != base.size(2) || heatmaps.size(3) != base.size(3)) {
    throw std::invalid_argument("pool_parts: heatmap and base feature grids differ");
  }
  return torch::bmm(heatmaps.flatten(2), base.flatten(2).transpose(1, 2));
}

torch::Tensor WeakHeadImpl::forward(const MultiScaleFeatures& features,
                                    const HeatmapStack& normalized) {
  if (normalized.kind != HeatmapKind::normalized) {
    throw std::invalid_argument("weak_head: heatmaps must be normalized");
  }
  if (discriminative_parts_ > normalized.channels()) {
    std::ostringstream msg;
    msg << "weak_head: K_w = " << discriminative_parts_ << " exceeds K = "
        << normalized.channels();
    throw std::invalid_argument(msg.str());
  }
  auto parts = pool_parts(normalized.values.narrow(1, 0, discriminative_parts_),
                          base_features(features));
  return classifier_(parts.flatten(1));
}

PerceptualNetImpl::PerceptualNetImpl(const ScaleProfile& profile, int64_t num_layers, uint64_t seed)
    : num_layers_(num_layers) {
  int64_t pools = 0;
  for (auto w : profile.perceptual_layout) pools += (w == 0);
  if (num_layers < 1 || num_layers > pools) {
    std::ostringstream msg;
    msg << "perceptual network: " << num_layers << " layers requested, profile has " << pools;
    throw std::invalid_argument(msg.str());
  }
  auto gen = at::detail::createCPUGenerator(seed);
  int64_t in = 3;
  for (auto w : profile.perceptual_layout) {
    if (w == 0) {
      if (!pool_after_.empty()) pool_after_.back() = true;
      continue;
    }
    auto conv = nn::Conv2d(nn::Conv2dOptions(in, w, 3).padding(1));
    torch::NoGradGuard guard;
    conv->weight.normal_(0.0, std::sqrt(2.0 / (in * 9)), gen);
    conv->bias.zero_();
    convs_->push_back(conv);
    pool_after_.push_back(false);
    in = w;
  }
  register_module("convs", convs_);
  for (auto& p : parameters()) p.requires_grad_(false);
  eval();
}

std::vector<torch::Tensor> PerceptualNetImpl::forward(const torch::Tensor& images) {
  std::vector<torch::Tensor> out;
  auto x = images;
  for (size_t i = 0; i < convs_->size() && static_cast<int64_t>(out.size()) < num_layers_; ++i) {
    x = torch::relu(convs_[i]->as<nn::Conv2d>()->forward(x));
    if (pool_after_[i]) {
      x = torch::max_pool2d(x, 2);
      out.push_back(x);
    }
  }
  return out;
}

void PerceptualNetImpl::load_weights(const std::string& path) {
  torch::serialize::InputArchive archive;
  archive.load_from(path);
  load(archive);
  for (auto& p : parameters()) p.requires_grad_(false);
  eval();
}

KeypointModelImpl::KeypointModelImpl(ModelShape shape) : shape_(std::move(shape)) {
  encoder_ = register_module("encoder", Encoder(shape_.profile));
  keypoint_head_ = register_module("keypoint_head", KeypointHead(shape_.profile, shape_.num_parts));
  decoder_ = register_module("decoder",
                             Decoder(shape_.profile, shape_.num_parts, shape_.decoder_sigmas));
  weak_head_ = register_module("weak_head",
                               WeakHead(shape_.profile, shape_.num_parts,
                                        shape_.discriminative_parts, shape_.num_classes));
}

MultiScaleFeatures KeypointModelImpl::encode(const torch::Tensor& images) {
  return encoder_->forward(images);
}

Detection KeypointModelImpl::detect(const MultiScaleFeatures& features) {
  auto normalized = spatial_softmax(keypoint_head_->forward(features), shape_.softmax_temperature);
  auto keypoints = soft_argmax(normalized);
  return {std::move(normalized), std::move(keypoints)};
}

torch::Tensor KeypointModelImpl::reconstruct(const torch::Tensor& appearance,
                                             const torch::Tensor& keypoints) {
  return decoder_->forward(appearance, keypoints);
}

torch::Tensor KeypointModelImpl::classify(const MultiScaleFeatures& features,
                                          const HeatmapStack& normalized) {
  return weak_head_->forward(features, normalized);
}

KeypointReadoutImpl::KeypointReadoutImpl(int64_t num_parts, int64_t num_targets) {
  conv = register_module("conv", nn::Conv2d(nn::Conv2dOptions(num_parts, num_targets, 1)));
}

HeatmapStack KeypointReadoutImpl::forward(const HeatmapStack& logits) {
  if (logits.kind != HeatmapKind::logits) {
    throw std::invalid_argument("readout: expects heatmap logits");
  }
  return {conv(logits.values), HeatmapKind::logits};
}

void KeypointReadoutImpl::select_channels(const std::vector<int64_t>& source) {
  torch::NoGradGuard guard;
  if (static_cast<int64_t>(source.size()) != conv->weight.size(0)) {
    throw std::invalid_argument("readout: one source channel per target is required");
  }
  conv->weight.zero_();
  conv->bias.zero_();
  for (size_t m = 0; m < source.size(); ++m) conv->weight[m][source[m]][0][0] = 1.0;
}

}  // namespace kpd
