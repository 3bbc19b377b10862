#pragma once

// Sub-networks of the keypoint discovery model. One encoder is shared by the
// keypoint head, the reconstruction decoder and the weak-supervision head.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "kpd/geometry.hpp"

namespace kpd {

/// Channel widths and resolutions for one model size. `full` follows the
/// 128x128 ResNet-50 layout; `desk` keeps every stride and resolution ratio
/// with narrow channels for CPU-scale runs.
struct ScaleProfile {
  std::string name;
  std::array<int64_t, 4> encoder_widths{};
  int64_t lateral_width = 0;
  int64_t heatmap_size = 0;
  int64_t image_size = 0;
  std::array<int64_t, 5> decoder_widths{};
  int64_t weak_width = 0;
  bool bottleneck_encoder = false;  // ResNet-50 bottleneck stages [3, 4, 6, 3]
  std::vector<int64_t> perceptual_layout;  // conv widths, 0 marks a 2x2 max-pool

  static ScaleProfile full();
  static ScaleProfile desk();
  static ScaleProfile by_name(const std::string& name);
};

struct MultiScaleFeatures {
  std::array<torch::Tensor, 4> blocks;  // c1 (stride 4) .. c4 (stride 32)

  const torch::Tensor& c1() const { return blocks[0]; }
  const torch::Tensor& c2() const { return blocks[1]; }
  const torch::Tensor& c3() const { return blocks[2]; }
  const torch::Tensor& c4() const { return blocks[3]; }
};

torch::nn::Sequential conv_bn_relu(int64_t in, int64_t out, int64_t kernel, int64_t stride = 1);

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(int64_t in, int64_t out, int64_t stride);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
  torch::nn::Sequential shortcut_{nullptr};
};
TORCH_MODULE(BasicBlock);

class BottleneckImpl : public torch::nn::Module {
 public:
  BottleneckImpl(int64_t in, int64_t mid, int64_t out, int64_t stride);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, conv3_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr}, bn3_{nullptr};
  torch::nn::Sequential shortcut_{nullptr};
};
TORCH_MODULE(Bottleneck);

class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const ScaleProfile& profile);
  MultiScaleFeatures forward(const torch::Tensor& images);

 private:
  int64_t image_size_;
  torch::nn::Sequential stem_{nullptr};
  std::array<torch::nn::Sequential, 4> stages_;
};
TORCH_MODULE(Encoder);

/// GlobalNet-style pyramid head. Each level projects its encoder block to the
/// lateral width, adds the upsampled coarser level, and predicts K maps that
/// are upsampled to the heatmap size. The output is the sum over levels.
class KeypointHeadImpl : public torch::nn::Module {
 public:
  KeypointHeadImpl(const ScaleProfile& profile, int64_t num_parts);

  /// Per-level predictions ordered coarse (c4) to fine (c1), each [N, K, S, S].
  std::vector<torch::Tensor> forward_levels(const MultiScaleFeatures& features);
  HeatmapStack forward(const MultiScaleFeatures& features);

  int64_t num_parts() const { return num_parts_; }

 private:
  std::array<int64_t, 4> in_widths_;
  int64_t num_parts_;
  int64_t heatmap_size_;
  std::array<torch::nn::Sequential, 4> lateral_;
  std::array<torch::nn::Sequential, 3> upsample_;
  std::array<torch::nn::Sequential, 4> predict_;
};
TORCH_MODULE(KeypointHead);

inline constexpr std::array<double, 5> kDecoderSigmas{0.1, 0.1, 0.01, 0.01, 0.001};

/// Reconstructs an image from the source's coarsest block. Before each of the
/// five upsample + conv stages the keypoints are rendered as Gaussians at that
/// stage's resolution and concatenated onto the input channels.
class DecoderImpl : public torch::nn::Module {
 public:
  DecoderImpl(const ScaleProfile& profile, int64_t num_parts,
              std::array<double, 5> sigmas = kDecoderSigmas);

  torch::Tensor forward(const torch::Tensor& appearance, const torch::Tensor& keypoints);
  /// Outputs of the five conv stages followed by the final 3-channel image.
  std::vector<torch::Tensor> forward_stages(const torch::Tensor& appearance,
                                            const torch::Tensor& keypoints);

  const std::array<double, 5>& sigmas() const { return sigmas_; }
  /// Input channel count of each conv stage (decoder channels + parts).
  std::array<int64_t, 5> stage_input_channels() const { return stage_inputs_; }

 private:
  int64_t num_parts_;
  int64_t appearance_width_;
  std::array<double, 5> sigmas_;
  std::array<int64_t, 5> stage_inputs_{};
  std::array<torch::nn::Sequential, 5> stages_;
  torch::nn::Conv2d to_rgb_{nullptr};
};
TORCH_MODULE(Decoder);

/// Part-pooled classifier. Every encoder block is upsampled to the heatmap
/// size and reduced to `weak_width` channels; the concatenation C is pooled
/// under the first K_w normalized heatmaps and classified by one linear layer.
class WeakHeadImpl : public torch::nn::Module {
 public:
  WeakHeadImpl(const ScaleProfile& profile, int64_t num_parts, int64_t discriminative_parts,
               int64_t num_classes);

  torch::Tensor base_features(const MultiScaleFeatures& features);
  torch::Tensor forward(const MultiScaleFeatures& features, const HeatmapStack& normalized);

  /// h_k = sum_ij H_k(i, j) * C(i, j): [N, Kw, S, S] x [N, C, S, S] -> [N, Kw, C].
  static torch::Tensor pool_parts(const torch::Tensor& heatmaps, const torch::Tensor& base);

  int64_t discriminative_parts() const { return discriminative_parts_; }

 private:
  std::array<int64_t, 4> in_widths_;
  int64_t heatmap_size_;
  int64_t discriminative_parts_;
  std::array<torch::nn::Sequential, 4> reducers_;
  torch::nn::Linear classifier_{nullptr};
};
TORCH_MODULE(WeakHead);

/// Fixed feature extractor for the perceptual loss. Weights never train; they
/// are drawn from `seed` or loaded from a parameter archive.
class PerceptualNetImpl : public torch::nn::Module {
 public:
  PerceptualNetImpl(const ScaleProfile& profile, int64_t num_layers, uint64_t seed);

  /// Activations after each of the first `num_layers` pooling stages.
  std::vector<torch::Tensor> forward(const torch::Tensor& images);
  int64_t num_layers() const { return num_layers_; }
  void load_weights(const std::string& path);

 private:
  int64_t num_layers_;
  torch::nn::ModuleList convs_;
  std::vector<bool> pool_after_;
};
TORCH_MODULE(PerceptualNet);

struct ModelShape {
  ScaleProfile profile;
  int64_t num_parts = 0;
  int64_t discriminative_parts = 0;
  int64_t num_classes = 0;
  std::array<double, 5> decoder_sigmas = kDecoderSigmas;
  double softmax_temperature = 1.0;
};

struct Detection {
  HeatmapStack heatmaps;  // normalized
  torch::Tensor keypoints;  // [N, K, 2]
};

/// The four trainable sub-networks around a single shared encoder.
class KeypointModelImpl : public torch::nn::Module {
 public:
  explicit KeypointModelImpl(ModelShape shape);

  MultiScaleFeatures encode(const torch::Tensor& images);
  Detection detect(const MultiScaleFeatures& features);
  Detection detect(const torch::Tensor& images) { return detect(encode(images)); }
  torch::Tensor reconstruct(const torch::Tensor& appearance, const torch::Tensor& keypoints);
  torch::Tensor classify(const MultiScaleFeatures& features, const HeatmapStack& normalized);

  const ModelShape& shape() const { return shape_; }
  Encoder& encoder() { return encoder_; }
  KeypointHead& keypoint_head() { return keypoint_head_; }
  Decoder& decoder() { return decoder_; }
  WeakHead& weak_head() { return weak_head_; }

 private:
  ModelShape shape_;
  Encoder encoder_{nullptr};
  KeypointHead keypoint_head_{nullptr};
  Decoder decoder_{nullptr};
  WeakHead weak_head_{nullptr};
};
TORCH_MODULE(KeypointModel);

/// 1x1 convolution mapping K discovered heatmap logits to M annotated parts.
class KeypointReadoutImpl : public torch::nn::Module {
 public:
  KeypointReadoutImpl(int64_t num_parts, int64_t num_targets);
  HeatmapStack forward(const HeatmapStack& logits);
  /// Sets the readout to copy channel `source[m]` into target m.
  void select_channels(const std::vector<int64_t>& source);

  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(KeypointReadout);

}  // namespace kpd
