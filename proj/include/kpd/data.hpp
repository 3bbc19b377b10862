#pragma once

// Dataset records, manifests, training pairs and the synthetic creature set.
//
// Manifest format (JSON lines, paths relative to the manifest directory):
//   {"manifest_version": 1, "keypoint_arity": M, "num_classes": C}
//   {"image": "images/000000.png", "label": 2, "split": "train",
//    "keypoints": [[x, y, visible], ...], "bbox": [x, y, w, h]}
// Keypoints and bounding boxes are in pixels of the original image; pixel j
// spans [j, j + 1).

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "kpd/tps.hpp"

namespace kpd {

enum class Split { train, val, test };

std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct AnnotatedKeypoint {
  double x = 0.0;
  double y = 0.0;
  bool visible = true;

  bool operator==(const AnnotatedKeypoint&) const = default;
};

struct BoundingBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  bool operator==(const BoundingBox&) const = default;
};

struct SampleRecord {
  std::string image_path;
  int64_t class_label = 0;
  std::optional<std::vector<AnnotatedKeypoint>> keypoints;
  std::optional<BoundingBox> bbox;
  Split split = Split::train;

  bool operator==(const SampleRecord&) const = default;
};

struct Manifest {
  int64_t keypoint_arity = 0;
  int64_t num_classes = 0;
  std::vector<SampleRecord> records;
  std::filesystem::path root;  // directory image paths are relative to

  std::filesystem::path resolve(const SampleRecord& record) const;
  std::vector<const SampleRecord*> select(Split split) const;
};

Manifest load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

/// Aspect-preserving pad-to-square followed by resize to size x size.
struct Letterbox {
  double side = 1.0;  // padded square side in original pixels
  double pad_x = 0.0;
  double pad_y = 0.0;

  /// Original pixel position -> normalized [0,1]^2 coordinate.
  std::array<double, 2> normalize(double x, double y) const {
    return {(x + pad_x) / side, (y + pad_y) / side};
  }
};

/// Loads an image as [3, size, size] float RGB in [0, 1].
torch::Tensor load_image(const std::filesystem::path& path, int64_t size,
                         Letterbox* letterbox = nullptr);
void save_png(const torch::Tensor& image, const std::filesystem::path& path);

/// An evaluation sample with annotations mapped into normalized coordinates.
struct LabeledSample {
  torch::Tensor image;      // [3, S, S]
  torch::Tensor keypoints;  // [M, 2] normalized
  torch::Tensor visible;    // [M] bool
  double bbox_size = 1.0;   // max(w, h) of the box, normalized
  double bbox_diagonal = 1.0;
  int64_t class_label = 0;
};

LabeledSample load_labeled(const Manifest& manifest, const SampleRecord& record, int64_t size);

/// Source/target pair. Carries no keypoint annotations.
struct TrainPair {
  torch::Tensor source;
  torch::Tensor target;
  TpsWarp warp;
  int64_t label = 0;
};

struct PairOptions {
  int tps_grid = 5;
  double tps_scale = 0.05;
  bool jitter = true;
  double jitter_strength = 0.1;  // brightness and contrast, fraction
};

/// Generator for (seed, epoch, record) so per-record work is order-independent.
std::mt19937_64 record_rng(uint64_t seed, uint64_t epoch, uint64_t index);

TrainPair make_pair(const torch::Tensor& image, int64_t label, std::mt19937_64& rng,
                    const PairOptions& options);
TrainPair make_pair(const Manifest& manifest, const SampleRecord& record, int64_t size,
                    std::mt19937_64& rng, const PairOptions& options);

// ---------------------------------------------------------------------------
// Synthetic creatures: head disc + body ellipse + four limb strokes, facing
// left or right, with a per-class head colour.

inline constexpr int64_t kToyParts = 6;
inline constexpr std::array<const char*, kToyParts> kToyPartNames{
    "head", "body", "front_outer_foot", "front_inner_foot", "back_inner_foot", "back_outer_foot"};

struct ToyCreature {
  int64_t class_label = 0;
  bool facing_right = true;
  std::array<std::array<double, 2>, kToyParts> parts{};  // normalized (u, v)
  BoundingBox bbox;                                      // normalized
};

struct ToyDataset {
  int64_t image_size = 64;
  int64_t num_classes = 3;
  std::vector<torch::Tensor> images;  // [3, S, S] float in [0, 1]
  std::vector<ToyCreature> creatures;
};

/// Head colour for a class; distinct for every class index.
std::array<uint8_t, 3> toy_class_color(int64_t class_label);

ToyDataset synth_toy_dataset(int64_t n, uint64_t seed, int64_t image_size = 64,
                             int64_t num_classes = 3);

/// Split rule used for toy data: index % 10 == 8 -> val, == 9 -> test.
Split toy_split(int64_t index);

/// Writes images/NNNNNN.png, manifest.jsonl and ground_truth.json.
void write_toy_dataset(const ToyDataset& data, const std::filesystem::path& dir);

}  // namespace kpd
