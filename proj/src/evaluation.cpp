#include "kpd/evaluation.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include "kpd/data.hpp"
#include "kpd/geometry.hpp"

namespace kpd {

namespace {

Eigen::MatrixXd design_matrix(const torch::Tensor& discovered) {
  auto flat = discovered.to(torch::kFloat64).contiguous().view({discovered.size(0), -1});
  const auto n = flat.size(0), d = flat.size(1);
  Eigen::MatrixXd x(n, d + 1);
  auto a = flat.accessor<double, 2>();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < d; ++j) x(i, j) = a[i][j];
    x(i, d) = 1.0;
  }
  return x;
}

Eigen::MatrixXd to_matrix(const torch::Tensor& keypoints) {
  auto flat = keypoints.to(torch::kFloat64).contiguous().view({keypoints.size(0), -1});
  Eigen::MatrixXd y(flat.size(0), flat.size(1));
  auto a = flat.accessor<double, 2>();
  for (int64_t i = 0; i < y.rows(); ++i) {
    for (int64_t j = 0; j < y.cols(); ++j) y(i, j) = a[i][j];
  }
  return y;
}

void check_batch(const torch::Tensor& t, const char* what) {
  if (t.dim() != 3 || t.size(2) != 2) {
    throw std::invalid_argument(std::string(what) + ": expected [n, K, 2] keypoints");
  }
}

}  // namespace

torch::Tensor RegressorProbe::predict(const torch::Tensor& discovered) const {
  check_batch(discovered, "probe predict");
  if (discovered.size(1) != source_parts) {
    throw std::invalid_argument("probe predict: expected " + std::to_string(source_parts) +
                                " discovered keypoints");
  }
  Eigen::MatrixXd y = design_matrix(discovered) * weights;
  auto out = torch::empty({y.rows(), y.cols()}, torch::kFloat64);
  auto a = out.accessor<double, 2>();
  for (int64_t i = 0; i < y.rows(); ++i) {
    for (int64_t j = 0; j < y.cols(); ++j) a[i][j] = y(i, j);
  }
  return out.view({y.rows(), target_parts, 2});
}

RegressorProbe fit_probe(const torch::Tensor& discovered, const torch::Tensor& annotated) {
  check_batch(discovered, "fit_probe");
  check_batch(annotated, "fit_probe");
  if (discovered.size(0) != annotated.size(0)) {
    throw std::invalid_argument("fit_probe: sample count mismatch");
  }
  const int64_t k = discovered.size(1);
  if (discovered.size(0) < 2 * k + 1) {
    throw std::invalid_argument("fit_probe: need at least 2K + 1 = " + std::to_string(2 * k + 1) +
                                " samples, got " + std::to_string(discovered.size(0)));
  }
  const Eigen::MatrixXd x = design_matrix(discovered);
  const Eigen::MatrixXd y = to_matrix(annotated);
  Eigen::MatrixXd gram = x.transpose() * x;
  const Eigen::MatrixXd rhs = x.transpose() * y;

  RegressorProbe probe;
  probe.source_parts = k;
  probe.target_parts = annotated.size(1);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(gram);
  lu.setThreshold(1e-12);
  if (lu.rank() < gram.rows()) {
    probe.ridge_fallback = true;
    gram.diagonal().array() += 1e-6;
    probe.weights = gram.ldlt().solve(rhs);
  } else {
    probe.weights = lu.solve(rhs);
  }
  return probe;
}

double normalized_error(const torch::Tensor& predicted, const torch::Tensor& ground_truth,
                        const torch::Tensor& normalizers) {
  check_batch(predicted, "normalized_error");
  if (!predicted.sizes().equals(ground_truth.sizes())) {
    throw std::invalid_argument("normalized_error: prediction and ground truth arity differ");
  }
  auto norm = normalizers.to(torch::kFloat64).reshape({-1});
  if (norm.numel() != 1 && norm.numel() != predicted.size(0)) {
    throw std::invalid_argument("normalized_error: need one normalizer or one per sample");
  }
  if ((norm <= 0).any().item<bool>()) {
    throw std::invalid_argument("normalized_error: normalizer must be positive");
  }
  auto dist = (predicted.to(torch::kFloat64) - ground_truth.to(torch::kFloat64)).norm(2, -1);
  return 100.0 * (dist / norm.view({-1, 1})).mean().item<double>();
}

double normalized_error(const torch::Tensor& predicted, const torch::Tensor& ground_truth,
                        double normalizer) {
  return normalized_error(predicted, ground_truth,
                          torch::tensor({normalizer}, torch::kFloat64));
}

torch::Tensor inter_ocular_distance(const torch::Tensor& ground_truth, int64_t left_eye,
                                    int64_t right_eye) {
  check_batch(ground_truth, "inter_ocular_distance");
  return (ground_truth.select(1, left_eye) - ground_truth.select(1, right_eye))
      .to(torch::kFloat64)
      .norm(2, -1);
}

PckResult pck(const torch::Tensor& predicted, const torch::Tensor& ground_truth,
              const torch::Tensor& visible, const torch::Tensor& bbox_size, double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("pck: alpha must be positive");
  check_batch(predicted, "pck");
  if (!predicted.sizes().equals(ground_truth.sizes())) {
    throw std::invalid_argument("pck: prediction and ground truth arity differ");
  }
  const auto n = predicted.size(0), m = predicted.size(1);
  auto dist = (predicted.to(torch::kFloat64) - ground_truth.to(torch::kFloat64)).norm(2, -1);
  auto threshold = alpha * bbox_size.to(torch::kFloat64).reshape({n, 1});
  auto vis = visible.to(torch::kBool).reshape({n, m});
  auto hit = (dist <= threshold).logical_and(vis);

  PckResult out;
  out.alpha = alpha;
  auto hits = hit.sum(0).to(torch::kLong);
  auto counts = vis.sum(0).to(torch::kLong);
  for (int64_t j = 0; j < m; ++j) {
    const auto c = counts[j].item<int64_t>();
    out.per_keypoint.push_back(c == 0 ? std::numeric_limits<double>::quiet_NaN()
                                      : double(hits[j].item<int64_t>()) / double(c));
  }
  out.correct = hits.sum().item<int64_t>();
  out.evaluated = counts.sum().item<int64_t>();
  out.defined = out.evaluated > 0;
  out.mean = out.defined ? double(out.correct) / double(out.evaluated)
                         : std::numeric_limits<double>::quiet_NaN();
  return out;
}

// ---------------------------------------------------------------------------

namespace {

torch::Tensor posture_features(const torch::Tensor& keypoints, bool centroid_normalize) {
  check_batch(keypoints, "posture_classifier");
  auto k = keypoints.to(torch::kFloat64);
  if (centroid_normalize) k = k - k.mean(1, true);
  return k.reshape({k.size(0), -1});
}

}  // namespace

PostureResult posture_classifier(const torch::Tensor& train_keypoints,
                                 const std::vector<int64_t>& train_labels,
                                 const torch::Tensor& test_keypoints,
                                 const std::vector<int64_t>& test_labels,
                                 const PostureOptions& options) {
  if (train_keypoints.size(0) != int64_t(train_labels.size()) ||
      test_keypoints.size(0) != int64_t(test_labels.size())) {
    throw std::invalid_argument("posture_classifier: label count mismatch");
  }
  if (train_labels.empty()) throw std::invalid_argument("posture_classifier: empty training set");
  const int64_t classes =
      1 + std::max(*std::max_element(train_labels.begin(), train_labels.end()),
                   test_labels.empty() ? int64_t(0)
                                       : *std::max_element(test_labels.begin(), test_labels.end()));
  std::vector<int64_t> distinct(train_labels);
  std::sort(distinct.begin(), distinct.end());
  if (std::unique(distinct.begin(), distinct.end()) - distinct.begin() < 2) {
    throw std::invalid_argument("posture_classifier: training set has a single class");
  }

  auto x_train = posture_features(train_keypoints, options.centroid_normalize);
  auto x_test = posture_features(test_keypoints, options.centroid_normalize);
  auto mean = x_train.mean(0, true);
  auto scale = x_train.std(0, false, true).clamp_min(1e-8);
  x_train = (x_train - mean) / scale;
  x_test = (x_test - mean) / scale;
  auto y_train = torch::tensor(train_labels, torch::kLong);

  torch::manual_seed(options.seed);
  auto mlp = torch::nn::Sequential(torch::nn::Linear(x_train.size(1), options.hidden),
                                   torch::nn::ReLU(), torch::nn::Linear(options.hidden, classes));
  mlp->to(torch::kFloat64);
  torch::optim::SGD optimizer(mlp->parameters(),
                              torch::optim::SGDOptions(options.lr).momentum(options.momentum));

  PostureResult result;
  std::mt19937_64 rng(options.seed);
  std::vector<int64_t> order(x_train.size(0));
  std::iota(order.begin(), order.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  int64_t stale = 0;
  for (int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (size_t begin = 0; begin < order.size(); begin += size_t(options.batch)) {
      const size_t end = std::min(order.size(), begin + size_t(options.batch));
      auto idx = torch::tensor(std::vector<int64_t>(order.begin() + begin, order.begin() + end),
                               torch::kLong);
      auto loss = torch::cross_entropy_loss(mlp->forward(x_train.index_select(0, idx)),
                                            y_train.index_select(0, idx));
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
      total += loss.item<double>() * double(end - begin);
    }
    ++result.epochs_run;
    total /= double(order.size());
    if (total < best - 1e-4) {
      best = total;
      stale = 0;
    } else if (++stale >= options.patience) {
      break;
    }
  }

  torch::NoGradGuard guard;
  result.confusion.assign(classes, std::vector<int64_t>(classes, 0));
  if (test_labels.empty()) return result;
  auto predicted = mlp->forward(x_test).argmax(1);
  int64_t correct = 0;
  for (size_t i = 0; i < test_labels.size(); ++i) {
    const auto p = predicted[int64_t(i)].item<int64_t>();
    result.predictions.push_back(p);
    ++result.confusion[test_labels[i]][p];
    correct += p == test_labels[i];
  }
  result.accuracy = double(correct) / double(test_labels.size());
  return result;
}

void write_confusion_csv(const std::filesystem::path& path, const PostureResult& result) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "true\\predicted";
  for (size_t j = 0; j < result.confusion.size(); ++j) out << "," << j;
  out << "\n";
  for (size_t i = 0; i < result.confusion.size(); ++i) {
    out << i;
    for (auto c : result.confusion[i]) out << "," << c;
    out << "\n";
  }
}

// ---------------------------------------------------------------------------

torch::Tensor KeypointEdit::apply(const torch::Tensor& keypoints) const {
  auto k = flip ? flip_keypoints(keypoints) : keypoints;
  if (scale != 1.0) {
    auto centroid = k.mean(1, true);
    k = centroid + scale * (k - centroid);
  }
  if (shift_u != 0.0 || shift_v != 0.0) {
    auto shift = torch::tensor({shift_u, shift_v}, k.options());
    k = k + shift;
  }
  return k;
}

torch::Tensor manipulate(KeypointModel& model, const torch::Tensor& geometry_images,
                         const torch::Tensor& appearance_images, const KeypointEdit& edit) {
  torch::NoGradGuard guard;
  model->eval();
  auto keypoints = model->detect(geometry_images).keypoints;
  auto appearance = model->encode(appearance_images).c4();
  return model->reconstruct(appearance, edit.apply(keypoints));
}

torch::Tensor overlay_keypoints(const torch::Tensor& image, const torch::Tensor& keypoints) {
  static const double palette[][3] = {{1, 0, 0},   {0, 1, 0},   {0, 0, 1},     {1, 1, 0},
                                      {1, 0, 1},   {0, 1, 1},   {1, 0.5, 0},   {0.5, 0, 1},
                                      {0, 0.5, 0}, {0.5, 0.5, 1}, {1, 0.5, 0.5}, {0.3, 0.3, 0.3}};
  auto out = image.detach().to(torch::kFloat32).clone().contiguous();
  const auto h = out.size(1), w = out.size(2);
  auto kp = keypoints.detach().to(torch::kFloat64).contiguous();
  auto a = out.accessor<float, 3>();
  const double radius = std::max(1.0, double(w) / 40.0);
  for (int64_t k = 0; k < kp.size(0); ++k) {
    const double x = kp[k][0].item<double>() * double(w) - 0.5;
    const double y = kp[k][1].item<double>() * double(h) - 0.5;
    const auto* color = palette[k % 12];
    for (auto i = int64_t(std::floor(y - radius)); i <= int64_t(std::ceil(y + radius)); ++i) {
      for (auto j = int64_t(std::floor(x - radius)); j <= int64_t(std::ceil(x + radius)); ++j) {
        if (i < 0 || j < 0 || i >= h || j >= w) continue;
        if ((i - y) * (i - y) + (j - x) * (j - x) > radius * radius) continue;
        for (int c = 0; c < 3; ++c) a[c][i][j] = float(color[c]);
      }
    }
  }
  return out;
}

VisualMode visual_mode_from_string(const std::string& name) {
  if (name == "keypoints") return VisualMode::keypoints;
  if (name == "reconstruction") return VisualMode::reconstruction;
  if (name == "manipulation") return VisualMode::manipulation;
  throw std::invalid_argument("unknown visual mode '" + name +
                              "' (expected keypoints, reconstruction or manipulation)");
}

std::vector<std::filesystem::path> dump_visuals(KeypointModel& model,
                                                const std::vector<torch::Tensor>& images,
                                                const std::vector<std::string>& names,
                                                VisualMode mode, const std::filesystem::path& dir) {
  if (images.size() != names.size()) {
    throw std::invalid_argument("dump_visuals: one name per image required");
  }
  std::filesystem::create_directories(dir);
  const char* suffix = mode == VisualMode::keypoints        ? "keypoints"
                       : mode == VisualMode::reconstruction ? "reconstruction"
                                                            : "manipulation";
  std::vector<std::filesystem::path> written;
  if (images.empty()) return written;
  torch::NoGradGuard guard;
  model->eval();
  auto batch = torch::stack(images);
  auto keypoints = model->detect(batch).keypoints;
  const auto n = batch.size(0);

  std::vector<torch::Tensor> rows(n);
  if (mode == VisualMode::keypoints) {
    for (int64_t i = 0; i < n; ++i) rows[i] = overlay_keypoints(batch[i], keypoints[i]);
  } else if (mode == VisualMode::reconstruction) {
    auto recon = manipulate(model, batch, batch, {}).clamp(0, 1);
    for (int64_t i = 0; i < n; ++i) rows[i] = torch::cat({batch[i], recon[i]}, 2);
  } else {
    // Columns: input, flipped geometry, scaled geometry, shifted geometry,
    // geometry of this image with the appearance of the next one.
    auto rolled = torch::roll(batch, 1, 0);
    KeypointEdit flip{true, 1.0, 0.0, 0.0};
    KeypointEdit scale{false, 1.25, 0.0, 0.0};
    KeypointEdit shift{false, 1.0, 0.1, 0.0};
    auto a = manipulate(model, batch, batch, flip).clamp(0, 1);
    auto b = manipulate(model, batch, batch, scale).clamp(0, 1);
    auto c = manipulate(model, batch, batch, shift).clamp(0, 1);
    auto d = manipulate(model, batch, rolled, {}).clamp(0, 1);
    for (int64_t i = 0; i < n; ++i) rows[i] = torch::cat({batch[i], a[i], b[i], c[i], d[i]}, 2);
  }
  for (int64_t i = 0; i < n; ++i) {
    auto path = dir / (names[i] + "_" + suffix + ".png");
    save_png(rows[i], path);
    written.push_back(path);
  }
  return written;
}

}  // namespace kpd
