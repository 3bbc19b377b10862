#include "kpd/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "kpd/viewpoint_sampler.hpp"

namespace kpd {

namespace fs = std::filesystem;
using nlohmann::json;

void configure_runtime(uint64_t seed, bool deterministic) {
  torch::manual_seed(seed);
  if (deterministic) {
    torch::set_num_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, false);
  }
}

ModelShape model_shape(const TrainConfig& config) {
  ModelShape shape;
  shape.profile = config.profile;
  shape.num_parts = config.parts;
  shape.discriminative_parts = config.discriminative_parts;
  shape.num_classes = config.classes;
  shape.softmax_temperature = config.softmax_temperature;
  return shape;
}

// ---------------------------------------------------------------------------

namespace {

using NamedModule = std::pair<const char*, torch::nn::Module*>;

std::array<NamedModule, 4> submodules(KeypointModel& model) {
  return {NamedModule{"encoder", model->encoder().ptr().get()},
          NamedModule{"keypoint_head", model->keypoint_head().ptr().get()},
          NamedModule{"decoder", model->decoder().ptr().get()},
          NamedModule{"weak_head", model->weak_head().ptr().get()}};
}

void copy_state(torch::nn::Module& from, torch::nn::Module& to) {
  torch::NoGradGuard guard;
  auto src_params = from.named_parameters(true);
  for (auto& p : to.named_parameters(true)) p.value().copy_(src_params[p.key()]);
  auto src_buffers = from.named_buffers(true);
  for (auto& b : to.named_buffers(true)) b.value().copy_(src_buffers[b.key()]);
}

torch::Tensor stack_images(const std::vector<torch::Tensor>& images, size_t begin, size_t end) {
  std::vector<torch::Tensor> slice(images.begin() + begin, images.begin() + end);
  return torch::stack(slice);
}

}  // namespace

void save_checkpoint(const fs::path& path, const TrainConfig& config, KeypointModel& model,
                     int64_t epoch, torch::optim::Optimizer* optimizer, KeypointReadout* readout) {
  torch::serialize::OutputArchive archive;
  archive.write("format", c10::IValue(std::string(kCheckpointFormat)));
  archive.write("config", c10::IValue(to_config_text(config)));
  archive.write("epoch", c10::IValue(epoch));
  for (auto [name, module] : submodules(model)) {
    torch::serialize::OutputArchive sub;
    module->save(sub);
    archive.write(name, sub);
  }
  if (optimizer) {
    torch::serialize::OutputArchive sub;
    optimizer->save(sub);
    archive.write("optimizer", sub);
  }
  if (readout && *readout) {
    torch::serialize::OutputArchive sub;
    (*readout)->save(sub);
    archive.write("readout", sub);
    archive.write("readout_targets", c10::IValue((*readout)->conv->weight.size(0)));
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  archive.save_to(tmp.string());
  fs::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  c10::IValue format;
  if (!archive.try_read("format", format) || !format.isString() ||
      format.toStringRef() != kCheckpointFormat) {
    throw std::runtime_error(path.string() + ": not a " + std::string(kCheckpointFormat) +
                             " archive");
  }
  c10::IValue config_text, epoch;
  archive.read("config", config_text);
  archive.read("epoch", epoch);

  LoadedCheckpoint out;
  out.config = parse_config_text(config_text.toStringRef());
  out.epoch = epoch.toInt();
  out.model = KeypointModel(model_shape(out.config));
  for (auto [name, module] : submodules(out.model)) {
    torch::serialize::InputArchive sub;
    archive.read(name, sub);
    module->load(sub);
  }
  c10::IValue targets;
  if (archive.try_read("readout_targets", targets)) {
    out.readout = KeypointReadout(out.config.parts, targets.toInt());
    torch::serialize::InputArchive sub;
    archive.read("readout", sub);
    out.readout->load(sub);
  }
  torch::serialize::InputArchive optimizer;
  if (archive.try_read("optimizer", optimizer)) out.optimizer_state = std::move(optimizer);
  return out;
}

std::string parameter_checksum(torch::nn::Module& module) {
  std::string bytes;
  auto append = [&bytes](const std::string& name, const torch::Tensor& t) {
    auto c = t.detach().to(torch::kCPU).contiguous();
    bytes += name;
    bytes.append(static_cast<const char*>(c.data_ptr()), c.numel() * c.element_size());
  };
  for (const auto& p : module.named_parameters(true)) append(p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) append(b.key(), b.value());
  return sha256_hex(bytes.data(), bytes.size());
}

// ---------------------------------------------------------------------------

ImageSet load_image_set(const Manifest& manifest, Split split, int64_t image_size) {
  ImageSet set;
  for (const auto* r : manifest.select(split)) {
    set.images.push_back(load_image(manifest.resolve(*r), image_size));
    set.labels.push_back(r->class_label);
  }
  return set;
}

ImageSet toy_image_set(const ToyDataset& data, Split split) {
  ImageSet set;
  for (size_t i = 0; i < data.images.size(); ++i) {
    if (toy_split(int64_t(i)) != split) continue;
    set.images.push_back(data.images[i]);
    set.labels.push_back(data.creatures[i].class_label);
  }
  return set;
}

Trainer::Trainer(TrainConfig config) : config_(std::move(config)) {
  config_.validate();
  torch::manual_seed(config_.seed);
  model_ = KeypointModel(model_shape(config_));
  if (!config_.pretrained_encoder.empty()) {
    torch::serialize::InputArchive archive;
    archive.load_from(config_.pretrained_encoder);
    model_->encoder()->load(archive);
  }
  perceptual_ = PerceptualNet(config_.profile, config_.perceptual_layers,
                              config_.seed ^ 0x9e3779b97f4a7c15ULL);
  if (!config_.perceptual_weights.empty()) perceptual_->load_weights(config_.perceptual_weights);
  optimizer_ = std::make_unique<torch::optim::SGD>(
      model_->parameters(), torch::optim::SGDOptions(config_.lr).momentum(config_.momentum));
}

void Trainer::set_learning_rate(double lr) {
  for (auto& group : optimizer_->param_groups()) {
    static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
  }
}

StepScalars Trainer::train_step(const std::vector<TrainPair>& batch, int64_t epoch) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  std::vector<torch::Tensor> sources, targets;
  std::vector<int64_t> label_values;
  for (const auto& pair : batch) {
    sources.push_back(pair.source);
    targets.push_back(pair.target);
    label_values.push_back(pair.label);
  }
  auto target = torch::stack(targets);
  auto labels = torch::tensor(label_values, torch::kLong);
  const auto& w = config_.weights;

  model_->train();
  auto target_features = model_->encode(target);
  auto detection = model_->detect(target_features);

  StepScalars out;
  LossComponents components;
  if (w.perceptual > 0.0) {
    auto source_features = model_->encode(torch::stack(sources));
    auto keypoints = detection.keypoints;
    if (config_.bottleneck_grad_cap > 0.0 && keypoints.requires_grad()) {
      keypoints = keypoints.view_as(keypoints);
      const double cap = config_.bottleneck_grad_cap;
      keypoints.register_hook([cap](torch::Tensor grad) {
        auto norm = grad.norm(2, -1, true);
        return grad * torch::clamp_max(cap / norm.clamp_min(1e-30), 1.0);
      });
    }
    auto reconstruction = model_->reconstruct(source_features.c4(), keypoints);
    components.perceptual = perceptual_loss(perceptual_, target, reconstruction);
  }
  if (w.weak > 0.0) {
    auto logits = model_->classify(target_features, detection.heatmaps);
    components.weak = weak_loss(logits, labels);
    out.correct = logits.argmax(1).eq(labels).sum().item<int64_t>();
  }
  if (w.equivariance_active(epoch)) {
    auto mined = sample_equivariance_batch(detection.keypoints.detach(), target,
                                           config_.sampler(int64_t(batch.size())));
    auto flipped = model_->detect(mined.images);
    components.equivariance =
        equivariance_loss(flipped.keypoints, mined.labels, config_.equivariance_reduction);
  }

  auto check = [](const torch::Tensor& t, const char* name) -> double {
    if (!t.defined()) return 0.0;
    const double v = t.item<double>();
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string("train_step: non-finite ") + name + " loss");
    }
    return v;
  };
  out.perceptual = check(components.perceptual, "L_perc");
  out.weak = check(components.weak, "L_w");
  if (components.equivariance.defined()) {
    out.equivariance = check(components.equivariance, "L_v");
  }
  auto total = total_loss(components, w, epoch);
  out.total = check(total, "total");
  out.count = int64_t(batch.size());

  optimizer_->zero_grad();
  if (total.requires_grad()) total.backward();
  optimizer_->step();
  return out;
}

std::pair<double, double> Trainer::validate(const std::vector<TrainPair>& pairs) {
  if (pairs.empty()) return {0.0, 0.0};
  torch::NoGradGuard guard;
  model_->eval();
  const auto& w = config_.weights;
  double loss = 0.0;
  int64_t correct = 0;
  const size_t chunk = 64;
  for (size_t begin = 0; begin < pairs.size(); begin += chunk) {
    const size_t end = std::min(pairs.size(), begin + chunk);
    std::vector<torch::Tensor> sources, targets;
    std::vector<int64_t> labels;
    for (size_t i = begin; i < end; ++i) {
      sources.push_back(pairs[i].source);
      targets.push_back(pairs[i].target);
      labels.push_back(pairs[i].label);
    }
    auto target = torch::stack(targets);
    auto label_tensor = torch::tensor(labels, torch::kLong);
    auto features = model_->encode(target);
    auto detection = model_->detect(features);
    const double n = double(end - begin);
    if (w.perceptual > 0.0) {
      auto reconstruction =
          model_->reconstruct(model_->encode(torch::stack(sources)).c4(), detection.keypoints);
      loss += w.perceptual * perceptual_loss(perceptual_, target, reconstruction).item<double>() * n;
    }
    auto logits = model_->classify(features, detection.heatmaps);
    if (w.weak > 0.0) loss += w.weak * weak_loss(logits, label_tensor).item<double>() * n;
    correct += logits.argmax(1).eq(label_tensor).sum().item<int64_t>();
  }
  model_->train();
  return {loss / double(pairs.size()), double(correct) / double(pairs.size())};
}

void RunLog::write_csv(const fs::path& path) const {
  std::ofstream out(path);
  out << "epoch,L_perc,L_w,L_v,total,acc\n";
  out.precision(9);
  for (const auto& e : epochs) {
    out << e.epoch << "," << e.perceptual << "," << e.weak << ",";
    if (e.equivariance) out << *e.equivariance;
    else out << "inactive";
    out << "," << e.total << "," << e.accuracy << "\n";
  }
}

void RunLog::write_summary(const fs::path& path, const TrainConfig& config) const {
  json epochs_json = json::array();
  for (const auto& e : epochs) {
    epochs_json.push_back({{"epoch", e.epoch},
                           {"L_perc", e.perceptual},
                           {"L_w", e.weak},
                           {"L_v", e.equivariance ? json(*e.equivariance) : json("inactive")},
                           {"total", e.total},
                           {"acc", e.accuracy},
                           {"val_loss", e.val_loss},
                           {"val_acc", e.val_accuracy}});
  }
  json summary{{"preset", config.preset},
               {"config_hash", config_hash(config)},
               {"epochs", epochs_json},
               {"checkpoints", checkpoints},
               {"final_checkpoint", final_checkpoint},
               {"best_checkpoint", best_checkpoint},
               {"wall_seconds", wall_seconds}};
  std::ofstream(path) << summary.dump(2) << "\n";
}

RunLog train(const TrainConfig& config, const ImageSet& train_set, const ImageSet& val_set,
             const EpochCallback& on_epoch) {
  const auto start = std::chrono::steady_clock::now();
  configure_runtime(config.seed, config.deterministic);
  if (train_set.size() < 2) throw std::invalid_argument("train: need at least two images");
  Trainer trainer(config);
  const fs::path out_dir(config.out);
  fs::create_directories(out_dir);

  int64_t first_epoch = 1;
  double best_val = std::numeric_limits<double>::infinity();
  if (!config.resume.empty()) {
    auto ck = load_checkpoint(config.resume);
    if (config_hash(ck.config) != config_hash(config)) {
      throw std::invalid_argument("train: resume checkpoint " + config.resume +
                                  " was produced with a different configuration (hash mismatch)");
    }
    copy_state(*ck.model, *trainer.model());
    if (ck.optimizer_state) trainer.optimizer().load(*ck.optimizer_state);
    first_epoch = ck.epoch + 1;
  }

  PairOptions pair_options;
  pair_options.tps_grid = config.tps_grid;
  pair_options.tps_scale = config.tps_scale;
  pair_options.jitter = config.jitter;

  std::vector<TrainPair> val_pairs;
  for (size_t i = 0; i < val_set.size(); ++i) {
    auto rng = record_rng(config.seed, 0, 1'000'000'000ULL + i);
    val_pairs.push_back(make_pair(val_set.images[i], val_set.labels[i], rng, pair_options));
  }

  RunLog log;
  for (int64_t epoch = first_epoch; epoch <= config.epochs; ++epoch) {
    trainer.set_learning_rate(config.lr * std::pow(config.lr_decay, double(epoch - 1)));
    std::vector<int64_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    auto shuffle_rng = record_rng(config.seed, uint64_t(epoch), ~0ULL);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochRecord record;
    record.epoch = epoch;
    double sum_p = 0, sum_w = 0, sum_v = 0, sum_total = 0;
    int64_t steps = 0, steps_v = 0, correct = 0, seen = 0;
    for (size_t begin = 0; begin + 2 <= order.size(); begin += size_t(config.batch)) {
      const size_t end = std::min(order.size(), begin + size_t(config.batch));
      if (end - begin < 2) break;
      std::vector<TrainPair> batch;
      for (size_t i = begin; i < end; ++i) {
        auto rng = record_rng(config.seed, uint64_t(epoch), uint64_t(order[i]));
        batch.push_back(make_pair(train_set.images[order[i]], train_set.labels[order[i]], rng,
                                  pair_options));
      }
      auto scalars = trainer.train_step(batch, epoch);
      sum_p += scalars.perceptual;
      sum_w += scalars.weak;
      sum_total += scalars.total;
      if (scalars.equivariance) {
        sum_v += *scalars.equivariance;
        ++steps_v;
      }
      correct += scalars.correct;
      seen += scalars.count;
      ++steps;
    }
    record.perceptual = sum_p / double(std::max<int64_t>(steps, 1));
    record.weak = sum_w / double(std::max<int64_t>(steps, 1));
    record.total = sum_total / double(std::max<int64_t>(steps, 1));
    if (steps_v > 0) record.equivariance = sum_v / double(steps_v);
    record.accuracy = double(correct) / double(std::max<int64_t>(seen, 1));
    std::tie(record.val_loss, record.val_accuracy) = trainer.validate(val_pairs);
    log.epochs.push_back(record);

    if (epoch % config.checkpoint_interval == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%03lld.ckpt", static_cast<long long>(epoch));
      save_checkpoint(out_dir / name, config, trainer.model(), epoch, &trainer.optimizer());
      log.checkpoints.push_back((out_dir / name).string());
    }
    save_checkpoint(out_dir / "last.ckpt", config, trainer.model(), epoch, &trainer.optimizer());
    const double val = val_pairs.empty() ? record.total : record.val_loss;
    if (val < best_val) {
      best_val = val;
      save_checkpoint(out_dir / "best.ckpt", config, trainer.model(), epoch, &trainer.optimizer());
      log.best_checkpoint = (out_dir / "best.ckpt").string();
    }
    if (on_epoch) on_epoch(record, trainer);
  }
  if (first_epoch > config.epochs) {
    save_checkpoint(out_dir / "last.ckpt", config, trainer.model(), first_epoch - 1,
                    &trainer.optimizer());
  }
  log.final_checkpoint = (out_dir / "last.ckpt").string();
  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  log.write_csv(out_dir / "run_log.csv");
  log.write_summary(out_dir / "run_summary.json", config);
  return log;
}

RunLog train(const TrainConfig& config) {
  const int64_t size = config.profile.image_size;
  if (config.manifest.empty()) {
    auto data = synth_toy_dataset(config.n, config.seed, size, config.classes);
    return train(config, toy_image_set(data, Split::train), toy_image_set(data, Split::val));
  }
  auto manifest = load_manifest(config.manifest);
  if (manifest.num_classes != config.classes) {
    throw std::invalid_argument("train: manifest declares " + std::to_string(manifest.num_classes) +
                                " classes, config expects " + std::to_string(config.classes));
  }
  return train(config, load_image_set(manifest, Split::train, size),
               load_image_set(manifest, Split::val, size));
}

// ---------------------------------------------------------------------------

LabeledSet LabeledSet::subset(const std::vector<int64_t>& indices) const {
  LabeledSet out;
  auto index = torch::tensor(indices, torch::kLong);
  for (auto i : indices) {
    out.images.push_back(images[i]);
    out.labels.push_back(labels[i]);
  }
  out.keypoints = keypoints.index_select(0, index);
  out.visible = visible.index_select(0, index);
  out.bbox_size = bbox_size.index_select(0, index);
  return out;
}

LabeledSet load_labeled_set(const Manifest& manifest, Split split, int64_t image_size,
                            const std::string& bbox_normalizer) {
  LabeledSet set;
  std::vector<torch::Tensor> kps, vis;
  std::vector<double> boxes;
  for (const auto* r : manifest.select(split)) {
    if (!r->keypoints) {
      throw std::invalid_argument("labeled set: record " + r->image_path + " has no keypoints");
    }
    auto s = load_labeled(manifest, *r, image_size);
    set.images.push_back(s.image);
    set.labels.push_back(s.class_label);
    kps.push_back(s.keypoints);
    vis.push_back(s.visible);
    boxes.push_back(bbox_normalizer == "diagonal" ? s.bbox_diagonal : s.bbox_size);
  }
  const int64_t m = manifest.keypoint_arity;
  set.keypoints = kps.empty() ? torch::zeros({0, m, 2}, torch::kFloat64) : torch::stack(kps);
  set.visible = vis.empty() ? torch::zeros({0, m}, torch::kBool) : torch::stack(vis);
  set.bbox_size = torch::tensor(boxes, torch::kFloat64);
  return set;
}

LabeledSet toy_labeled_set(const ToyDataset& data, Split split) {
  LabeledSet set;
  std::vector<double> coords, boxes;
  for (size_t i = 0; i < data.images.size(); ++i) {
    if (toy_split(int64_t(i)) != split) continue;
    const auto& c = data.creatures[i];
    set.images.push_back(data.images[i]);
    set.labels.push_back(c.class_label);
    for (const auto& p : c.parts) {
      coords.push_back(p[0]);
      coords.push_back(p[1]);
    }
    boxes.push_back(std::max(c.bbox.w, c.bbox.h));
  }
  const auto n = int64_t(set.images.size());
  set.keypoints = torch::tensor(coords, torch::kFloat64).view({n, kToyParts, 2});
  set.visible = torch::ones({n, kToyParts}, torch::kBool);
  set.bbox_size = torch::tensor(boxes, torch::kFloat64);
  return set;
}

std::vector<int64_t> nested_subset(int64_t n, double fraction, uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("nested_subset: fraction must lie in (0, 1]");
  }
  const auto count = static_cast<int64_t>(std::floor(fraction * double(n) + 1e-9));
  if (count < 1) {
    std::ostringstream msg;
    msg << "finetune: fraction " << fraction << " of " << n << " samples selects none";
    throw std::invalid_argument(msg.str());
  }
  auto mix = [seed](uint64_t i) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (i + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    const auto ha = mix(uint64_t(a)), hb = mix(uint64_t(b));
    return ha != hb ? ha < hb : a < b;
  });
  order.resize(count);
  return order;
}

torch::Tensor supervised_heatmap_loss(const HeatmapStack& logits, const torch::Tensor& targets,
                                      const torch::Tensor& visible, double sigma) {
  if (logits.kind != HeatmapKind::logits) {
    throw std::invalid_argument("supervised_heatmap_loss: expects logits");
  }
  const auto& x = logits.values;
  auto target = render_gaussian(targets.to(x.dtype()), sigma, x.size(2), x.size(3)).maps;
  target = (target / target.sum({2, 3}, true)).flatten(2);
  auto log_pred = torch::log_softmax(x.flatten(2), 2);
  auto positive = target > 0;
  auto terms = torch::where(positive, target * (torch::log(torch::where(positive, target, torch::ones_like(target))) - log_pred),
                            torch::zeros_like(target));
  auto per_part = terms.sum(2);  // [N, M]
  auto mask = visible.to(x.dtype());
  const auto count = mask.sum();
  return (per_part * mask).sum() / torch::clamp_min(count, 1.0);
}

namespace {

HeatmapStack part_logits(KeypointModel& model, KeypointReadout& readout,
                         const torch::Tensor& images) {
  return readout->forward(model->keypoint_head()->forward(model->encode(images)));
}

}  // namespace

torch::Tensor predict_parts(KeypointModel& model, KeypointReadout& readout,
                            const std::vector<torch::Tensor>& images, int64_t batch) {
  torch::NoGradGuard guard;
  model->eval();
  readout->eval();
  std::vector<torch::Tensor> out;
  for (size_t begin = 0; begin < images.size(); begin += size_t(batch)) {
    const size_t end = std::min(images.size(), begin + size_t(batch));
    auto logits = part_logits(model, readout, stack_images(images, begin, end));
    out.push_back(soft_argmax(spatial_softmax(logits, model->shape().softmax_temperature)));
  }
  return torch::cat(out).to(torch::kFloat64);
}

torch::Tensor discover_keypoints(KeypointModel& model, const std::vector<torch::Tensor>& images,
                                 int64_t batch) {
  torch::NoGradGuard guard;
  model->eval();
  std::vector<torch::Tensor> out;
  for (size_t begin = 0; begin < images.size(); begin += size_t(batch)) {
    const size_t end = std::min(images.size(), begin + size_t(batch));
    out.push_back(model->detect(stack_images(images, begin, end)).keypoints);
  }
  return torch::cat(out).to(torch::kFloat64);
}

FinetuneResult finetune_keypoints(KeypointModel model, const LabeledSet& train_set,
                                  const LabeledSet& eval_set, const FinetuneOptions& options) {
  auto indices = nested_subset(int64_t(train_set.size()), options.fraction, options.seed);
  auto labeled = train_set.subset(indices);
  const int64_t parts = model->shape().num_parts;
  const int64_t targets = labeled.keypoints.size(1);

  FinetuneResult result;
  result.train_samples = int64_t(labeled.size());
  result.model = model;
  result.readout = KeypointReadout(parts, targets);

  // Start from the discovered channel nearest to each annotated part.
  {
    auto discovered = discover_keypoints(model, labeled.images);  // [n, K, 2]
    auto gt = labeled.keypoints.unsqueeze(2);                       // [n, M, 1, 2]
    auto dist = (discovered.unsqueeze(1) - gt).norm(2, -1);        // [n, M, K]
    auto mask = labeled.visible.to(torch::kFloat64).unsqueeze(-1);
    auto mean = (dist * mask).sum(0) / torch::clamp_min(mask.sum(0), 1.0);  // [M, K]
    auto best = mean.argmin(1);
    std::vector<int64_t> source(targets);
    for (int64_t m = 0; m < targets; ++m) source[m] = best[m].item<int64_t>();
    result.readout->select_channels(source);
  }

  std::vector<torch::Tensor> params;
  for (auto& p : model->encoder()->parameters()) params.push_back(p);
  for (auto& p : model->keypoint_head()->parameters()) params.push_back(p);
  for (auto& p : result.readout->parameters()) params.push_back(p);
  torch::optim::SGD optimizer(params,
                              torch::optim::SGDOptions(options.lr).momentum(options.momentum));

  const auto n = int64_t(labeled.size());
  const int64_t batch = std::min<int64_t>(options.batch, n);
  const int64_t steps_per_epoch = (n + batch - 1) / batch;
  const int64_t epochs =
      std::max(options.epochs, (options.min_steps + steps_per_epoch - 1) / steps_per_epoch);
  const int64_t eval_every = std::max<int64_t>(1, epochs / 20);

  auto evaluate = [&] {
    auto pred = predict_parts(model, result.readout, eval_set.images);
    return pck(pred, eval_set.keypoints, eval_set.visible, eval_set.bbox_size, options.alpha);
  };

  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int64_t epoch = 1; epoch <= epochs; ++epoch) {
    model->train();
    result.readout->train();
    auto rng = record_rng(options.seed, uint64_t(epoch), ~0ULL - 1);
    std::shuffle(order.begin(), order.end(), rng);
    for (int64_t begin = 0; begin < n; begin += batch) {
      const int64_t end = std::min(n, begin + batch);
      std::vector<int64_t> idx(order.begin() + begin, order.begin() + end);
      std::vector<torch::Tensor> imgs;
      for (auto i : idx) imgs.push_back(labeled.images[i]);
      auto index = torch::tensor(idx, torch::kLong);
      auto logits = part_logits(model, result.readout, torch::stack(imgs));
      auto loss = supervised_heatmap_loss(logits, labeled.keypoints.index_select(0, index),
                                          labeled.visible.index_select(0, index),
                                          options.target_sigma);
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
    }
    if (epoch % eval_every == 0 || epoch == epochs) {
      result.final_pck = evaluate();
      result.pck_per_epoch.push_back(result.final_pck.mean);
    }
  }
  if (epochs == 0) result.final_pck = evaluate();
  return result;
}

}  // namespace kpd
