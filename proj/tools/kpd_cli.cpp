// kpd: command-line front end.
//
//   kpd synth-data --n 500 --seed 7 --out data
//   kpd train --preset toy --epochs 2 --deterministic --out run
//   kpd finetune --checkpoint run/last.ckpt --manifest data/manifest.jsonl --fraction 0.1
//   kpd eval --checkpoint run/last.ckpt --manifest data/manifest.jsonl --metric pck --alpha 0.1
//   kpd discover --checkpoint run/last.ckpt --manifest data/manifest.jsonl --out kps.json
//   kpd visualize --checkpoint run/last.ckpt --manifest data/manifest.jsonl --mode manipulation

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "kpd/config.hpp"
#include "kpd/data.hpp"
#include "kpd/evaluation.hpp"
#include "kpd/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kVerbs = {"synth-data", "train",    "finetune",
                                         "eval",       "discover", "visualize"};

bool is_bool_key(const std::string& key) { return key == "deterministic" || key == "jitter"; }

struct Invocation {
  std::string config_path;
  std::map<std::string, std::string> overrides;
};

kpd::TrainConfig resolve_config(const Invocation& inv) {
  auto config = kpd::preset("toy");
  if (auto it = inv.overrides.find("preset"); it != inv.overrides.end()) {
    config = kpd::preset(it->second);
  }
  if (!inv.config_path.empty()) config = kpd::load_config_file(inv.config_path, config);
  for (const auto& [key, value] : inv.overrides) {
    if (key != "preset") kpd::set_config_value(config, key, value);
  }
  config.validate();
  return config;
}

void emit(const json& report, const fs::path& file = {}) {
  if (!file.empty()) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream(file) << report.dump(2) << "\n";
  }
  std::cout << report.dump(2) << std::endl;
}

json pck_json(const kpd::PckResult& r) {
  json per = json::array();
  for (double v : r.per_keypoint) per.push_back(std::isnan(v) ? json(nullptr) : json(v));
  return {{"metric", "pck"},
          {"alpha", r.alpha},
          {"defined", r.defined},
          {"mean", r.defined ? json(r.mean) : json(nullptr)},
          {"per_keypoint", per},
          {"correct", r.correct},
          {"evaluated", r.evaluated}};
}

kpd::Manifest require_manifest(const kpd::TrainConfig& c) {
  if (c.manifest.empty()) throw std::invalid_argument("--manifest is required for this verb");
  return kpd::load_manifest(c.manifest);
}

kpd::LoadedCheckpoint require_checkpoint(const kpd::TrainConfig& c) {
  if (c.checkpoint.empty()) throw std::invalid_argument("--checkpoint is required for this verb");
  return kpd::load_checkpoint(c.checkpoint);
}

int run_synth(const kpd::TrainConfig& c) {
  auto data = kpd::synth_toy_dataset(c.n, c.seed, c.profile.image_size, c.classes);
  kpd::write_toy_dataset(data, c.out);
  emit({{"images", c.n},
        {"manifest", (fs::path(c.out) / "manifest.jsonl").string()},
        {"ground_truth", (fs::path(c.out) / "ground_truth.json").string()}});
  return 0;
}

int run_train(const kpd::TrainConfig& c) {
  auto log = kpd::train(c);
  auto ck = kpd::load_checkpoint(log.final_checkpoint);
  json report{{"final_checkpoint", log.final_checkpoint},
              {"best_checkpoint", log.best_checkpoint},
              {"parameter_sha256", kpd::parameter_checksum(*ck.model)},
              {"epochs_run", log.epochs.size()},
              {"wall_seconds", log.wall_seconds}};
  if (!log.epochs.empty()) {
    report["final_total"] = log.epochs.back().total;
    report["final_accuracy"] = log.epochs.back().accuracy;
  }
  emit(report);
  return 0;
}

int run_finetune(const kpd::TrainConfig& c) {
  auto manifest = require_manifest(c);
  kpd::KeypointModel model{nullptr};
  if (c.checkpoint.empty()) {
    kpd::configure_runtime(c.seed, c.deterministic);
    model = kpd::KeypointModel(kpd::model_shape(c));
  } else {
    model = kpd::load_checkpoint(c.checkpoint).model;
  }
  const auto size = model->shape().profile.image_size;
  auto train_set = kpd::load_labeled_set(manifest, kpd::Split::train, size, c.pck_normalizer);
  auto test_set = kpd::load_labeled_set(manifest, kpd::Split::test, size, c.pck_normalizer);
  kpd::FinetuneOptions options;
  options.fraction = c.fraction;
  options.epochs = c.finetune_epochs;
  options.alpha = c.alpha;
  options.seed = c.seed;
  options.target_sigma = c.keypoint_sigma;
  auto result = kpd::finetune_keypoints(model, train_set, test_set, options);
  const fs::path out(c.out);
  kpd::save_checkpoint(out / "finetuned.ckpt", c, result.model, 0, nullptr, &result.readout);
  auto report = pck_json(result.final_pck);
  report["fraction"] = c.fraction;
  report["train_samples"] = result.train_samples;
  report["pck_log"] = result.pck_per_epoch;
  report["checkpoint"] = (out / "finetuned.ckpt").string();
  emit(report, out / "finetune_report.json");
  return 0;
}

int run_eval(const kpd::TrainConfig& c) {
  auto manifest = require_manifest(c);
  auto ck = require_checkpoint(c);
  const auto size = ck.config.profile.image_size;
  const fs::path out(c.out);
  if (c.metric == "accuracy") {
    auto set = kpd::load_image_set(manifest, kpd::Split::test, size);
    torch::NoGradGuard guard;
    ck.model->eval();
    int64_t correct = 0;
    for (size_t i = 0; i < set.size(); i += 64) {
      const size_t end = std::min(set.size(), i + 64);
      auto batch = torch::stack(std::vector<torch::Tensor>(set.images.begin() + i,
                                                           set.images.begin() + end));
      auto features = ck.model->encode(batch);
      auto det = ck.model->detect(features);
      auto pred = ck.model->classify(features, det.heatmaps).argmax(1);
      for (size_t j = i; j < end; ++j) correct += pred[int64_t(j - i)].item<int64_t>() == set.labels[j];
    }
    emit({{"metric", "accuracy"},
          {"accuracy", set.size() ? double(correct) / double(set.size()) : 0.0},
          {"evaluated", set.size()}},
         out / "eval_accuracy.json");
    return 0;
  }
  auto train_set = kpd::load_labeled_set(manifest, kpd::Split::train, size, c.pck_normalizer);
  auto test_set = kpd::load_labeled_set(manifest, kpd::Split::test, size, c.pck_normalizer);
  auto train_kps = kpd::discover_keypoints(ck.model, train_set.images);
  auto test_kps = kpd::discover_keypoints(ck.model, test_set.images);
  if (c.metric == "pck") {
    torch::Tensor predicted;
    std::string source;
    if (ck.readout) {
      predicted = kpd::predict_parts(ck.model, ck.readout, test_set.images);
      source = "readout";
    } else {
      predicted = kpd::fit_probe(train_kps, train_set.keypoints).predict(test_kps);
      source = "linear_probe";
    }
    auto report = pck_json(
        kpd::pck(predicted, test_set.keypoints, test_set.visible, test_set.bbox_size, c.alpha));
    report["prediction"] = source;
    emit(report, out / "eval_pck.json");
    return 0;
  }
  if (c.metric == "probe") {
    auto probe = kpd::fit_probe(train_kps, train_set.keypoints);
    auto predicted = probe.predict(test_kps);
    emit({{"metric", "probe"},
          {"error_percent_of_edge", kpd::normalized_error(predicted, test_set.keypoints, 1.0)},
          {"ridge_fallback", probe.ridge_fallback}},
         out / "eval_probe.json");
    return 0;
  }
  if (c.metric == "posture") {
    kpd::PostureOptions options;
    options.seed = c.seed;
    auto result = kpd::posture_classifier(train_kps, train_set.labels, test_kps, test_set.labels,
                                          options);
    fs::create_directories(out);
    kpd::write_confusion_csv(out / "posture_confusion.csv", result);
    emit({{"metric", "posture"},
          {"accuracy", result.accuracy},
          {"confusion", result.confusion},
          {"epochs_run", result.epochs_run}},
         out / "eval_posture.json");
    return 0;
  }
  throw std::invalid_argument("unknown metric '" + c.metric +
                              "' (expected pck, probe, posture or accuracy)");
}

int run_discover(const kpd::TrainConfig& c) {
  auto manifest = require_manifest(c);
  auto ck = require_checkpoint(c);
  std::vector<torch::Tensor> images;
  for (const auto& r : manifest.records) {
    images.push_back(kpd::load_image(manifest.resolve(r), ck.config.profile.image_size));
  }
  json entries = json::array();
  if (!images.empty()) {
    auto kps = kpd::discover_keypoints(ck.model, images);
    for (size_t i = 0; i < images.size(); ++i) {
      json points = json::array();
      for (int64_t k = 0; k < kps.size(1); ++k) {
        points.push_back({kps[int64_t(i)][k][0].item<double>(), kps[int64_t(i)][k][1].item<double>()});
      }
      entries.push_back({{"image", manifest.records[i].image_path}, {"keypoints", points}});
    }
  }
  emit({{"coordinates", "normalized"}, {"records", entries}},
       fs::path(c.out) / "discovered_keypoints.json");
  return 0;
}

int run_visualize(const kpd::TrainConfig& c) {
  auto manifest = require_manifest(c);
  auto ck = require_checkpoint(c);
  auto mode = kpd::visual_mode_from_string(c.mode);
  std::vector<torch::Tensor> images;
  std::vector<std::string> names;
  for (const auto& r : manifest.records) {
    if (int64_t(images.size()) >= c.n) break;
    images.push_back(kpd::load_image(manifest.resolve(r), ck.config.profile.image_size));
    names.push_back(fs::path(r.image_path).stem().string());
  }
  auto written = kpd::dump_visuals(ck.model, images, names, mode, c.out);
  json files = json::array();
  for (const auto& p : written) files.push_back(p.string());
  emit({{"mode", c.mode}, {"files", files}});
  return 0;
}

int dispatch(const std::string& verb, const kpd::TrainConfig& c) {
  if (verb == "synth-data") return run_synth(c);
  if (verb == "train") return run_train(c);
  if (verb == "finetune") return run_finetune(c);
  if (verb == "eval") return run_eval(c);
  if (verb == "discover") return run_discover(c);
  return run_visualize(c);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Keypoint discovery toolkit", "kpd"};
  app.require_subcommand(1);
  std::map<std::string, Invocation> invocations;
  for (const auto& verb : kVerbs) {
    auto* sub = app.add_subcommand(verb);
    auto& inv = invocations[verb];
    sub->add_option("--config", inv.config_path, "key = value configuration file");
    for (const auto& key : kpd::config_keys()) {
      if (is_bool_key(key)) {
        sub->add_flag_function(
            "--" + key,
            [&inv, key](int64_t count) { inv.overrides[key] = count > 0 ? "true" : "false"; },
            "config key " + key);
      } else {
        sub->add_option_function<std::string>(
            "--" + key, [&inv, key](const std::string& v) { inv.overrides[key] = v; },
            "config key " + key);
      }
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  const auto* chosen = app.get_subcommands().front();
  const std::string verb = chosen->get_name();
  try {
    auto config = resolve_config(invocations[verb]);
    return dispatch(verb, config);
  } catch (const std::invalid_argument& e) {
    std::cerr << json{{"error", {{"verb", verb}, {"kind", "invalid_argument"}, {"message", e.what()}}}}
                     .dump()
              << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", {{"verb", verb}, {"kind", "runtime_error"}, {"message", e.what()}}}}
                     .dump()
              << std::endl;
    return 1;
  }
}
