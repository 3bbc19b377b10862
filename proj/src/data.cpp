#include "kpd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "json.hpp"

namespace kpd {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + name + "'");
}

fs::path Manifest::resolve(const SampleRecord& record) const {
  fs::path p(record.image_path);
  return p.is_absolute() ? p : root / p;
}

std::vector<const SampleRecord*> Manifest::select(Split split) const {
  std::vector<const SampleRecord*> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(&r);
  }
  return out;
}

namespace {

[[noreturn]] void manifest_error(const fs::path& path, size_t line, const std::string& what) {
  std::ostringstream msg;
  msg << path.string() << ":" << line << ": " << what;
  throw std::runtime_error(msg.str());
}

SampleRecord parse_record(const json& j, const Manifest& m, const fs::path& path, size_t line) {
  if (!j.is_object()) manifest_error(path, line, "record is not a JSON object");
  SampleRecord r;
  if (!j.contains("image") || !j["image"].is_string()) {
    manifest_error(path, line, "missing string field 'image'");
  }
  r.image_path = j["image"].get<std::string>();
  if (!j.contains("label") || !j["label"].is_number_integer()) {
    manifest_error(path, line, "missing integer field 'label' (class label is required)");
  }
  r.class_label = j["label"].get<int64_t>();
  if (r.class_label < 0 || r.class_label >= m.num_classes) {
    manifest_error(path, line,
                   "label " + std::to_string(r.class_label) + " outside [0, " +
                       std::to_string(m.num_classes) + ")");
  }
  if (j.contains("split")) {
    try {
      r.split = split_from_string(j["split"].get<std::string>());
    } catch (const std::exception& e) {
      manifest_error(path, line, e.what());
    }
  }
  if (j.contains("keypoints") && !j["keypoints"].is_null()) {
    const auto& kps = j["keypoints"];
    if (!kps.is_array()) manifest_error(path, line, "'keypoints' must be an array");
    if (static_cast<int64_t>(kps.size()) != m.keypoint_arity) {
      manifest_error(path, line,
                     "keypoint arity " + std::to_string(kps.size()) +
                         " does not match header arity " + std::to_string(m.keypoint_arity));
    }
    std::vector<AnnotatedKeypoint> parsed;
    for (const auto& kp : kps) {
      if (!kp.is_array() || kp.size() != 3) {
        manifest_error(path, line, "each keypoint must be [x, y, visible]");
      }
      parsed.push_back({kp[0].get<double>(), kp[1].get<double>(), kp[2].get<double>() != 0.0});
    }
    r.keypoints = std::move(parsed);
  }
  if (j.contains("bbox") && !j["bbox"].is_null()) {
    const auto& b = j["bbox"];
    if (!b.is_array() || b.size() != 4) manifest_error(path, line, "'bbox' must be [x, y, w, h]");
    r.bbox = BoundingBox{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                         b[3].get<double>()};
  }
  return r;
}

}  // namespace

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  std::string text;
  size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      manifest_error(path, line_no, std::string("malformed JSON: ") + e.what());
    }
    try {
      if (!have_header) {
        if (!j.is_object() || !j.contains("keypoint_arity") || !j.contains("num_classes")) {
          manifest_error(path, line_no, "first line must be the header declaring "
                                        "keypoint_arity and num_classes");
        }
        m.keypoint_arity = j["keypoint_arity"].get<int64_t>();
        m.num_classes = j["num_classes"].get<int64_t>();
        if (m.keypoint_arity < 0 || m.num_classes < 1) {
          manifest_error(path, line_no, "header arity/class count out of range");
        }
        have_header = true;
        continue;
      }
      m.records.push_back(parse_record(j, m, path, line_no));
    } catch (const json::exception& e) {
      manifest_error(path, line_no, std::string("bad field type: ") + e.what());
    }
  }
  return m;
}

void write_manifest(const fs::path& path, const Manifest& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << json{{"manifest_version", 1},
              {"keypoint_arity", m.keypoint_arity},
              {"num_classes", m.num_classes}}
             .dump()
      << "\n";
  for (const auto& r : m.records) {
    json j{{"image", r.image_path}, {"label", r.class_label}, {"split", to_string(r.split)}};
    if (r.keypoints) {
      json kps = json::array();
      for (const auto& kp : *r.keypoints) kps.push_back({kp.x, kp.y, kp.visible ? 1 : 0});
      j["keypoints"] = kps;
    }
    if (r.bbox) j["bbox"] = {r.bbox->x, r.bbox->y, r.bbox->w, r.bbox->h};
    out << j.dump() << "\n";
  }
}

namespace {

torch::Tensor mat_to_tensor(const cv::Mat& rgb) {
  cv::Mat f;
  rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
  auto t = torch::from_blob(f.data, {f.rows, f.cols, 3}, torch::kFloat32);
  return t.permute({2, 0, 1}).contiguous().clone();
}

}  // namespace

torch::Tensor load_image(const fs::path& path, int64_t size, Letterbox* letterbox) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot read image " + path.string());
  const int side = std::max(bgr.cols, bgr.rows);
  Letterbox box{static_cast<double>(side), (side - bgr.cols) / 2.0, (side - bgr.rows) / 2.0};
  const int left = (side - bgr.cols) / 2;
  const int top = (side - bgr.rows) / 2;
  box.pad_x = left;
  box.pad_y = top;
  cv::Mat square;
  cv::copyMakeBorder(bgr, square, top, side - bgr.rows - top, left, side - bgr.cols - left,
                     cv::BORDER_REPLICATE);
  cv::Mat resized;
  if (side != size) {
    cv::resize(square, resized, cv::Size(int(size), int(size)), 0, 0,
               side > size ? cv::INTER_AREA : cv::INTER_LINEAR);
  } else {
    resized = square;
  }
  cv::Mat rgb;
  cv::cvtColor(resized, rgb, cv::COLOR_BGR2RGB);
  if (letterbox) *letterbox = box;
  return mat_to_tensor(rgb);
}

void save_png(const torch::Tensor& image, const fs::path& path) {
  if (image.dim() != 3 || image.size(0) != 3) {
    throw std::invalid_argument("save_png: expected a [3, H, W] image");
  }
  auto bytes = (image.detach().to(torch::kCPU, torch::kFloat32).clamp(0.0, 1.0) * 255.0)
                   .round()
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();
  cv::Mat rgb(int(bytes.size(0)), int(bytes.size(1)), CV_8UC3, bytes.data_ptr());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw std::runtime_error("cannot write " + path.string());
}

LabeledSample load_labeled(const Manifest& manifest, const SampleRecord& record, int64_t size) {
  LabeledSample s;
  Letterbox box;
  s.image = load_image(manifest.resolve(record), size, &box);
  s.class_label = record.class_label;
  const int64_t m = record.keypoints ? int64_t(record.keypoints->size()) : 0;
  s.keypoints = torch::zeros({m, 2}, torch::kFloat64);
  s.visible = torch::zeros({m}, torch::kBool);
  for (int64_t i = 0; i < m; ++i) {
    const auto& kp = (*record.keypoints)[i];
    auto [u, v] = box.normalize(kp.x, kp.y);
    s.keypoints[i][0] = u;
    s.keypoints[i][1] = v;
    s.visible[i] = kp.visible;
  }
  if (record.bbox) {
    const double w = record.bbox->w / box.side;
    const double h = record.bbox->h / box.side;
    s.bbox_size = std::max(w, h);
    s.bbox_diagonal = std::hypot(w, h);
  } else {
    s.bbox_size = 1.0;
    s.bbox_diagonal = std::sqrt(2.0);
  }
  return s;
}

std::mt19937_64 record_rng(uint64_t seed, uint64_t epoch, uint64_t index) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                    static_cast<uint32_t>(epoch), static_cast<uint32_t>(index),
                    static_cast<uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

TrainPair make_pair(const torch::Tensor& image, int64_t label, std::mt19937_64& rng,
                    const PairOptions& options) {
  if (image.dim() != 3) throw std::invalid_argument("make_pair: expected a [C, H, W] image");
  TrainPair pair;
  pair.label = label;
  pair.warp = make_tps(options.tps_grid, options.tps_scale, rng, image.size(1), image.size(2));
  pair.target = apply_warp(image, pair.warp);
  pair.source = image.to(torch::kFloat32).clone();
  if (options.jitter && options.jitter_strength > 0.0) {
    std::uniform_real_distribution<double> jitter(-options.jitter_strength,
                                                  options.jitter_strength);
    const double brightness = jitter(rng);
    const double contrast = jitter(rng);
    auto mean = pair.source.mean();
    pair.source = ((pair.source - mean) * (1.0 + contrast) + mean * (1.0 + brightness)).clamp(0.0, 1.0);
  }
  return pair;
}

TrainPair make_pair(const Manifest& manifest, const SampleRecord& record, int64_t size,
                    std::mt19937_64& rng, const PairOptions& options) {
  return make_pair(load_image(manifest.resolve(record), size), record.class_label, rng, options);
}

// ---------------------------------------------------------------------------

std::array<uint8_t, 3> toy_class_color(int64_t class_label) {
  static constexpr std::array<std::array<uint8_t, 3>, 6> palette{{
      {220, 40, 40}, {40, 170, 60}, {50, 80, 230}, {230, 200, 30}, {190, 50, 200}, {30, 200, 210}}};
  if (class_label < int64_t(palette.size())) return palette[class_label];
  // Beyond the palette: walk the hue circle.
  cv::Mat hsv(1, 1, CV_8UC3, cv::Scalar(double((class_label * 37) % 180), 220, 220));
  cv::Mat rgb;
  cv::cvtColor(hsv, rgb, cv::COLOR_HSV2RGB);
  auto px = rgb.at<cv::Vec3b>(0, 0);
  return {px[0], px[1], px[2]};
}

Split toy_split(int64_t index) {
  switch (index % 10) {
    case 8: return Split::val;
    case 9: return Split::test;
    default: return Split::train;
  }
}

namespace {

struct CreatureRenderer {
  static constexpr int kSupersample = 4;
  static constexpr int kShift = 4;
  int big;

  cv::Point at(double u, double v) const {
    const double scale = double(1 << kShift);
    return {int(std::lround((u * big - 0.5) * scale)), int(std::lround((v * big - 0.5) * scale))};
  }
  int length(double d) const { return int(std::lround(d * big * (1 << kShift))); }
};

}  // namespace

ToyDataset synth_toy_dataset(int64_t n, uint64_t seed, int64_t image_size, int64_t num_classes) {
  if (n < 1) throw std::invalid_argument("synth_toy_dataset: n must be >= 1");
  if (num_classes < 2) throw std::invalid_argument("synth_toy_dataset: need >= 2 classes");
  ToyDataset data;
  data.image_size = image_size;
  data.num_classes = num_classes;
  data.images.reserve(n);
  data.creatures.reserve(n);

  const CreatureRenderer r{int(image_size) * CreatureRenderer::kSupersample};
  for (int64_t i = 0; i < n; ++i) {
    auto rng = record_rng(seed, 0, uint64_t(i));
    auto uniform = [&rng](double lo, double hi) {
      return std::uniform_real_distribution<double>(lo, hi)(rng);
    };
    ToyCreature c;
    c.class_label = std::uniform_int_distribution<int64_t>(0, num_classes - 1)(rng);
    c.facing_right = std::bernoulli_distribution(0.5)(rng);
    const double s = uniform(0.65, 1.0);
    const double cx = uniform(0.03 + 0.25 * s, 0.97 - 0.25 * s);
    const double cy = uniform(0.03 + 0.15 * s, 0.97 - 0.19 * s);
    const double dir = c.facing_right ? 1.0 : -1.0;
    auto mirror = [&](double dx) { return cx + dir * dx; };

    const cv::Scalar background(uniform(150, 245), uniform(150, 245), uniform(150, 245));
    const double tone = uniform(-25, 25);
    const cv::Scalar limb_color(90 + tone, 60 + tone, 40 + tone);
    const auto head_rgb = toy_class_color(c.class_label);
    const cv::Scalar head_color(head_rgb[0], head_rgb[1], head_rgb[2]);
    // Body carries a darker shade of the class colour.
    const cv::Scalar body_color(0.55 * head_rgb[0] + 30 + tone, 0.55 * head_rgb[1] + 30 + tone,
                                0.55 * head_rgb[2] + 30 + tone);

    const double body_rx = 0.15 * s, body_ry = 0.075 * s;
    const double head_r = 0.06 * s;
    const std::array<double, 2> head{mirror(0.19 * s), cy - 0.09 * s};
    const std::array<double, 4> attach_dx{0.11 * s, 0.05 * s, -0.05 * s, -0.11 * s};
    const double limb_len = 0.13 * s;
    const double limb_width = 0.028 * s;

    cv::Mat canvas(r.big, r.big, CV_8UC3, background);
    std::array<std::array<double, 2>, 4> tips{};
    for (int l = 0; l < 4; ++l) {
      const double angle = uniform(-0.7, 0.7);
      const std::array<double, 2> base{mirror(attach_dx[l]), cy + 0.04 * s};
      tips[l] = {base[0] + dir * limb_len * std::sin(angle), base[1] + limb_len * std::cos(angle)};
      cv::line(canvas, r.at(base[0], base[1]), r.at(tips[l][0], tips[l][1]), limb_color,
               std::max(1, int(std::lround(limb_width * r.big))), cv::LINE_AA,
               CreatureRenderer::kShift);
    }
    cv::ellipse(canvas, r.at(cx, cy), cv::Size(r.length(body_rx), r.length(body_ry)), 0, 0, 360,
                body_color, cv::FILLED, cv::LINE_AA, CreatureRenderer::kShift);
    cv::circle(canvas, r.at(head[0], head[1]), r.length(head_r), head_color, cv::FILLED,
               cv::LINE_AA, CreatureRenderer::kShift);
    cv::circle(canvas, r.at(head[0] + dir * 0.025 * s, head[1] - 0.015 * s), r.length(0.012 * s),
               cv::Scalar(20, 20, 20), cv::FILLED, cv::LINE_AA, CreatureRenderer::kShift);

    cv::Mat small;
    cv::resize(canvas, small, cv::Size(int(image_size), int(image_size)), 0, 0, cv::INTER_AREA);

    c.parts[0] = head;
    c.parts[1] = {cx, cy};
    for (int l = 0; l < 4; ++l) c.parts[2 + l] = tips[l];

    double x0 = std::min({cx - body_rx, head[0] - head_r});
    double x1 = std::max({cx + body_rx, head[0] + head_r});
    double y0 = head[1] - head_r;
    double y1 = cy + body_ry;
    for (const auto& t : tips) {
      x0 = std::min(x0, t[0] - limb_width / 2);
      x1 = std::max(x1, t[0] + limb_width / 2);
      y1 = std::max(y1, t[1] + limb_width / 2);
    }
    c.bbox = {x0, y0, x1 - x0, y1 - y0};

    data.images.push_back(mat_to_tensor(small));
    data.creatures.push_back(c);
  }
  return data;
}

void write_toy_dataset(const ToyDataset& data, const fs::path& dir) {
  fs::create_directories(dir / "images");
  const double px = double(data.image_size);
  Manifest manifest;
  manifest.keypoint_arity = kToyParts;
  manifest.num_classes = data.num_classes;
  manifest.root = dir;
  json gt{{"parts", kToyPartNames}, {"image_size", data.image_size}, {"images", json::array()}};
  for (size_t i = 0; i < data.images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "images/%06zu.png", i);
    save_png(data.images[i], dir / name);
    const auto& c = data.creatures[i];
    SampleRecord r;
    r.image_path = name;
    r.class_label = c.class_label;
    r.split = toy_split(int64_t(i));
    std::vector<AnnotatedKeypoint> kps;
    json coords = json::array();
    for (const auto& p : c.parts) {
      kps.push_back({p[0] * px, p[1] * px, true});
      coords.push_back({p[0] * px, p[1] * px});
    }
    r.keypoints = std::move(kps);
    r.bbox = BoundingBox{c.bbox.x * px, c.bbox.y * px, c.bbox.w * px, c.bbox.h * px};
    manifest.records.push_back(std::move(r));
    gt["images"].push_back({{"image", name},
                            {"label", c.class_label},
                            {"facing", c.facing_right ? "right" : "left"},
                            {"keypoints", coords}});
  }
  write_manifest(dir / "manifest.jsonl", manifest);
  std::ofstream(dir / "ground_truth.json") << gt.dump(2) << "\n";
}

}  // namespace kpd
