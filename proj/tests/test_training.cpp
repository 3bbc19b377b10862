#include <filesystem>
#include <fstream>

#include "torch_doctest.hpp"
#include "kpd/training.hpp"

namespace fs = std::filesystem;

namespace {

kpd::TrainConfig small_config() {
  auto c = kpd::preset("toy");
  c.batch = 6;
  c.n = 24;
  c.epochs = 2;
  c.weights.curriculum_epoch = 1;
  c.deterministic = true;
  c.seed = 3;
  return c;
}

std::vector<kpd::TrainPair> pairs(int n, uint64_t seed = 1) {
  auto data = kpd::synth_toy_dataset(n, seed);
  std::vector<kpd::TrainPair> out;
  for (int i = 0; i < n; ++i) {
    auto rng = kpd::record_rng(seed, 1, uint64_t(i));
    out.push_back(kpd::make_pair(data.images[i], data.creatures[i].class_label, rng, {}));
  }
  return out;
}

std::vector<torch::Tensor> snapshot(torch::nn::Module& m) {
  std::vector<torch::Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.detach().clone());
  return out;
}

bool unchanged(torch::nn::Module& m, const std::vector<torch::Tensor>& before) {
  auto params = m.parameters();
  for (size_t i = 0; i < params.size(); ++i) {
    if (!torch::equal(params[i].detach(), before[i])) return false;
  }
  return true;
}

double grad_norm(torch::nn::Module& m) {
  double total = 0.0;
  for (const auto& p : m.parameters()) {
    if (p.grad().defined()) total += p.grad().abs().sum().item<double>();
  }
  return total;
}

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("kpd_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("one step is finite and reaches all four sub-networks") {
  kpd::configure_runtime(0, true);
  auto c = small_config();
  kpd::Trainer t(c);
  auto s = t.train_step(pairs(6), 2);
  CHECK(std::isfinite(s.total));
  REQUIRE(s.equivariance.has_value());
  CHECK(std::isfinite(*s.equivariance));
  CHECK(s.count == 6);
  auto& m = t.model();
  CHECK(grad_norm(*m->encoder()) > 0);
  CHECK(grad_norm(*m->keypoint_head()) > 0);
  CHECK(grad_norm(*m->decoder()) > 0);
  CHECK(grad_norm(*m->weak_head()) > 0);
}

TEST_CASE("perceptual network stays frozen") {
  kpd::configure_runtime(0, true);
  kpd::Trainer t(small_config());
  auto before = snapshot(*t.perceptual());
  t.train_step(pairs(6), 2);
  CHECK(unchanged(*t.perceptual(), before));
  for (const auto& p : t.perceptual()->parameters()) CHECK_FALSE(p.requires_grad());
}

TEST_CASE("zero-weighted streams leave their heads untouched") {
  kpd::configure_runtime(0, true);
  auto c = small_config();
  c.weights.weak = 0.0;
  kpd::Trainer no_weak(c);
  auto before = snapshot(*no_weak.model()->weak_head());
  no_weak.train_step(pairs(6), 2);
  CHECK(unchanged(*no_weak.model()->weak_head(), before));

  c = small_config();
  c.weights.perceptual = 0.0;
  kpd::Trainer no_perc(c);
  before = snapshot(*no_perc.model()->decoder());
  auto s = no_perc.train_step(pairs(6), 2);
  CHECK(unchanged(*no_perc.model()->decoder(), before));
  CHECK(s.perceptual == 0.0);
}

TEST_CASE("bottleneck gradient cap bounds the reconstruction pull on keypoints") {
  kpd::configure_runtime(0, true);
  auto c = small_config();
  c.weights.weak = 0.0;
  c.weights.curriculum_epoch = 5;
  c.bottleneck_grad_cap = 0.0;
  auto batch = pairs(6);
  kpd::Trainer open(c);
  open.train_step(batch, 1);
  CHECK(grad_norm(*open.model()->keypoint_head()) > 1e-3);
  c.bottleneck_grad_cap = 1e-20;
  kpd::Trainer capped(c);
  capped.train_step(batch, 1);
  CHECK(grad_norm(*capped.model()->keypoint_head()) < 1e-12);
}

TEST_CASE("curriculum gates the viewpoint stream") {
  kpd::configure_runtime(0, true);
  auto c = small_config();
  c.weights.curriculum_epoch = 3;
  auto batch = pairs(6);
  {
    kpd::Trainer t(c);
    CHECK_FALSE(t.train_step(batch, 3).equivariance.has_value());
    CHECK(t.train_step(batch, 4).equivariance.has_value());
  }
  // Before activation a step equals one with the viewpoint weight at zero.
  auto off = c;
  off.weights.equivariance = 0.0;
  kpd::Trainer a(c), b(off);
  auto sa = a.train_step(batch, 2);
  auto sb = b.train_step(batch, 2);
  CHECK(sa.total == sb.total);
  CHECK(kpd::parameter_checksum(*a.model()) == kpd::parameter_checksum(*b.model()));
}

TEST_CASE("non-finite losses are reported by stream") {
  kpd::configure_runtime(0, true);
  kpd::Trainer t(small_config());
  auto batch = pairs(6);
  batch[0].source[0][3][3] = std::numeric_limits<float>::quiet_NaN();
  try {
    t.train_step(batch, 1);
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("L_perc") != std::string::npos);
  }
  CHECK_THROWS_AS(t.train_step({}, 1), std::invalid_argument);
}

TEST_CASE("checkpoint round trip") {
  auto dir = scratch_dir("ckpt");
  kpd::configure_runtime(0, true);
  auto c = small_config();
  kpd::Trainer t(c);
  t.train_step(pairs(6), 1);
  kpd::save_checkpoint(dir / "a.ckpt", c, t.model(), 5, &t.optimizer());
  auto ck = kpd::load_checkpoint(dir / "a.ckpt");
  CHECK(ck.epoch == 5);
  CHECK(kpd::config_hash(ck.config) == kpd::config_hash(c));
  CHECK(kpd::parameter_checksum(*ck.model) == kpd::parameter_checksum(*t.model()));
  CHECK(ck.optimizer_state.has_value());
  CHECK_FALSE(ck.readout);

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  CHECK_THROWS(kpd::load_checkpoint(dir / "junk.ckpt"));
  CHECK_THROWS(kpd::load_checkpoint(dir / "absent.ckpt"));
  torch::serialize::OutputArchive other;
  other.write("format", torch::tensor(std::vector<int64_t>{1, 2, 3}));
  other.save_to((dir / "other.ckpt").string());
  CHECK_THROWS(kpd::load_checkpoint(dir / "other.ckpt"));
}

TEST_CASE("deterministic runs and resume") {
  auto data = kpd::synth_toy_dataset(24, 5);
  auto tr = kpd::toy_image_set(data, kpd::Split::train);
  auto va = kpd::toy_image_set(data, kpd::Split::val);
  auto c = small_config();

  c.out = scratch_dir("run_a").string();
  auto a = kpd::train(c, tr, va);
  c.out = scratch_dir("run_b").string();
  auto b = kpd::train(c, tr, va);
  const auto sum_a = kpd::parameter_checksum(*kpd::load_checkpoint(a.final_checkpoint).model);
  CHECK(sum_a == kpd::parameter_checksum(*kpd::load_checkpoint(b.final_checkpoint).model));
  REQUIRE(a.epochs.size() == 2);
  CHECK_FALSE(a.epochs[0].equivariance.has_value());
  CHECK(a.epochs[1].equivariance.has_value());
  CHECK(fs::exists(fs::path(a.final_checkpoint).parent_path() / "run_log.csv"));
  CHECK(fs::exists(fs::path(a.final_checkpoint).parent_path() / "epoch_001.ckpt"));

  // One epoch, then resume for the second.
  auto half = c;
  half.epochs = 1;
  half.out = scratch_dir("run_c").string();
  auto first = kpd::train(half, tr, va);
  auto rest = c;
  rest.out = scratch_dir("run_d").string();
  rest.resume = first.final_checkpoint;
  auto resumed = kpd::train(rest, tr, va);
  REQUIRE(resumed.epochs.size() == 1);
  CHECK(resumed.epochs[0].epoch == 2);
  CHECK(kpd::parameter_checksum(*kpd::load_checkpoint(resumed.final_checkpoint).model) == sum_a);

  auto other = rest;
  other.lr *= 3;
  CHECK_THROWS_AS(kpd::train(other, tr, va), std::invalid_argument);
}

TEST_CASE("nested label subsets") {
  auto small = kpd::nested_subset(1000, 0.01, 4);
  auto mid = kpd::nested_subset(1000, 0.1, 4);
  auto all = kpd::nested_subset(1000, 1.0, 4);
  CHECK(small.size() == 10);
  CHECK(mid.size() == 100);
  CHECK(all.size() == 1000);
  CHECK(std::equal(small.begin(), small.end(), mid.begin()));
  CHECK(std::equal(mid.begin(), mid.end(), all.begin()));
  std::set<int64_t> unique(all.begin(), all.end());
  CHECK(unique.size() == 1000);
  CHECK(kpd::nested_subset(1000, 0.1, 5) != mid);
  CHECK(kpd::nested_subset(1000, 0.1, 4) == mid);
  CHECK_THROWS_AS(kpd::nested_subset(50, 0.01, 4), std::invalid_argument);
}

TEST_CASE("supervised heatmap loss") {
  auto targets = torch::tensor({0.3, 0.6, 0.8, 0.25}, torch::kFloat64).view({1, 2, 2});
  auto visible = torch::tensor({true, true}).view({1, 2});
  auto grid = kpd::render_gaussian(targets, 0.02, 32, 32).maps;
  auto dist = grid / grid.sum({2, 3}, true);
  auto optimum = kpd::HeatmapStack{dist.clamp_min(1e-300).log(), kpd::HeatmapKind::logits};
  CHECK(std::abs(kpd::supervised_heatmap_loss(optimum, targets, visible, 0.02).item<double>()) <
        1e-6);
  auto flat = kpd::HeatmapStack{torch::zeros({1, 2, 32, 32}, torch::kFloat64),
                                kpd::HeatmapKind::logits};
  const double worse = kpd::supervised_heatmap_loss(flat, targets, visible, 0.02).item<double>();
  CHECK(worse > 1.0);
  // Invisible keypoints contribute nothing.
  auto one = torch::tensor({true, false}).view({1, 2});
  auto half = torch::cat({optimum.values.narrow(1, 0, 1), flat.values.narrow(1, 1, 1)}, 1);
  CHECK(kpd::supervised_heatmap_loss({half, kpd::HeatmapKind::logits}, targets, one, 0.02)
            .item<double>() < 1e-6);
}
