#include "torch_doctest.hpp"
#include "kpd/geometry.hpp"
#include "kpd/losses.hpp"
#include "kpd/networks.hpp"

using kpd::ScaleProfile;

namespace {

kpd::ModelShape shape_for(const ScaleProfile& profile, int64_t parts, int64_t kw = 3,
                          int64_t classes = 4) {
  kpd::ModelShape s;
  s.profile = profile;
  s.num_parts = parts;
  s.discriminative_parts = kw;
  s.num_classes = classes;
  return s;
}

}  // namespace

TEST_CASE("full profile dimensions") {
  torch::NoGradGuard guard;
  torch::manual_seed(0);
  const auto profile = ScaleProfile::full();
  kpd::KeypointModel model(shape_for(profile, 10, 5, 200));
  model->eval();
  auto images = torch::rand({1, 3, 128, 128});
  auto f = model->encode(images);
  const int64_t sizes[4] = {32, 16, 8, 4};
  const int64_t widths[4] = {256, 512, 1024, 2048};
  for (int l = 0; l < 4; ++l) {
    CHECK(f.blocks[l].size(1) == widths[l]);
    CHECK(f.blocks[l].size(2) == sizes[l]);
    CHECK(f.blocks[l].size(3) == sizes[l]);
  }
  for (const auto& level : model->keypoint_head()->forward_levels(f)) {
    CHECK(level.sizes() == torch::IntArrayRef({1, 10, 64, 64}));
  }
  auto det = model->detect(f);
  CHECK(det.heatmaps.values.sizes() == torch::IntArrayRef({1, 10, 64, 64}));

  auto stages = model->decoder()->forward_stages(f.c4(), det.keypoints);
  REQUIRE(stages.size() == 6);
  const int64_t out_sizes[5] = {8, 16, 32, 64, 128};
  for (int s = 0; s < 5; ++s) CHECK(stages[s].size(2) == out_sizes[s]);
  CHECK(stages[5].sizes() == torch::IntArrayRef({1, 3, 128, 128}));
  const auto inputs = model->decoder()->stage_input_channels();
  const int64_t decoder_in[5] = {2048, 1024, 512, 256, 128};
  for (int s = 0; s < 5; ++s) CHECK(inputs[s] == decoder_in[s] + 10);
  CHECK((model->decoder()->sigmas() == std::array<double, 5>{0.1, 0.1, 0.01, 0.01, 0.001}));

  auto base = model->weak_head()->base_features(f);
  CHECK(base.sizes() == torch::IntArrayRef({1, 4 * 256, 64, 64}));
  CHECK(model->classify(f, det.heatmaps).sizes() == torch::IntArrayRef({1, 200}));
}

TEST_CASE("desk profile keeps strides") {
  torch::NoGradGuard guard;
  kpd::KeypointModel model(shape_for(ScaleProfile::desk(), 8));
  auto f = model->encode(torch::rand({2, 3, 64, 64}));
  CHECK(f.c1().size(2) == 16);
  CHECK(f.c4().size(2) == 2);
  auto det = model->detect(f);
  CHECK(det.heatmaps.values.sizes() == torch::IntArrayRef({2, 8, 32, 32}));
  CHECK(model->reconstruct(f.c4(), det.keypoints).sizes() == torch::IntArrayRef({2, 3, 64, 64}));
  CHECK_THROWS_AS(model->encode(torch::rand({1, 3, 32, 32})), std::invalid_argument);
}

TEST_CASE("keypoint head output is the sum of its levels") {
  torch::NoGradGuard guard;
  kpd::KeypointModel model(shape_for(ScaleProfile::desk(), 20));
  model->eval();
  auto f = model->encode(torch::rand({1, 3, 64, 64}));
  auto levels = model->keypoint_head()->forward_levels(f);
  auto total = model->keypoint_head()->forward(f).values;
  CHECK(total.size(1) == 20);
  CHECK(torch::allclose(total, levels[0] + levels[1] + levels[2] + levels[3], 1e-5, 1e-5));
}

TEST_CASE("decoder and weak head reject mismatched shapes") {
  const auto desk = ScaleProfile::desk();
  kpd::KeypointModel model(shape_for(desk, 8));
  auto f = model->encode(torch::rand({1, 3, 64, 64}));
  CHECK_THROWS_AS(model->reconstruct(f.c4(), torch::rand({1, 7, 2})), std::invalid_argument);
  CHECK_THROWS_AS(kpd::WeakHead(desk, 4, 5, 3), std::invalid_argument);
  CHECK_THROWS_AS(kpd::WeakHead(desk, 4, 4, 3), std::invalid_argument);
}

TEST_CASE("part pooling") {
  auto base = torch::randn({2, 6, 5, 5});
  auto onehot = torch::zeros({2, 1, 5, 5});
  onehot[0][0][1][3] = 1.0;
  onehot[1][0][4][0] = 1.0;
  auto h = kpd::WeakHeadImpl::pool_parts(onehot, base);
  CHECK(torch::allclose(h[0][0], base[0].select(1, 1).select(1, 3)));
  CHECK(torch::allclose(h[1][0], base[1].select(1, 4).select(1, 0)));

  auto uniform = torch::full({2, 1, 5, 5}, 1.0 / 25);
  auto hu = kpd::WeakHeadImpl::pool_parts(uniform, base);
  CHECK(torch::allclose(hu.select(1, 0), base.mean({2, 3}), 1e-5, 1e-6));

  auto heat = torch::softmax(torch::randn({2, 3, 25}), 2).view({2, 3, 5, 5});
  auto other = torch::randn({2, 6, 5, 5});
  auto lhs = kpd::WeakHeadImpl::pool_parts(heat, 2.0 * base + 3.0 * other);
  auto rhs = 2.0 * kpd::WeakHeadImpl::pool_parts(heat, base) +
             3.0 * kpd::WeakHeadImpl::pool_parts(heat, other);
  CHECK((lhs - rhs).abs().max().item<double>() < 1e-5);
}

TEST_CASE("perceptual network is fixed and discriminative") {
  kpd::PerceptualNet net(ScaleProfile::desk(), 4, 123);
  auto images = torch::rand({3, 3, 64, 64});
  auto a = net->forward(images);
  auto b = net->forward(images);
  REQUIRE(a.size() == 4);
  for (size_t i = 0; i < a.size(); ++i) CHECK(torch::equal(a[i], b[i]));
  for (const auto& p : net->parameters()) CHECK_FALSE(p.requires_grad());

  kpd::PerceptualNet same(ScaleProfile::desk(), 4, 123);
  CHECK(torch::equal(same->forward(images)[3], a[3]));

  auto shuffled = images.index_select(0, torch::tensor({1, 2, 0}, torch::kLong));
  CHECK(kpd::perceptual_loss(net, images, images).item<double>() == 0.0);
  CHECK(kpd::perceptual_loss(net, images, shuffled).item<double>() > 0.0);
}

TEST_CASE("one encoder feeds every head") {
  kpd::KeypointModel model(shape_for(ScaleProfile::desk(), 6));
  auto names = model->named_children();
  int encoders = 0;
  for (const auto& child : model->modules(false)) {
    if (dynamic_cast<kpd::EncoderImpl*>(child.get())) ++encoders;
  }
  CHECK(encoders == 1);
  REQUIRE(names.contains("encoder"));
  CHECK(names["encoder"].get() == model->encoder().ptr().get());
}

TEST_CASE("reconstruction loss reaches the keypoint head") {
  torch::manual_seed(1);
  kpd::KeypointModel model(shape_for(ScaleProfile::desk(), 6));
  auto source = torch::rand({2, 3, 64, 64});
  auto target = torch::rand({2, 3, 64, 64});
  auto kps = model->detect(target).keypoints;
  auto recon = model->reconstruct(model->encode(source).c4(), kps);
  (recon - target).square().mean().backward();
  double grad = 0.0;
  for (const auto& p : model->keypoint_head()->parameters()) {
    if (p.grad().defined()) grad += p.grad().abs().sum().item<double>();
  }
  CHECK(grad > 0.0);
}

TEST_CASE("readout copies selected channels") {
  kpd::KeypointReadout readout(5, 3);
  readout->select_channels({4, 0, 2});
  auto logits = torch::randn({2, 5, 8, 8});
  auto out = readout->forward({logits, kpd::HeatmapKind::logits}).values;
  CHECK(torch::allclose(out.select(1, 0), logits.select(1, 4)));
  CHECK(torch::allclose(out.select(1, 1), logits.select(1, 0)));
  CHECK(torch::allclose(out.select(1, 2), logits.select(1, 2)));
}
