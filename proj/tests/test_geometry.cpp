#include <cmath>

#include "torch_doctest.hpp"
#include "kpd/geometry.hpp"

using kpd::HeatmapKind;
using kpd::HeatmapStack;

TEST_CASE("spatial softmax examples") {
  SUBCASE("zero logits are uniform") {
    auto p = kpd::spatial_softmax({torch::zeros({1, 3, 4, 4}), HeatmapKind::logits});
    CHECK(p.kind == HeatmapKind::normalized);
    CHECK((p.values - 1.0 / 16).abs().max().item<double>() < 1e-7);
  }
  SUBCASE("per-channel constants cancel") {
    auto x = torch::randn({2, 3, 5, 6});
    auto shift = torch::randn({2, 3, 1, 1}) * 10;
    auto a = kpd::spatial_softmax({x, HeatmapKind::logits}).values;
    auto b = kpd::spatial_softmax({x + shift, HeatmapKind::logits}).values;
    CHECK((a - b).abs().max().item<double>() < 1e-6);
  }
  SUBCASE("a single large logit saturates") {
    auto x = torch::zeros({1, 1, 8, 8});
    x[0][0][3][5] = 50.0;
    auto p = kpd::spatial_softmax({x, HeatmapKind::logits}).values;
    CHECK(p[0][0][3][5].item<double>() >= 1.0 - 1e-6);
  }
  SUBCASE("non-finite input names the channel") {
    auto x = torch::zeros({2, 4, 3, 3});
    x[1][2][0][0] = std::nan("");
    try {
      kpd::spatial_softmax({x, HeatmapKind::logits});
      FAIL("expected rejection");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("channel 2") != std::string::npos);
    }
  }
}

TEST_CASE("soft-argmax examples") {
  auto uniform = HeatmapStack{torch::full({1, 1, 6, 10}, 1.0 / 60), HeatmapKind::normalized};
  auto c = kpd::soft_argmax(uniform);
  CHECK(c[0][0][0].item<double>() == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(c[0][0][1].item<double>() == doctest::Approx(0.5).epsilon(1e-6));

  auto onehot = torch::zeros({1, 1, 4, 8}, torch::kFloat64);
  onehot[0][0][1][6] = 1.0;
  auto p = kpd::soft_argmax({onehot, HeatmapKind::normalized});
  CHECK(p[0][0][0].item<double>() == doctest::Approx(6.5 / 8));
  CHECK(p[0][0][1].item<double>() == doctest::Approx(1.5 / 4));

  // On a 1 x 2 grid the cell centres are exactly (0.25, 0.5) and (0.75, 0.5).
  auto two = torch::full({1, 1, 1, 2}, 0.5, torch::kFloat64);
  auto mid = kpd::soft_argmax({two, HeatmapKind::normalized});
  CHECK(mid[0][0][0].item<double>() == doctest::Approx(0.5));
  CHECK(mid[0][0][1].item<double>() == doctest::Approx(0.5));

  CHECK_THROWS_AS(kpd::soft_argmax({torch::zeros({1, 1, 4, 4}), HeatmapKind::logits}),
                  std::invalid_argument);
}

TEST_CASE("gaussian bottleneck examples") {
  const double sigma = 1.0 / 32;
  auto p = torch::tensor({(10 + 0.5) / 32, (20 + 0.5) / 32}, torch::kFloat64).view({1, 1, 2});
  auto maps = kpd::render_gaussian(p, sigma, 32, 32).maps;
  const double peak = 1.0 / std::sqrt(2 * M_PI * sigma * sigma);
  CHECK(maps[0][0][20][10].item<double>() == doctest::Approx(peak).epsilon(1e-12));
  // Neighbouring cell centre lies exactly one sigma away.
  CHECK(maps[0][0][20][11].item<double>() == doctest::Approx(peak * std::exp(-0.5)).epsilon(1e-12));
  CHECK(maps.flatten().argmax().item<int64_t>() == 20 * 32 + 10);

  auto off = torch::tensor({0.41, 0.77}, torch::kFloat64).view({1, 1, 2});
  auto m2 = kpd::render_gaussian(off, 0.05, 16, 16).maps;
  const auto best = m2.flatten().argmax().item<int64_t>();
  CHECK(best / 16 == int64_t(std::floor(0.77 * 16)));
  CHECK(best % 16 == int64_t(std::floor(0.41 * 16)));

  // Strict positivity wherever the value is representable.
  auto wide = kpd::render_gaussian(torch::rand({3, 5, 2}), 0.1, 32, 32).maps;
  CHECK((wide > 0).all().item<bool>());

  CHECK_THROWS_AS(kpd::render_gaussian(p, 0.0, 8, 8), std::invalid_argument);
  CHECK_THROWS_AS(kpd::render_gaussian(p, -0.1, 8, 8), std::invalid_argument);
}

TEST_CASE("keypoint flip") {
  auto k = torch::tensor({0.5, 0.3, 0.2, 0.7}, torch::kFloat64).view({1, 2, 2});
  auto f = kpd::flip_keypoints(k);
  CHECK(f[0][0][0].item<double>() == 0.5);
  CHECK(f[0][0][1].item<double>() == 0.3);
  CHECK(f[0][1][0].item<double>() == doctest::Approx(0.8));
  CHECK(f[0][1][1].item<double>() == 0.7);
  auto r = torch::rand({4, 6, 2}, torch::kFloat64);
  CHECK(torch::allclose(kpd::flip_keypoints(kpd::flip_keypoints(r)), r, 0, 1e-15));
}

TEST_CASE("flipped image moves the extracted keypoint to 1 - u") {
  auto logits = torch::randn({2, 3, 16, 16}, torch::kFloat64) * 4;
  auto k = kpd::soft_argmax(kpd::spatial_softmax({logits, HeatmapKind::logits}));
  auto kf = kpd::soft_argmax(
      kpd::spatial_softmax({kpd::flip_images(logits), HeatmapKind::logits}));
  CHECK(torch::allclose(kf, kpd::flip_keypoints(k), 0, 1e-12));
}
