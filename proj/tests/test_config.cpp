#include <filesystem>
#include <fstream>

#include "torch_doctest.hpp"
#include "kpd/config.hpp"

TEST_CASE("every preset resolves to a complete, valid config") {
  for (const auto& name : kpd::preset_names()) {
    CAPTURE(name);
    auto c = kpd::preset(name);
    CHECK_NOTHROW(c.validate());
    CHECK(c.preset == name);
    for (const auto& key : kpd::config_keys()) {
      CAPTURE(key);
      CHECK_NOTHROW(kpd::get_config_value(c, key));
    }
    // Text round trip reproduces every key.
    auto again = kpd::parse_config_text(kpd::to_config_text(c));
    for (const auto& key : kpd::config_keys()) {
      CHECK(kpd::get_config_value(again, key) == kpd::get_config_value(c, key));
    }
  }
  CHECK_THROWS_AS(kpd::preset("imagenet"), std::invalid_argument);
}

TEST_CASE("preset rows") {
  auto celeba = kpd::preset("celeba");
  CHECK(celeba.parts == 10);
  CHECK(celeba.weights.perceptual == 1.0);
  CHECK(celeba.weights.weak == 0.0);
  CHECK(celeba.weights.equivariance == 0.0);
  CHECK(celeba.profile.name == "full");

  CHECK(kpd::preset("cub").parts == 15);
  CHECK(kpd::preset("cub").weights.curriculum_epoch == 30);
  CHECK(kpd::preset("animalpose").parts == 20);
  CHECK(kpd::preset("animalpose").weights.curriculum_epoch == 40);
  CHECK(kpd::preset("stanforddogs").parts == 24);
  CHECK(kpd::preset("stanforddogs").weights.curriculum_epoch == 30);
  for (auto name : {"cub", "animalpose", "stanforddogs"}) {
    auto c = kpd::preset(name);
    CHECK(c.weights.perceptual == 1.0);
    CHECK(c.weights.weak == 1.0);
    CHECK(c.weights.equivariance == 1.0);
  }
  auto toy = kpd::preset("toy");
  CHECK(toy.profile.name == "desk");
  CHECK(toy.classes == 3);
  CHECK(toy.epochs <= 60);
}

TEST_CASE("config text parsing") {
  auto c = kpd::parse_config_text(
      "# comment\n"
      "preset = cub\n"
      "lr = 0.005   # trailing comment\n"
      "\n"
      "w_equiv = 0.5\n"
      "deterministic = true\n"
      "sampler_policy = absolute\n");
  CHECK(c.preset == "cub");
  CHECK(c.parts == 15);
  CHECK(c.lr == 0.005);
  CHECK(c.weights.equivariance == 0.5);
  CHECK(c.deterministic);

  CHECK_THROWS_AS(kpd::parse_config_text("learning_rate = 1\n"), std::invalid_argument);
  CHECK_THROWS_AS(kpd::parse_config_text("lr = fast\n"), std::invalid_argument);
  CHECK_THROWS_AS(kpd::parse_config_text("lr 0.1\n"), std::invalid_argument);
  CHECK_THROWS_AS(kpd::parse_config_text("profile = huge\n"), std::invalid_argument);

  const auto path = std::filesystem::temp_directory_path() / "kpd_test_config.cfg";
  std::ofstream(path) << "epochs = 3\nparts = 6\n";
  auto f = kpd::load_config_file(path);
  CHECK(f.epochs == 3);
  CHECK(f.parts == 6);
  CHECK_THROWS(kpd::load_config_file(path.string() + ".missing"));
}

TEST_CASE("validation") {
  auto bad = [](const std::string& key, const std::string& value) {
    auto c = kpd::preset("toy");
    kpd::set_config_value(c, key, value);
    return c;
  };
  CHECK_THROWS_AS(bad("lr", "0").validate(), std::invalid_argument);
  CHECK_THROWS_AS(bad("discriminative_parts", "8").validate(), std::invalid_argument);
  CHECK_THROWS_AS(bad("w_weak", "-1").validate(), std::invalid_argument);
  CHECK_THROWS_AS(bad("tps_scale", "0.2").validate(), std::invalid_argument);
  CHECK_THROWS_AS(bad("fraction", "0").validate(), std::invalid_argument);
  CHECK_NOTHROW(bad("fraction", "0.01").validate());
}

TEST_CASE("config hash covers identity keys only") {
  auto a = kpd::preset("toy");
  auto b = a;
  b.epochs = a.epochs + 10;
  b.out = "elsewhere";
  b.deterministic = !a.deterministic;
  CHECK(kpd::config_hash(a) == kpd::config_hash(b));
  b.lr *= 2;
  CHECK(kpd::config_hash(a) != kpd::config_hash(b));
  auto c = a;
  c.seed = 7;
  CHECK(kpd::config_hash(a) != kpd::config_hash(c));
}

TEST_CASE("sha256") {
  CHECK(kpd::sha256_hex("abc", 3) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
