#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"

#ifndef KPD_CLI_PATH
#error "KPD_CLI_PATH must name the kpd executable"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "kpd_test_cli";

struct Outcome {
  int status = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome run(const std::string& args) {
  fs::create_directories(kRoot);
  const auto out = kRoot / "stdout.txt", err = kRoot / "stderr.txt";
  const std::string cmd = std::string(KPD_CLI_PATH) + " " + args + " > " + out.string() +
                          " 2> " + err.string();
  const int raw = std::system(cmd.c_str());
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(out), slurp(err)};
}

}  // namespace

TEST_CASE("cli end to end") {
  fs::remove_all(kRoot);
  const auto data = (kRoot / "data").string();
  auto synth = run("synth-data --n 60 --seed 4 --out " + data);
  REQUIRE(synth.status == 0);
  CHECK(fs::exists(kRoot / "data" / "manifest.jsonl"));
  CHECK(fs::exists(kRoot / "data" / "ground_truth.json"));
  CHECK(json::parse(synth.out)["images"] == 60);

  const std::string train_args = "train --preset toy --manifest " + data +
                                 "/manifest.jsonl --epochs 2 --batch 8 --curriculum_epoch 1"
                                 " --deterministic --out ";
  auto a = run(train_args + (kRoot / "run_a").string());
  REQUIRE(a.status == 0);
  auto b = run(train_args + (kRoot / "run_b").string());
  REQUIRE(b.status == 0);
  const auto ja = json::parse(a.out), jb = json::parse(b.out);
  CHECK(ja["parameter_sha256"] == jb["parameter_sha256"]);
  CHECK(ja["epochs_run"] == 2);
  CHECK(fs::exists(kRoot / "run_a" / "run_log.csv"));

  for (const std::string metric : {"pck", "probe", "accuracy", "posture"}) {
    CAPTURE(metric);
    auto e = run("eval --checkpoint " + ja["final_checkpoint"].get<std::string>() +
                 " --manifest " + data + "/manifest.jsonl --metric " + metric + " --out " +
                 (kRoot / "eval").string());
    REQUIRE(e.status == 0);
    auto report = json::parse(e.out);
    CHECK(report["metric"] == metric);
  }
  auto pck = json::parse(slurp(kRoot / "eval" / "eval_pck.json"));
  CHECK(pck["per_keypoint"].size() == 6);
  CHECK(pck["prediction"] == "linear_probe");
  CHECK(fs::exists(kRoot / "eval" / "posture_confusion.csv"));

  auto d = run("discover --checkpoint " + ja["final_checkpoint"].get<std::string>() +
               " --manifest " + data + "/manifest.jsonl --out " + (kRoot / "disc").string());
  REQUIRE(d.status == 0);
  CHECK(json::parse(slurp(kRoot / "disc" / "discovered_keypoints.json"))["records"].size() == 60);

  auto v = run("visualize --checkpoint " + ja["final_checkpoint"].get<std::string>() +
               " --manifest " + data + "/manifest.jsonl --n 2 --mode manipulation --out " +
               (kRoot / "vis").string());
  REQUIRE(v.status == 0);
  CHECK(json::parse(v.out)["files"].size() == 2);
}

TEST_CASE("cli errors") {
  CHECK(run("fly").status == 2);
  CHECK(run("train --no-such-flag 3").status == 2);
  CHECK(run("").status == 2);
  CHECK(run("--help").status == 0);

  auto missing = run("eval --checkpoint " + (kRoot / "nowhere.ckpt").string() + " --manifest " +
                     (kRoot / "nowhere.jsonl").string());
  CHECK(missing.status == 1);
  auto err = json::parse(missing.err);
  CHECK(err["error"]["verb"] == "eval");
  CHECK_FALSE(err["error"]["message"].get<std::string>().empty());

  auto bad = run("train --lr -1");
  CHECK(bad.status == 1);
  CHECK(json::parse(bad.err)["error"]["kind"] == "invalid_argument");
}
