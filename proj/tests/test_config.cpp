#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "pdseg/config.hpp"
#include "pdseg/errors.hpp"

using namespace pdseg;
using namespace pdseg::config;
namespace fs = std::filesystem;

TEST_CASE("defaults round-trip through JSON") {
  RunConfig c;
  c.matrix.push_back(c.experiment);
  const json j = c.to_json();
  const RunConfig back = RunConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(RunConfig::from_json(json::object()).to_json()["experiment"] == j["experiment"]);
}

TEST_CASE("values override defaults and matrix entries inherit the experiment") {
  const json j = json::parse(R"({
    "experiment": {"split_k": 6, "widths": [4, 8, 8, 16], "optim": {"iterations": 10}},
    "matrix": [
      {"name": "a", "scenario": "rgbd", "provider": {"sigma": 0.2}},
      {"name": "b", "split_k": 8}
    ],
    "monodepth": {"steps": 5, "photometric": {"alpha": 0.5}, "motion": "wander",
                  "scene": {"textured": false}},
    "dataset": {"train": 3, "val": 1}
  })");
  const RunConfig c = RunConfig::from_json(j);
  CHECK(c.experiment.split_k == 6);
  REQUIRE(c.matrix.size() == 2);
  CHECK(c.matrix[0].scenario == harness::Scenario::rgb_d);
  CHECK(c.matrix[0].split_k == 6);
  CHECK(c.matrix[0].optim.iterations == 10);
  CHECK(c.matrix[0].widths == std::vector<std::size_t>{4, 8, 8, 16});
  CHECK(c.matrix[0].provider.sigma == 0.2);
  CHECK(c.matrix[1].split_k == 8);
  CHECK(c.monodepth.steps == 5);
  CHECK(c.monodepth.photometric.alpha == 0.5);
  CHECK(c.monodepth.motion == synth::CameraMotion::wander);
  CHECK_FALSE(c.monodepth.scene.textured);
  CHECK(RunConfig{}.monodepth.scene.textured);
  CHECK(c.dataset.train == 3);
}

TEST_CASE("unknown keys and wrong types are rejected") {
  const char* bad[] = {
      R"({"experimnt": {}})",
      R"({"experiment": {"split": 3}})",
      R"({"experiment": {"optim": {"learning_rate": 1}}})",
      R"({"matrix": [{"provider": {"sigmaa": 1}}]})",
      R"({"monodepth": {"adam": {"lr": 1e-3, "momentum": 0}}})",
      R"({"dataset": {"scene": {"colour": 1}}})",
      R"({"experiment": {"split_k": "4"}})",
      R"({"experiment": {"split_k": -1}})",
      R"({"experiment": {"widths": [4, "8"]}})",
      R"({"experiment": {"scenario": "thermal"}})",
      R"({"experiment": {"eval_click": "corner"}})",
      R"({"monodepth": {"motion": "orbit"}})",
      R"({"experiment": {"split_k": 12}})",
      R"({"matrix": {}})",
      R"([])",
  };
  for (const char* text : bad) {
    INFO(text);
    CHECK_THROWS_AS(RunConfig::from_json(json::parse(text)), ConfigError);
  }
}

TEST_CASE("load reports malformed JSON as a config error") {
  const fs::path p = fs::temp_directory_path() / "pdseg_test_config.json";
  {
    std::ofstream f(p);
    f << "{\"experiment\": {\"split_k\": 4,}}";
  }
  CHECK_THROWS_AS(RunConfig::load(p), ConfigError);
  fs::remove(p);
  CHECK_THROWS_AS(RunConfig::load(p), IoError);
}
