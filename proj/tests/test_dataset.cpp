#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "pdseg/dataset.hpp"
#include "pdseg/errors.hpp"
#include "pdseg/io.hpp"

using namespace pdseg;
using namespace pdseg::data;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pdseg_test_dataset_" + name);
  fs::remove_all(p);
  return p;
}

DatasetConfig small_config() {
  DatasetConfig c;
  c.train = 5;
  c.val = 2;
  c.height = 24;
  c.width = 24;
  c.master_seed = 11;
  return c;
}

}  // namespace

TEST_CASE("build writes a manifest whose totals match a recount") {
  const fs::path dir = scratch("build");
  const DatasetManifest m = build_dataset(small_config(), dir);
  REQUIRE(m.train.size() == 5);
  REQUIRE(m.val.size() == 2);
  CHECK(m.train[0].id == "train/000000");
  CHECK(m.val[1].id == "val/000001");

  // Independent recount straight from the mask files.
  ClassTotals counted{};
  for (const SampleRecord& r : m.train) {
    CHECK(!r.objects.empty());
    for (const ObjectRecord& o : r.objects) {
      const Tensor mask = io::load_pgm_mask(dir / o.mask);
      std::uint64_t n = 0;
      for (double v : mask.data()) n += v > 0 ? 1 : 0;
      CHECK(n == o.pixels);
      CHECK(n >= 3);  // 0.005 * 576 rounds up to 3
      counted[static_cast<std::size_t>(o.class_id)] += n;
    }
  }
  CHECK(counted == m.train_pixels);

  const DatasetManifest back = DatasetManifest::load(dir / "manifest.json");
  CHECK(back.to_json() == m.to_json());
  CHECK_NOTHROW(back.validate(dir));

  const auto samples = load_split(dir, back.val);
  REQUIRE(samples.size() == 2);
  CHECK(samples[0].rgb.shape() == Shape{3, 24, 24});
  CHECK(samples[0].depth.shape() == Shape{24, 24});
  fs::remove_all(dir);
}

TEST_CASE("same seed gives byte-identical output") {
  const fs::path a = scratch("a"), b = scratch("b");
  build_dataset(small_config(), a);
  build_dataset(small_config(), b);
  CHECK(io::read_file(a / "manifest.json") == io::read_file(b / "manifest.json"));
  CHECK(io::read_file(a / "train/000003/rgb.ppm") == io::read_file(b / "train/000003/rgb.ppm"));
  DatasetConfig other = small_config();
  other.master_seed = 12;
  const fs::path c = scratch("c");
  build_dataset(other, c);
  CHECK(io::read_file(a / "train/000000/rgb.ppm") != io::read_file(c / "train/000000/rgb.ppm"));
  for (const auto& p : {a, b, c}) fs::remove_all(p);
}

TEST_CASE("an empty validation split is valid") {
  DatasetConfig cfg = small_config();
  cfg.val = 0;
  const fs::path dir = scratch("noval");
  const DatasetManifest m = build_dataset(cfg, dir);
  CHECK(m.val.empty());
  for (auto v : m.val_pixels) CHECK(v == 0);
  CHECK_NOTHROW(DatasetManifest::load(dir / "manifest.json").validate(dir));
  fs::remove_all(dir);
}

TEST_CASE("validation catches tampering") {
  const fs::path dir = scratch("tamper");
  DatasetManifest m = build_dataset(small_config(), dir);

  SUBCASE("wrong declared total") {
    const std::size_t c = static_cast<std::size_t>(m.train[0].objects[0].class_id);
    m.train_pixels[c] += 1;
    CHECK_THROWS_AS(m.validate(dir), DataError);
  }
  SUBCASE("mask edited on disk") {
    const ObjectRecord& o = m.train[0].objects[0];
    Tensor mask = io::load_pgm_mask(dir / o.mask);
    for (double& v : mask.data_mut()) v = 0.0;
    mask.data_mut()[0] = 1.0;
    io::save_pgm_mask(dir / o.mask, mask);
    CHECK_THROWS_AS(m.validate(dir), DataError);
  }
  SUBCASE("missing file") {
    fs::remove(dir / m.train[1].rgb);
    CHECK_THROWS_AS(m.validate(dir), IoError);
  }
  SUBCASE("corrupt file") {
    io::write_file_atomic(dir / m.train[1].depth, "Pf\n24 24\n-1.0\n");
    CHECK_THROWS_AS(m.validate(dir), FormatError);
  }
  fs::remove_all(dir);
}

TEST_CASE("manifest schema is strict") {
  const fs::path dir = scratch("schema");
  const DatasetManifest m = build_dataset(small_config(), dir);
  json j = m.to_json();
  SUBCASE("unknown top-level key") {
    j["extra"] = 1;
    CHECK_THROWS_AS(DatasetManifest::from_json(j), FormatError);
  }
  SUBCASE("unknown object key") {
    j["splits"]["train"][0]["objects"][0]["colour"] = "red";
    CHECK_THROWS_AS(DatasetManifest::from_json(j), FormatError);
  }
  SUBCASE("wrong version") {
    j["version"] = 2;
    CHECK_THROWS_AS(DatasetManifest::from_json(j), FormatError);
  }
  SUBCASE("wrong type") {
    j["height"] = "24";
    CHECK_THROWS_AS(DatasetManifest::from_json(j), FormatError);
  }
  SUBCASE("class out of range") {
    j["splits"]["train"][0]["objects"][0]["class_id"] = 12;
    CHECK_THROWS_AS(DatasetManifest::from_json(j), FormatError);
  }
  SUBCASE("invalid JSON reports a byte offset") {
    io::write_file_atomic(dir / "bad.json", "{\"format\": ");
    try {
      DatasetManifest::load(dir / "bad.json");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset() > 0);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("config validation") {
  DatasetConfig c = small_config();
  c.height = 8;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.min_object_fraction = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
