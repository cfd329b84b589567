#pragma once

// On-disk synthetic datasets: generation, the JSON manifest, validation by
// recount, and sample loading. Layout and schema: docs/FORMATS.md.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "pdseg/synthworld.hpp"
#include "pdseg/tensor.hpp"

namespace pdseg::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kManifestVersion = 1;

struct ObjectRecord {
  std::string mask;  ///< path relative to the manifest directory
  int class_id = 0;
  std::uint64_t pixels = 0;
};

struct SampleRecord {
  std::string id;
  std::string rgb;
  std::string depth;
  std::vector<ObjectRecord> objects;
};

using ClassTotals = std::array<std::uint64_t, synth::kNumClasses>;

struct DatasetManifest {
  int version = kManifestVersion;
  std::uint64_t master_seed = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  synth::CameraIntrinsics intrinsics;
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> val;
  ClassTotals train_pixels{};
  ClassTotals val_pixels{};
  json generator = json::object();  ///< generation settings, informational

  json to_json() const;
  /// Throws FormatError on schema violations and unknown keys.
  static DatasetManifest from_json(const json& j);
  void save(const fs::path& path) const;
  /// Throws IoError or FormatError.
  static DatasetManifest load(const fs::path& path);

  /// Every referenced file exists and parses with the declared size, masks
  /// are nonempty, disjoint and match their pixel counts, and the per-class
  /// totals match a recount. Throws DataError, IoError or FormatError.
  void validate(const fs::path& root) const;
};

struct DatasetConfig {
  std::size_t train = 200;
  std::size_t val = 60;
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t master_seed = 1;
  synth::SceneConfig scene;
  /// Objects smaller than this fraction of the image are left unannotated.
  double min_object_fraction = 0.005;

  void validate() const;
  json to_json() const;
};

/// Renders train then val samples with seeds derive_seed(master, i), writes
/// them under `out_dir` and saves out_dir/manifest.json. Throws IoError.
DatasetManifest build_dataset(const DatasetConfig& config, const fs::path& out_dir);

struct LoadedObject {
  Tensor mask;  ///< [H,W]
  int class_id = 0;
};

struct LoadedSample {
  std::string id;
  Tensor rgb;    ///< [3,H,W]
  Tensor depth;  ///< [H,W]
  std::vector<LoadedObject> objects;
};

LoadedSample load_sample(const fs::path& root, const SampleRecord& record);
std::vector<LoadedSample> load_split(const fs::path& root, const std::vector<SampleRecord>& split);

}  // namespace pdseg::data
