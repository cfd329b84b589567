#pragma once

// JSON run configuration. Every section is optional in input and written
// out in full with explicit defaults; unknown keys are a ConfigError so
// typos never pass silently. Schema: docs/FORMATS.md.

#include <filesystem>
#include <vector>

#include "json.hpp"
#include "pdseg/dataset.hpp"
#include "pdseg/harness.hpp"

namespace pdseg::config {

using json = nlohmann::json;

json to_json(const data::DatasetConfig& c);
json to_json(const harness::ProviderConfig& c);
json to_json(const harness::ExperimentConfig& c);
json to_json(const harness::MonodepthConfig& c);

/// Each reader starts from the defaults and overrides the keys present.
/// Throws ConfigError on unknown keys, wrong types or invalid values.
data::DatasetConfig dataset_from_json(const json& j);
harness::ProviderConfig provider_from_json(const json& j);
harness::ExperimentConfig experiment_from_json(const json& j);
harness::MonodepthConfig monodepth_from_json(const json& j);

struct RunConfig {
  data::DatasetConfig dataset;
  harness::ExperimentConfig experiment;
  harness::MonodepthConfig monodepth;
  /// Experiments of the `matrix` command; each entry is read on top of
  /// the `experiment` section.
  std::vector<harness::ExperimentConfig> matrix;

  json to_json() const;
  static RunConfig from_json(const json& j);
  /// Throws IoError, or ConfigError for malformed JSON.
  static RunConfig load(const std::filesystem::path& path);
};

}  // namespace pdseg::config
