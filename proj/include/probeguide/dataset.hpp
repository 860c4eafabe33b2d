#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "probeguide/config.hpp"
#include "probeguide/scan.hpp"

namespace probeguide {

/// Hash of the settings that determine generated scans (phantom, image and trajectory).
std::string data_config_hash(const ExperimentConfig& config);

struct DatasetRequest {
  int train_scans = 40;
  int test_scans = 10;
  std::uint64_t seed = 0;
  /// Test phantoms use seeds seed + offset + i; train phantoms use seed + i.
  std::uint64_t test_seed_offset = 1000000;
  bool force = false;
  bool quiet = false;
};

/// Writes train/ and test/ scan directories, manifest.json and config.json under `out`.
/// Throws ConfigError when `out` is non-empty without force or the seed ranges overlap.
nlohmann::json generate_dataset(const ExperimentConfig& config, const std::filesystem::path& out,
                                const DatasetRequest& request);

/// Loads one split listed in the manifest. When `expected_hash` is given it must equal
/// the manifest's data hash.
std::vector<Scan> load_split(const std::filesystem::path& data, const std::string& split,
                             const std::optional<std::string>& expected_hash = std::nullopt);

/// $ECHOWORLD_DATA when set, otherwise "data".
std::filesystem::path default_data_root();

/// True when the directory is missing or empty.
bool is_empty_dir(const std::filesystem::path& dir);

}  // namespace probeguide
