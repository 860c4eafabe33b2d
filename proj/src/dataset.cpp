#include "probeguide/dataset.hpp"

#include <cstdio>
#include <cstdlib>

#include "probeguide/checkpoint.hpp"
#include "probeguide/errors.hpp"
#include "probeguide/phantom.hpp"
#include "probeguide/rng.hpp"
#include "probeguide/scan_store.hpp"

namespace probeguide {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kTrajectoryStream = 0x7472616aULL;

}  // namespace

std::string data_config_hash(const ExperimentConfig& config) {
  const json d = to_json(config).at("data");
  const json generation = {{"phantom", d.at("phantom")}, {"image", d.at("image")}, {"trajectory", d.at("trajectory")}};
  return fnv1a_hex(generation.dump(2));
}

bool is_empty_dir(const fs::path& dir) { return !fs::exists(dir) || (fs::is_directory(dir) && fs::is_empty(dir)); }

json generate_dataset(const ExperimentConfig& config, const fs::path& out, const DatasetRequest& request) {
  config.data.validate();
  if (request.train_scans < 1 || request.test_scans < 1) throw ConfigError("need at least one train and one test scan");
  if (request.test_seed_offset < static_cast<std::uint64_t>(request.train_scans)) {
    throw ConfigError("train and test phantom seed ranges overlap; raise the test seed offset");
  }
  if (!is_empty_dir(out)) {
    if (!request.force) throw ConfigError(out.string() + " is not empty (use --force to overwrite)");
    fs::remove_all(out);
  }
  fs::create_directories(out);
  mark_incomplete(out);
  const std::string hash = data_config_hash(config);
  json manifest = {{"seed", request.seed},
                   {"data_hash", hash},
                   {"test_seed_offset", request.test_seed_offset},
                   {"train", json::array()},
                   {"test", json::array()}};
  for (const std::string split : {"train", "test"}) {
    const int count = split == "train" ? request.train_scans : request.test_scans;
    const std::uint64_t base = request.seed + (split == "train" ? 0 : request.test_seed_offset);
    for (int i = 0; i < count; ++i) {
      const std::uint64_t phantom_seed = base + static_cast<std::uint64_t>(i);
      char id[64];
      std::snprintf(id, sizeof id, "%s_%04d", split.c_str(), i);
      const Phantom phantom = build_phantom(config.data.phantom, phantom_seed);
      TrajectoryConfig traj = config.data.trajectory;
      traj.seed = mix_seed(phantom_seed, kTrajectoryStream);
      Scan scan = generate_scan(phantom, traj, config.data.image, id);
      scan.seed = phantom_seed;
      save_scan(scan, out / split / id);
      manifest[split].push_back({{"id", id}, {"phantom_seed", phantom_seed}});
      if (!request.quiet) std::fprintf(stderr, "[gen-data] %s\n", id);
    }
  }
  write_text_atomic(out / "config.json", canonical_text(config));
  write_text_atomic(out / "manifest.json", manifest.dump(2) + "\n");
  clear_incomplete(out);
  return manifest;
}

std::vector<Scan> load_split(const fs::path& data, const std::string& split, const std::optional<std::string>& expected_hash) {
  if (is_incomplete(data)) throw DataError(data.string() + " is marked incomplete");
  const json manifest = read_json_file(data / "manifest.json");
  if (!manifest.contains(split) || !manifest.contains("data_hash")) {
    throw MalformedMetadataError((data / "manifest.json").string() + ": missing " + split + " or data_hash");
  }
  if (expected_hash && manifest.at("data_hash") != *expected_hash) {
    throw ConfigError("data in " + data.string() + " was generated with different phantom/image/trajectory settings");
  }
  std::vector<Scan> scans;
  for (const auto& entry : manifest.at(split)) scans.push_back(load_scan(data / split / entry.at("id").get<std::string>()));
  if (scans.empty()) throw DataError("split " + split + " of " + data.string() + " is empty");
  return scans;
}

fs::path default_data_root() {
  const char* env = std::getenv("ECHOWORLD_DATA");
  return env && *env ? fs::path(env) : fs::path("data");
}

}  // namespace probeguide
