#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "probeguide/config.hpp"

namespace probeguide {

inline constexpr const char* kIncompleteMarker = ".incomplete";

/// Writes through a temporary file and renames, so readers never see a torn file.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

nlohmann::json read_json_file(const std::filesystem::path& path);

/// meta.json of a checkpoint or report directory. Throws MissingFileError or MalformedMetadataError.
nlohmann::json read_meta(const std::filesystem::path& dir);
void write_meta(const std::filesystem::path& dir, const nlohmann::json& meta);

/// Throws ConfigError when meta["config_hash"] differs from `expected`.
void check_config_hash(const nlohmann::json& meta, const std::string& expected, const std::filesystem::path& dir);

/// Reads config.json of a checkpoint and verifies it hashes to meta["config_hash"].
ExperimentConfig load_checkpoint_config(const std::filesystem::path& dir);

void mark_incomplete(const std::filesystem::path& dir);
void clear_incomplete(const std::filesystem::path& dir);
bool is_incomplete(const std::filesystem::path& dir);

}  // namespace probeguide
