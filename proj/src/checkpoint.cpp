#include "probeguide/checkpoint.hpp"

#include <fstream>

#include "probeguide/errors.hpp"

namespace probeguide {

namespace fs = std::filesystem;
using nlohmann::json;

void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError(path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw MalformedMetadataError(path.string() + ": " + e.what());
  }
}

json read_meta(const fs::path& dir) {
  json meta = read_json_file(dir / "meta.json");
  if (!meta.is_object() || !meta.contains("kind") || !meta.contains("config_hash")) {
    throw MalformedMetadataError((dir / "meta.json").string() + ": missing kind or config_hash");
  }
  return meta;
}

void write_meta(const fs::path& dir, const json& meta) { write_text_atomic(dir / "meta.json", meta.dump(2) + "\n"); }

void check_config_hash(const json& meta, const std::string& expected, const fs::path& dir) {
  const std::string found = meta.value("config_hash", "");
  if (found != expected) {
    throw ConfigError("config hash mismatch for " + dir.string() + ": stored " + found + ", expected " + expected);
  }
}

ExperimentConfig load_checkpoint_config(const fs::path& dir) {
  const json meta = read_meta(dir);
  const ExperimentConfig config = config_from_json(read_json_file(dir / "config.json"));
  check_config_hash(meta, config_hash(config), dir);
  return config;
}

void mark_incomplete(const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream(dir / kIncompleteMarker) << "running\n";
}

void clear_incomplete(const fs::path& dir) { fs::remove(dir / kIncompleteMarker); }

bool is_incomplete(const fs::path& dir) { return fs::exists(dir / kIncompleteMarker); }

}  // namespace probeguide
