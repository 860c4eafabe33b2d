#include "probeguide/scan_store.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "probeguide/errors.hpp"

namespace probeguide {

namespace fs = std::filesystem;
using nlohmann::json;

std::optional<PlaneId> plane_from_name(std::string_view name) {
  for (PlaneId id : kAllPlanes) {
    if (plane_name(id) == name) return id;
  }
  return std::nullopt;
}

std::optional<std::size_t> Scan::position_of(int t) const {
  const auto it = std::lower_bound(frames.begin(), frames.end(), t, [](const Frame& f, int v) { return f.t < v; });
  if (it == frames.end() || it->t != t) return std::nullopt;
  return static_cast<std::size_t>(it - frames.begin());
}

void Scan::validate() const {
  for (std::size_t i = 1; i < frames.size(); ++i) {
    if (frames[i].t <= frames[i - 1].t) throw DataError("scan " + scan_id + ": timesteps not strictly increasing");
  }
  for (const auto& [id, ann] : annotations) {
    if (!position_of(ann.t)) {
      throw DanglingAnnotationError(std::string(plane_name(id)) + " at t=" + std::to_string(ann.t) + " in scan " +
                                    scan_id);
    }
  }
}

namespace {

std::string frame_file(int t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06d.png", t);
  return buf;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError(path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw MalformedMetadataError(path.string() + ": " + e.what());
  }
}

double parse_field(const std::string& s, const std::string& row) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) {
    throw MalformedPoseTableError("bad number '" + s + "' in row '" + row + "'");
  }
  return v;
}

}  // namespace

void save_scan(const Scan& scan, const fs::path& dir) {
  scan.validate();
  fs::create_directories(dir / "frames");
  {
    std::ofstream out(dir / "poses.csv");
    if (!out) throw DataError("cannot write " + (dir / "poses.csv").string());
    out << kPoseCsvHeader << '\n';
    char buf[256];
    for (const auto& f : scan.frames) {
      const Pose& p = f.pose;
      std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", f.t, p.x, p.y, p.z, p.yaw, p.pitch,
                    p.roll);
      out << buf;
      write_png(dir / "frames" / frame_file(f.t), f.image);
    }
  }
  json planes = json::object();
  for (const auto& [id, ann] : scan.annotations) planes[std::string(plane_name(id))] = {{"t", ann.t}};
  std::ofstream(dir / "planes.json") << planes.dump(2) << '\n';
  const json meta = {{"scan_id", scan.scan_id},
                     {"fps", scan.fps},
                     {"seed", scan.seed},
                     {"generator_version", scan.generator_version}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
}

Scan load_scan(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw MissingFileError(dir.string());
  for (const char* name : {"poses.csv", "planes.json", "meta.json"}) {
    if (!fs::exists(dir / name)) throw MissingFileError((dir / name).string());
  }
  if (!fs::is_directory(dir / "frames")) throw MissingFileError((dir / "frames").string());

  Scan scan;
  const json meta = read_json(dir / "meta.json");
  try {
    scan.scan_id = meta.at("scan_id").get<std::string>();
    scan.fps = meta.at("fps").get<double>();
    scan.seed = meta.at("seed").get<std::uint64_t>();
    scan.generator_version = meta.at("generator_version").get<std::string>();
  } catch (const json::exception& e) {
    throw MalformedMetadataError("meta.json: " + std::string(e.what()));
  }

  std::ifstream in(dir / "poses.csv");
  std::string line;
  if (!std::getline(in, line)) throw MalformedPoseTableError("empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kPoseCsvHeader) throw MalformedPoseTableError("unexpected header '" + line + "'");
  bool saw_partial = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (saw_partial) throw MalformedPoseTableError("row after incomplete row");
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 7) throw MalformedPoseTableError("row '" + line + "' has " + std::to_string(fields.size()) + " fields");
    Frame f;
    const double t = parse_field(fields[0], line);
    if (t != std::floor(t)) throw MalformedPoseTableError("non-integer timestep in row '" + line + "'");
    f.t = static_cast<int>(t);
    f.pose = {parse_field(fields[1], line), parse_field(fields[2], line), parse_field(fields[3], line),
              parse_field(fields[4], line), parse_field(fields[5], line), parse_field(fields[6], line)};
    const fs::path png = dir / "frames" / frame_file(f.t);
    if (!fs::exists(png)) throw MissingFileError(png.string());
    f.image = read_png(png);
    scan.frames.push_back(std::move(f));
  }
  if (scan.frames.empty()) throw MalformedPoseTableError("no rows");
  std::size_t png_count = 0;
  for (const auto& e : fs::directory_iterator(dir / "frames")) png_count += e.path().extension() == ".png" ? 1 : 0;
  if (png_count != scan.frames.size()) {
    throw MalformedPoseTableError(std::to_string(scan.frames.size()) + " rows for " + std::to_string(png_count) +
                                  " frame images");
  }
  for (std::size_t i = 1; i < scan.frames.size(); ++i) {
    if (scan.frames[i].t <= scan.frames[i - 1].t) throw MalformedPoseTableError("timesteps not strictly increasing");
  }

  const json planes = read_json(dir / "planes.json");
  if (!planes.is_object()) throw MalformedMetadataError("planes.json must be an object");
  for (const auto& [name, value] : planes.items()) {
    const auto id = plane_from_name(name);
    if (!id) throw MalformedMetadataError("unknown plane id '" + name + "'");
    int t = 0;
    try {
      t = value.at("t").get<int>();
    } catch (const json::exception& e) {
      throw MalformedMetadataError("planes.json entry " + name + ": " + e.what());
    }
    const auto pos = scan.position_of(t);
    if (!pos) throw DanglingAnnotationError(name + " at t=" + std::to_string(t) + " in " + dir.string());
    scan.annotations[*id] = Annotation{t, scan.frames[*pos].pose};
  }
  return scan;
}

Scan decimate(const Scan& scan, double target_fps) {
  if (!(target_fps > 0.0)) throw ConfigError("target fps must be positive");
  if (target_fps > scan.fps) throw ConfigError("target fps exceeds the scan frame rate");
  const auto step = static_cast<std::size_t>(std::max<long>(1, std::lround(scan.fps / target_fps)));
  Scan out;
  out.scan_id = scan.scan_id;
  out.seed = scan.seed;
  out.generator_version = scan.generator_version;
  out.fps = scan.fps / static_cast<double>(step);
  for (std::size_t i = 0; i < scan.frames.size(); i += step) out.frames.push_back(scan.frames[i]);
  for (const auto& [id, ann] : scan.annotations) {
    // Last kept frame with t <= s_k.
    const auto it = std::upper_bound(out.frames.begin(), out.frames.end(), ann.t,
                                     [](int v, const Frame& f) { return v < f.t; });
    const Frame& kept = it == out.frames.begin() ? out.frames.front() : *std::prev(it);
    out.annotations[id] = Annotation{kept.t, kept.pose};
  }
  return out;
}

PairSample sample_pair(const Scan& scan, Rng& rng) {
  const std::size_t n = scan.frames.size();
  if (n < 2) throw DataError("pair sampling needs at least two frames in scan " + scan.scan_id);
  PairSample s;
  s.a = static_cast<std::size_t>(rng.uniform_int(n));
  s.b = static_cast<std::size_t>(rng.uniform_int(n - 1));
  if (s.b >= s.a) ++s.b;
  const Frame& fa = scan.frames[s.a];
  const Frame& fb = scan.frames[s.b];
  s.image_a = &fa.image;
  s.image_b = &fb.image;
  s.pose_a = fa.pose;
  s.pose_b = fb.pose;
  s.a_to_b = relative(fb.pose, fa.pose);
  return s;
}

std::vector<int> decayed_history_sample(int t, int count, double alpha) {
  if (t < 1 || count < 1 || !(alpha > 0.0)) throw ConfigError("history sampling needs t >= 1, N >= 1, alpha > 0");
  std::vector<int> out(static_cast<std::size_t>(count));
  const double scale = t / (alpha * count);
  for (int i = 1; i <= count; ++i) {
    const double v = t + scale * std::log(static_cast<double>(i) / count);
    // std::lround rounds halfway cases away from zero.
    const long r = std::lround(v);
    out[static_cast<std::size_t>(i - 1)] = static_cast<int>(std::clamp<long>(r, 1, t));
  }
  return out;
}

PlaneTargets all_plane_targets(const Scan& scan, const Pose& current) {
  PlaneTargets tg;
  for (const auto& [id, ann] : scan.annotations) {
    tg.movement[static_cast<std::size_t>(index_of(id))] = guidance_target(ann.pose, current);
    tg.mask[static_cast<std::size_t>(index_of(id))] = true;
  }
  return tg;
}

GuidanceSample build_sequence_input(const Scan& scan, int t, int count, double alpha, Direction direction) {
  const int length = static_cast<int>(scan.frames.size());
  if (t < 1 || t > length) throw DataError("timestep outside scan " + scan.scan_id);
  GuidanceSample s;
  s.direction = direction;
  // In reverse the scan is replayed from its last frame, so sampling runs on flipped positions.
  const int local_t = direction == Direction::Forward ? t : length - t + 1;
  for (int p : decayed_history_sample(local_t, count, alpha)) {
    const int pos = direction == Direction::Forward ? p : length - p + 1;
    s.positions.push_back(static_cast<std::size_t>(pos - 1));
    s.frames.push_back(scan.frames[static_cast<std::size_t>(pos - 1)]);
  }
  const std::size_t n = s.frames.size();
  s.pairwise_motion.assign(n, std::vector<Pose>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      s.pairwise_motion[i][j] = i == j ? Pose::identity() : relative(s.frames[j].pose, s.frames[i].pose);
    }
  }
  const Frame& cur = s.frames.back();
  s.targets = all_plane_targets(scan, cur.pose);
  for (const auto& [id, ann] : scan.annotations) {
    const bool unvisited = direction == Direction::Forward ? ann.t >= cur.t : ann.t < cur.t;
    s.targets.mask[static_cast<std::size_t>(index_of(id))] = unvisited;
  }
  return s;
}

}  // namespace probeguide
