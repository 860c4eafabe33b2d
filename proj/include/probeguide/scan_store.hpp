#pragma once

#include <filesystem>
#include <vector>

#include "probeguide/rng.hpp"
#include "probeguide/scan.hpp"

namespace probeguide {

// On-disk layout of one scan directory:
//   frames/%06d.png  8-bit grayscale, one per timestep
//   poses.csv        t,x_mm,y_mm,z_mm,yaw_deg,pitch_deg,roll_deg (6-decimal fixed point)
//   planes.json      {"PLAX": {"t": 12}, ...}
//   meta.json        {"scan_id", "fps", "seed", "generator_version"}
inline constexpr const char* kPoseCsvHeader = "t,x_mm,y_mm,z_mm,yaw_deg,pitch_deg,roll_deg";

void save_scan(const Scan& scan, const std::filesystem::path& dir);

/// Throws MissingFileError, MalformedPoseTableError, DanglingAnnotationError
/// or MalformedMetadataError.
Scan load_scan(const std::filesystem::path& dir);

/// Keeps every round(fps / target_fps)-th frame starting at the first and
/// moves each annotation to the nearest kept frame at or before it.
Scan decimate(const Scan& scan, double target_fps);

struct PairSample {
  std::size_t a = 0;  // frame positions
  std::size_t b = 0;
  const GrayImage* image_a = nullptr;
  const GrayImage* image_b = nullptr;
  Pose pose_a;
  Pose pose_b;
  Pose a_to_b;  // p_b * p_a^{-1}
};

/// Two distinct frames drawn uniformly from the scan, in random order.
PairSample sample_pair(const Scan& scan, Rng& rng);

/// Decayed-density history: t_i = round(t + t / (alpha * N) * ln(i / N)),
/// rounded half away from zero and clamped to [1, t]. Returns N 1-based
/// positions in non-decreasing order with t_N = t.
std::vector<int> decayed_history_sample(int t, int count, double alpha);

enum class Direction { Forward, Reverse };

/// History frames, their pairwise motion and the per-plane targets at one timestep.
struct GuidanceSample {
  Direction direction = Direction::Forward;
  std::vector<std::size_t> positions;  // 0-based frame positions in the scan, current frame last
  std::vector<Frame> frames;
  /// pairwise_motion[i][j] = p_{t_i -> t_j} = p_{t_j} * p_{t_i}^{-1}
  std::vector<std::vector<Pose>> pairwise_motion;
  PlaneTargets targets;

  std::size_t size() const { return frames.size(); }
  const Frame& current() const { return frames.back(); }
};

/// Builds the sequential-protocol input at 1-based frame position t.
/// Forward: history runs up to t and targets are planes with s_k >= t_cur.
/// Reverse: the scan is traversed backwards from the last frame, history runs
/// from the end down to t and targets are planes with s_k < t_cur.
GuidanceSample build_sequence_input(const Scan& scan, int t, int count, double alpha, Direction direction);

/// Targets toward every annotated plane from the given pose; mask marks annotated planes.
PlaneTargets all_plane_targets(const Scan& scan, const Pose& current);

}  // namespace probeguide
