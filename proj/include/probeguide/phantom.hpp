#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "probeguide/image.hpp"
#include "probeguide/pose.hpp"
#include "probeguide/scan.hpp"

namespace probeguide {

inline constexpr const char* kGeneratorVersion = "phantom-1.0";

/// Parameterized primitive painted into the phantom volume.
struct Structure {
  enum class Kind { Ellipsoid, Shell, Tube };

  Kind kind = Kind::Ellipsoid;
  std::string name;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d radii = Eigen::Vector3d::Ones();  // ellipsoid/shell semi-axes
  Eigen::Matrix3d orientation = Eigen::Matrix3d::Identity();  // world-from-local
  Eigen::Vector3d end = Eigen::Vector3d::Zero();  // tube: segment center -> end
  double radius = 1.0;                            // tube radius
  double thickness = 1.0;                         // shell wall thickness
  float intensity = 1.0f;

  static Structure ellipsoid(std::string name, Eigen::Vector3d center, Eigen::Vector3d radii, float intensity,
                             Eigen::Matrix3d orientation = Eigen::Matrix3d::Identity());
  static Structure sphere(std::string name, Eigen::Vector3d center, double radius, float intensity);
  static Structure shell(std::string name, Eigen::Vector3d center, Eigen::Vector3d radii, double thickness,
                         float intensity);
  static Structure tube(std::string name, Eigen::Vector3d start, Eigen::Vector3d end, double radius,
                        float intensity);

  bool contains(const Eigen::Vector3d& p) const;

  /// Axis-aligned bounds (lo, hi) in world coordinates.
  std::pair<Eigen::Vector3d, Eigen::Vector3d> bounds() const;

  /// Applies a rigid transform (world-from-local) to the structure.
  Structure transformed(const RigidMatrix& m) const;
};

struct PhantomConfig {
  int resolution = 128;     // voxels per side
  double extent_mm = 160.0; // cube side, centered at the origin
  float background = 0.3f;
  bool texture = true;      // smooth random tissue texture, procedural phantoms only
  /// Explicit structure list; when unset, the procedural heart is generated from the seed.
  std::optional<std::vector<Structure>> structures;
};

/// Regular-grid scalar volume with voxel centers at -extent/2 + (i + 0.5) * voxel.
class Phantom {
 public:
  const PhantomConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  int resolution() const { return config_.resolution; }
  double voxel_size() const { return config_.extent_mm / config_.resolution; }
  const std::vector<Structure>& structures() const { return structures_; }
  const std::vector<float>& volume() const { return volume_; }
  /// World-from-heart transform used to place the standard planes.
  const RigidMatrix& heart_frame() const { return heart_frame_; }

  float voxel(int i, int j, int k) const {
    const auto n = static_cast<std::size_t>(config_.resolution);
    return volume_[(static_cast<std::size_t>(k) * n + static_cast<std::size_t>(j)) * n + static_cast<std::size_t>(i)];
  }

  /// Trilinear sample; zero outside the cube.
  float sample(const Eigen::Vector3d& p) const;

  bool inside(const Eigen::Vector3d& p) const;

  double intensity_stddev() const;

 private:
  friend Phantom build_phantom(const PhantomConfig& config, std::uint64_t seed);

  PhantomConfig config_;
  std::uint64_t seed_ = 0;
  std::vector<Structure> structures_;
  std::vector<float> volume_;
  RigidMatrix heart_frame_;
};

/// Generates the phantom volume. Throws ConfigError for resolutions below 32,
/// procedural phantoms with fewer than 6 structures, or a degenerate
/// intensity histogram (std <= 0.05).
Phantom build_phantom(const PhantomConfig& config, std::uint64_t seed);

/// Procedural heart structures in the heart frame, jittered by seed.
std::vector<Structure> heart_structures(std::uint64_t seed);

struct ImageSpec {
  int height = 64;
  int width = 64;
  double extent_mm = 100.0;  // side of the imaged square
  double noise = 0.3;        // speckle strength in [0, 1]

  void validate() const;
};

struct Slice {
  Image image;
  bool lost_contact = false;  // plane center outside the volume; image is all zero
};

/// Samples the volume on the probe plane. The plane is centered at the probe
/// position; columns run along the probe x axis (lateral) and rows along the
/// probe z axis (axial). Speckle is multiplicative zero-mean Rayleigh noise
/// seeded by noise_seed.
Slice slice_image(const Phantom& phantom, const Pose& pose, const ImageSpec& spec, std::uint64_t noise_seed = 0);

/// Number of structures whose interior intersects the imaged plane.
int structures_in_plane(const Phantom& phantom, const Pose& pose, const ImageSpec& spec);

/// Minimum translation / rotation separation between distinct standard planes.
inline constexpr double kPlaneMinSeparationMm = 5.0;
inline constexpr double kPlaneMinSeparationDeg = 10.0;

/// The ten standard-plane poses for this phantom. Throws DataError if the
/// planes are not pairwise separated or a plane misses the anatomy.
std::map<PlaneId, Pose> standard_plane_poses(const Phantom& phantom, const ImageSpec& spec = {});

/// Rounds each pose component to 6 decimals, exactly as the scan CSV stores it.
Pose quantize_pose(const Pose& p);

struct TrajectoryConfig {
  int duration = 450;  // frames
  double fps = 30.0;
  std::vector<PlaneId> visit_order{kAllPlanes.begin(), kAllPlanes.end()};
  double jitter_trans_mm = 2.0;
  double jitter_rot_deg = 2.0;
  int smoothing_window = 15;
  std::uint64_t seed = 0;

  void validate() const;
};

inline constexpr double kMaxScanPitchDeg = 80.0;

/// Synthesizes an expert-like scan that passes exactly through every standard
/// plane in visit order. Throws ConfigError for durations shorter than ten
/// smoothing windows.
Scan generate_scan(const Phantom& phantom, const TrajectoryConfig& traj, const ImageSpec& spec,
                   const std::string& scan_id = "scan");

}  // namespace probeguide
