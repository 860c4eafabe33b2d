#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "probeguide/image.hpp"
#include "probeguide/pose.hpp"

namespace probeguide {

inline constexpr int kNumPlanes = 10;

/// The ten standard cardiac views, in canonical acquisition order.
enum class PlaneId : int {
  PLAX = 0,
  PSAX_AV,
  PSAX_PV,
  PSAX_MV,
  PSAX_PAP,
  PSAX_APEX,
  A4C,
  A5C,
  A3C,
  A2C,
};

inline constexpr std::array<std::string_view, kNumPlanes> kPlaneNames = {
    "PLAX", "PSAX-AV", "PSAX-PV", "PSAX-MV", "PSAX-PAP", "PSAX-APEX", "A4C", "A5C", "A3C", "A2C"};

inline constexpr std::array<PlaneId, kNumPlanes> kAllPlanes = {
    PlaneId::PLAX,  PlaneId::PSAX_AV, PlaneId::PSAX_PV, PlaneId::PSAX_MV, PlaneId::PSAX_PAP,
    PlaneId::PSAX_APEX, PlaneId::A4C, PlaneId::A5C,     PlaneId::A3C,     PlaneId::A2C};

inline constexpr int index_of(PlaneId id) { return static_cast<int>(id); }
inline std::string_view plane_name(PlaneId id) { return kPlaneNames[static_cast<std::size_t>(index_of(id))]; }
std::optional<PlaneId> plane_from_name(std::string_view name);

/// One synchronized observation of a scan.
struct Frame {
  int t = 0;  // timestep, strictly increasing within a scan
  GrayImage image;
  Pose pose;
};

/// A standard-plane acquisition: the plane was reached at timestep t with this pose.
struct Annotation {
  int t = 0;
  Pose pose;
};

/// Ordered visual-motion stream plus standard-plane annotations.
struct Scan {
  std::string scan_id;
  double fps = 30.0;
  std::uint64_t seed = 0;
  std::string generator_version;
  std::vector<Frame> frames;
  std::map<PlaneId, Annotation> annotations;

  /// Position of the frame with timestep t, if present.
  std::optional<std::size_t> position_of(int t) const;

  bool has_all_planes() const { return annotations.size() == kNumPlanes; }

  /// Throws DataError if timesteps are not strictly increasing or an annotation dangles.
  void validate() const;
};

/// Ground-truth movements for the ten planes plus the subset that is scored.
struct PlaneTargets {
  std::array<Pose, kNumPlanes> movement{};
  std::array<bool, kNumPlanes> mask{};

  int count() const {
    int n = 0;
    for (bool m : mask) n += m ? 1 : 0;
    return n;
  }
};

using Movements = std::array<Pose, kNumPlanes>;

}  // namespace probeguide
