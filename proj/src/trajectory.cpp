#include <algorithm>
#include <array>
#include <cmath>
#include <set>

#include "probeguide/errors.hpp"
#include "probeguide/phantom.hpp"
#include "probeguide/rng.hpp"

namespace probeguide {

void TrajectoryConfig::validate() const {
  if (smoothing_window < 1) throw ConfigError("smoothing window must be at least one frame");
  if (!(fps > 0.0)) throw ConfigError("fps must be positive");
  if (jitter_trans_mm < 0.0 || jitter_rot_deg < 0.0) throw ConfigError("jitter scales must be non-negative");
  std::set<PlaneId> seen(visit_order.begin(), visit_order.end());
  if (visit_order.size() != kNumPlanes || seen.size() != kNumPlanes) {
    throw ConfigError("visit order must be a permutation of the ten plane ids");
  }
  if (duration < 10 * smoothing_window) {
    throw ConfigError("trajectory duration shorter than ten smoothing windows cannot visit all planes");
  }
}

namespace {

// Frames a segment needs at a nominal cruise speed of 2.5 mm or 2.5 deg per frame.
double segment_cost(const Pose& a, const Pose& b, int window) {
  const double dist = std::hypot(a.x - b.x, a.y - b.y, a.z - b.z);
  const double angle = rotation_angle_deg(relative(b, a));
  return std::max({dist / 2.5, angle / 2.5, static_cast<double>(window)});
}

Pose random_offset(Rng& rng, double trans_mm, double rot_deg) {
  return {rng.normal(0.0, trans_mm), rng.normal(0.0, trans_mm), rng.normal(0.0, trans_mm),
          rng.normal(0.0, rot_deg),  rng.normal(0.0, rot_deg),  rng.normal(0.0, rot_deg)};
}

std::vector<double> moving_average(const std::vector<double>& x, int window) {
  const int n = static_cast<int>(x.size());
  const int lo = -(window / 2);
  std::vector<double> out(x.size(), 0.0);
  for (int t = 0; t < n; ++t) {
    double s = 0.0;
    for (int k = 0; k < window; ++k) s += x[static_cast<std::size_t>(std::clamp(t + lo + k, 0, n - 1))];
    out[static_cast<std::size_t>(t)] = s / window;
  }
  return out;
}

// Standard deviation of white noise after two passes of a box filter.
double double_box_gain(int window) {
  std::vector<double> w(static_cast<std::size_t>(2 * window - 1), 0.0);
  for (int a = 0; a < window; ++a) {
    for (int b = 0; b < window; ++b) w[static_cast<std::size_t>(a + b)] += 1.0 / (window * window);
  }
  double s = 0.0;
  for (double v : w) s += v * v;
  return std::sqrt(s);
}

}  // namespace

Scan generate_scan(const Phantom& phantom, const TrajectoryConfig& traj, const ImageSpec& spec,
                   const std::string& scan_id) {
  traj.validate();
  spec.validate();
  const auto planes = standard_plane_poses(phantom, spec);
  Rng rng(mix_seed(traj.seed, 11));
  const int w = traj.smoothing_window;

  // Waypoints: approach pose, the planes in visit order, departure pose.
  std::vector<Pose> waypoints;
  const Pose& first = planes.at(traj.visit_order.front());
  const Pose& last = planes.at(traj.visit_order.back());
  waypoints.push_back(compose(first, random_offset(rng, 8.0, 8.0)));
  for (PlaneId id : traj.visit_order) waypoints.push_back(planes.at(id));
  waypoints.push_back(compose(last, random_offset(rng, 8.0, 8.0)));

  const std::size_t segments = waypoints.size() - 1;
  std::vector<double> cost(segments);
  double total_cost = 0.0;
  for (std::size_t k = 0; k < segments; ++k) {
    cost[k] = segment_cost(waypoints[k], waypoints[k + 1], w) * rng.uniform(0.8, 1.25);
    total_cost += cost[k];
  }
  // Waypoint k sits at frame index knot[k]; frames are indexed 0..duration-1.
  std::vector<int> knot(waypoints.size(), 0);
  double acc = 0.0;
  for (std::size_t k = 0; k < segments; ++k) {
    acc += cost[k];
    knot[k + 1] = static_cast<int>(std::lround(acc / total_cost * (traj.duration - 1)));
  }
  for (std::size_t k = 1; k < knot.size(); ++k) knot[k] = std::max(knot[k], knot[k - 1] + 1);
  if (knot.back() > traj.duration - 1) throw ConfigError("trajectory duration too short for the plane path");

  const int n = traj.duration;
  std::vector<Pose> base(static_cast<std::size_t>(n));
  for (std::size_t k = 0; k < segments; ++k) {
    for (int t = knot[k]; t <= knot[k + 1]; ++t) {
      const double s = static_cast<double>(t - knot[k]) / (knot[k + 1] - knot[k]);
      base[static_cast<std::size_t>(t)] = interpolate(waypoints[k], waypoints[k + 1], s);
    }
  }

  // Smoothed jitter in the probe frame, tapered to zero at every plane visit.
  const double gain = double_box_gain(w);
  std::array<std::vector<double>, 6> jitter;
  for (int c = 0; c < 6; ++c) {
    std::vector<double> white(static_cast<std::size_t>(n));
    for (double& v : white) v = rng.normal();
    jitter[static_cast<std::size_t>(c)] = moving_average(moving_average(white, w), w);
    const double scale = (c < 3 ? traj.jitter_trans_mm : traj.jitter_rot_deg) / gain;
    for (double& v : jitter[static_cast<std::size_t>(c)]) v *= scale;
  }

  Scan scan;
  scan.scan_id = scan_id;
  scan.fps = traj.fps;
  scan.seed = traj.seed;
  scan.generator_version = kGeneratorVersion;
  scan.frames.reserve(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t) {
    int dist = n;
    for (std::size_t k = 1; k + 1 < knot.size(); ++k) dist = std::min(dist, std::abs(t - knot[k]));
    const double x = std::min(1.0, static_cast<double>(dist) / w);
    const double taper = x * x * (3.0 - 2.0 * x);
    Pose pose = base[static_cast<std::size_t>(t)];
    if (dist > 0) {
      Pose j;
      j.x = taper * jitter[0][static_cast<std::size_t>(t)];
      j.y = taper * jitter[1][static_cast<std::size_t>(t)];
      j.z = taper * jitter[2][static_cast<std::size_t>(t)];
      j.yaw = taper * jitter[3][static_cast<std::size_t>(t)];
      j.pitch = taper * jitter[4][static_cast<std::size_t>(t)];
      j.roll = taper * jitter[5][static_cast<std::size_t>(t)];
      pose = quantize_pose(compose(pose, j));
    }
    if (std::abs(pose.pitch) > kMaxScanPitchDeg) {
      throw DataError("generated trajectory exceeds the pitch limit in scan " + scan_id);
    }
    Frame f;
    f.t = t + 1;
    f.pose = pose;
    f.image = quantize(slice_image(phantom, pose, spec, mix_seed(traj.seed, 1000 + static_cast<std::uint64_t>(t))).image);
    scan.frames.push_back(std::move(f));
  }
  for (std::size_t k = 0; k < traj.visit_order.size(); ++k) {
    const Frame& f = scan.frames[static_cast<std::size_t>(knot[k + 1])];
    scan.annotations[traj.visit_order[k]] = Annotation{f.t, f.pose};
  }
  return scan;
}

}  // namespace probeguide
