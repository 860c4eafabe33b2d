#include "probeguide/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numbers>

#include "probeguide/errors.hpp"
#include "probeguide/rng.hpp"

namespace probeguide {

Structure Structure::ellipsoid(std::string name, Eigen::Vector3d center, Eigen::Vector3d radii, float intensity,
                               Eigen::Matrix3d orientation) {
  Structure s;
  s.kind = Kind::Ellipsoid;
  s.name = std::move(name);
  s.center = center;
  s.radii = radii;
  s.orientation = orientation;
  s.intensity = intensity;
  return s;
}

Structure Structure::sphere(std::string name, Eigen::Vector3d center, double radius, float intensity) {
  return ellipsoid(std::move(name), center, Eigen::Vector3d::Constant(radius), intensity);
}

Structure Structure::shell(std::string name, Eigen::Vector3d center, Eigen::Vector3d radii, double thickness,
                           float intensity) {
  Structure s = ellipsoid(std::move(name), center, radii, intensity);
  s.kind = Kind::Shell;
  s.thickness = thickness;
  return s;
}

Structure Structure::tube(std::string name, Eigen::Vector3d start, Eigen::Vector3d end, double radius,
                          float intensity) {
  Structure s;
  s.kind = Kind::Tube;
  s.name = std::move(name);
  s.center = start;
  s.end = end;
  s.radius = radius;
  s.intensity = intensity;
  return s;
}

bool Structure::contains(const Eigen::Vector3d& p) const {
  switch (kind) {
    case Kind::Ellipsoid: {
      const Eigen::Vector3d local = orientation.transpose() * (p - center);
      return local.cwiseQuotient(radii).squaredNorm() <= 1.0;
    }
    case Kind::Shell: {
      const Eigen::Vector3d local = orientation.transpose() * (p - center);
      if (local.cwiseQuotient(radii).squaredNorm() > 1.0) return false;
      const Eigen::Vector3d inner = (radii.array() - thickness).max(1e-6).matrix();
      return local.cwiseQuotient(inner).squaredNorm() > 1.0;
    }
    case Kind::Tube: {
      const Eigen::Vector3d axis = end - center;
      const double len2 = axis.squaredNorm();
      const double s = len2 > 0.0 ? std::clamp((p - center).dot(axis) / len2, 0.0, 1.0) : 0.0;
      return (p - (center + s * axis)).squaredNorm() <= radius * radius;
    }
  }
  return false;
}

std::pair<Eigen::Vector3d, Eigen::Vector3d> Structure::bounds() const {
  if (kind == Kind::Tube) {
    const Eigen::Vector3d r = Eigen::Vector3d::Constant(radius);
    return {center.cwiseMin(end) - r, center.cwiseMax(end) + r};
  }
  // Half-extent of a rotated box around the ellipsoid.
  const Eigen::Vector3d half = orientation.cwiseAbs() * radii;
  return {center - half, center + half};
}

Structure Structure::transformed(const RigidMatrix& m) const {
  Structure s = *this;
  const Eigen::Matrix3d r = m.rotation();
  const Eigen::Vector3d t = m.translation();
  s.center = r * center + t;
  s.end = r * end + t;
  s.orientation = r * orientation;
  return s;
}

float Phantom::sample(const Eigen::Vector3d& p) const {
  const double half = 0.5 * config_.extent_mm;
  if (!inside(p)) return 0.0f;
  const int n = config_.resolution;
  const double h = voxel_size();
  const double u[3] = {(p.x() + half) / h - 0.5, (p.y() + half) / h - 0.5, (p.z() + half) / h - 0.5};
  int i0[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    const double c = std::clamp(u[a], 0.0, static_cast<double>(n - 1));
    i0[a] = std::min(static_cast<int>(std::floor(c)), n - 2);
    f[a] = c - i0[a];
  }
  const auto v = [&](int di, int dj, int dk) { return static_cast<double>(voxel(i0[0] + di, i0[1] + dj, i0[2] + dk)); };
  // Fixed evaluation order: x, then y, then z.
  const double c00 = v(0, 0, 0) * (1.0 - f[0]) + v(1, 0, 0) * f[0];
  const double c10 = v(0, 1, 0) * (1.0 - f[0]) + v(1, 1, 0) * f[0];
  const double c01 = v(0, 0, 1) * (1.0 - f[0]) + v(1, 0, 1) * f[0];
  const double c11 = v(0, 1, 1) * (1.0 - f[0]) + v(1, 1, 1) * f[0];
  const double c0 = c00 * (1.0 - f[1]) + c10 * f[1];
  const double c1 = c01 * (1.0 - f[1]) + c11 * f[1];
  return static_cast<float>(c0 * (1.0 - f[2]) + c1 * f[2]);
}

bool Phantom::inside(const Eigen::Vector3d& p) const {
  const double half = 0.5 * config_.extent_mm;
  return std::abs(p.x()) <= half && std::abs(p.y()) <= half && std::abs(p.z()) <= half;
}

double Phantom::intensity_stddev() const {
  double sum = 0.0;
  double sum2 = 0.0;
  for (float v : volume_) {
    sum += v;
    sum2 += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(volume_.size());
  const double mean = sum / n;
  return std::sqrt(std::max(0.0, sum2 / n - mean * mean));
}

std::vector<Structure> heart_structures(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 1));
  const auto jc = [&](double x, double y, double z) {
    return Eigen::Vector3d(x + rng.uniform(-2.0, 2.0), y + rng.uniform(-2.0, 2.0), z + rng.uniform(-2.0, 2.0));
  };
  const auto jr = [&](double a, double b, double c) {
    const double s = rng.uniform(0.92, 1.08);
    return Eigen::Vector3d(a * s, b * s, c * rng.uniform(0.94, 1.06));
  };
  const auto ji = [&](double v) { return static_cast<float>(std::clamp(v + rng.uniform(-0.04, 0.04), 0.0, 1.0)); };

  std::vector<Structure> s;
  s.push_back(Structure::shell("pericardium", jc(-2, 2, 2), jr(44, 38, 54), 3.0, ji(0.85)));
  s.push_back(Structure::ellipsoid("lv_myocardium", jc(8, 0, -6), jr(22, 22, 36), ji(0.68)));
  s.push_back(Structure::ellipsoid("rv_myocardium", jc(-18, 5, 0), jr(16, 20, 30), ji(0.6)));
  s.push_back(Structure::ellipsoid("lv_cavity", jc(8, 0, -4), jr(15, 15, 29), ji(0.06)));
  s.push_back(Structure::ellipsoid("rv_cavity", jc(-19, 6, 2), jr(10, 14, 23), ji(0.1)));
  s.push_back(Structure::ellipsoid("la_wall", jc(6, -6, 34), jr(17, 15, 14), ji(0.7)));
  s.push_back(Structure::ellipsoid("la_cavity", jc(6, -6, 35), jr(13, 11, 10), ji(0.08)));
  s.push_back(Structure::ellipsoid("ra_wall", jc(-18, -4, 32), jr(15, 14, 14), ji(0.62)));
  s.push_back(Structure::ellipsoid("ra_cavity", jc(-18, -4, 33), jr(11, 10, 10), ji(0.12)));
  s.push_back(Structure::tube("aorta_wall", jc(4, 6, 20), jc(10, 24, 66), 10.0, ji(0.75)));
  s.push_back(Structure::tube("aorta_lumen", jc(4, 6, 21), jc(10, 24, 68), 7.0, ji(0.05)));
  s.push_back(Structure::tube("pulmonary_wall", jc(-10, 14, 24), jc(-2, 38, 60), 9.0, ji(0.72)));
  s.push_back(Structure::tube("pulmonary_lumen", jc(-10, 14, 25), jc(-2, 38, 62), 6.0, ji(0.1)));
  s.push_back(Structure::tube("descending_aorta", jc(12, -40, 64), jc(12, -42, -60), 8.0, ji(0.15)));
  s.push_back(Structure::ellipsoid("mitral_valve", jc(7, -2, 24), jr(12, 12, 1.6), ji(0.95)));
  s.push_back(Structure::ellipsoid("aortic_valve", jc(5, 8, 26), jr(7, 7, 1.4), ji(0.95)));
  s.push_back(Structure::ellipsoid("tricuspid_valve", jc(-16, 0, 24), jr(10, 10, 1.6), ji(0.92)));
  s.push_back(Structure::ellipsoid("papillary_anterior", jc(15, 6, -12), jr(4, 4, 9), ji(0.78)));
  s.push_back(Structure::ellipsoid("papillary_posterior", jc(14, -7, -14), jr(4, 4, 9), ji(0.78)));
  s.push_back(Structure::ellipsoid("spine", jc(0, -62, 0), jr(12, 10, 90), ji(1.0)));
  return s;
}

namespace {

RigidMatrix heart_placement(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 2));
  const Eigen::Vector3d t(rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0));
  const double yaw = rng.uniform(-10.0, 10.0);
  const double pitch = rng.uniform(-6.0, 6.0);
  const double roll = rng.uniform(-6.0, 6.0);
  return RigidMatrix(rotation_from_euler(yaw, pitch, roll), t);
}

void paint_texture(std::vector<float>& vol, int n, double extent, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 3));
  const double h = extent / n;
  const double half = 0.5 * extent;
  constexpr int kBlobs = 40;
  for (int b = 0; b < kBlobs; ++b) {
    const Eigen::Vector3d c(rng.uniform(-half, half), rng.uniform(-half, half), rng.uniform(-half, half));
    const double sigma = rng.uniform(6.0, 20.0);
    const double amp = rng.uniform(-0.12, 0.12);
    const double reach = 3.0 * sigma;
    int lo[3];
    int hi[3];
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::max(0, static_cast<int>(std::floor((c[a] - reach + half) / h)));
      hi[a] = std::min(n - 1, static_cast<int>(std::ceil((c[a] + reach + half) / h)));
    }
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int k = lo[2]; k <= hi[2]; ++k) {
      const double dz = -half + (k + 0.5) * h - c.z();
      for (int j = lo[1]; j <= hi[1]; ++j) {
        const double dy = -half + (j + 0.5) * h - c.y();
        for (int i = lo[0]; i <= hi[0]; ++i) {
          const double dx = -half + (i + 0.5) * h - c.x();
          const double d2 = dx * dx + dy * dy + dz * dz;
          vol[(static_cast<std::size_t>(k) * n + j) * n + i] += static_cast<float>(amp * std::exp(-d2 * inv));
        }
      }
    }
  }
}

}  // namespace

Phantom build_phantom(const PhantomConfig& config, std::uint64_t seed) {
  if (config.resolution < 32) throw ConfigError("phantom resolution must be at least 32");
  if (!(config.extent_mm > 0.0)) throw ConfigError("phantom extent must be positive");

  Phantom ph;
  ph.config_ = config;
  ph.seed_ = seed;
  const bool procedural = !config.structures.has_value();
  if (procedural) {
    ph.heart_frame_ = heart_placement(seed);
    for (const auto& s : heart_structures(seed)) ph.structures_.push_back(s.transformed(ph.heart_frame_));
    if (ph.structures_.size() < 6) throw ConfigError("procedural phantom needs at least 6 structures");
  } else {
    ph.structures_ = *config.structures;
  }

  const int n = config.resolution;
  const double h = config.extent_mm / n;
  const double half = 0.5 * config.extent_mm;
  ph.volume_.assign(static_cast<std::size_t>(n) * n * n, config.background);
  if (procedural && config.texture) paint_texture(ph.volume_, n, config.extent_mm, seed);

  // Later structures overwrite earlier ones.
  for (const auto& s : ph.structures_) {
    const auto [blo, bhi] = s.bounds();
    int lo[3];
    int hi[3];
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::max(0, static_cast<int>(std::floor((blo[a] + half) / h - 0.5)));
      hi[a] = std::min(n - 1, static_cast<int>(std::ceil((bhi[a] + half) / h - 0.5)));
    }
    for (int k = lo[2]; k <= hi[2]; ++k) {
      for (int j = lo[1]; j <= hi[1]; ++j) {
        for (int i = lo[0]; i <= hi[0]; ++i) {
          const Eigen::Vector3d p(-half + (i + 0.5) * h, -half + (j + 0.5) * h, -half + (k + 0.5) * h);
          if (s.contains(p)) ph.volume_[(static_cast<std::size_t>(k) * n + j) * n + i] = s.intensity;
        }
      }
    }
  }
  for (float& v : ph.volume_) v = std::clamp(v, 0.0f, 1.0f);

  const double sd = ph.intensity_stddev();
  if (!(sd > 0.05)) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "degenerate phantom histogram (std %.4f <= 0.05)", sd);
    throw ConfigError(buf);
  }
  return ph;
}

void ImageSpec::validate() const {
  if (height <= 0 || width <= 0) throw ConfigError("image dimensions must be positive");
  if (!(extent_mm > 0.0)) throw ConfigError("image extent must be positive");
  if (!(noise >= 0.0 && noise <= 1.0)) throw ConfigError("speckle noise must lie in [0, 1]");
}

namespace {

struct PlaneFrame {
  Eigen::Vector3d origin;
  Eigen::Vector3d lateral;
  Eigen::Vector3d axial;
};

PlaneFrame plane_frame(const Pose& pose) {
  const Eigen::Matrix3d r = rotation_from_euler(pose.yaw, pose.pitch, pose.roll);
  return {Eigen::Vector3d(pose.x, pose.y, pose.z), r.col(0), r.col(2)};
}

Eigen::Vector3d pixel_point(const PlaneFrame& f, const ImageSpec& spec, double row, double col) {
  const double u = (col + 0.5 - 0.5 * spec.width) * (spec.extent_mm / spec.width);
  const double v = (row + 0.5 - 0.5 * spec.height) * (spec.extent_mm / spec.height);
  return f.origin + u * f.lateral + v * f.axial;
}

}  // namespace

Slice slice_image(const Phantom& phantom, const Pose& pose, const ImageSpec& spec, std::uint64_t noise_seed) {
  spec.validate();
  Slice out;
  out.image = Image(spec.height, spec.width);
  const PlaneFrame f = plane_frame(pose);
  if (!phantom.inside(f.origin)) {
    out.lost_contact = true;
    return out;
  }
  for (int r = 0; r < spec.height; ++r) {
    for (int c = 0; c < spec.width; ++c) out.image.at(r, c) = phantom.sample(pixel_point(f, spec, r, c));
  }
  if (spec.noise > 0.0) {
    Rng rng(noise_seed);
    const double mean = std::sqrt(std::numbers::pi / 2.0);
    for (float& px : out.image.pixels) {
      const double g = rng.rayleigh() - mean;
      px = static_cast<float>(std::clamp(px * (1.0 + spec.noise * g), 0.0, 1.0));
    }
  }
  return out;
}

int structures_in_plane(const Phantom& phantom, const Pose& pose, const ImageSpec& spec) {
  const PlaneFrame f = plane_frame(pose);
  constexpr int kGrid = 48;
  int count = 0;
  for (const auto& s : phantom.structures()) {
    bool hit = false;
    for (int r = 0; r < kGrid && !hit; ++r) {
      for (int c = 0; c < kGrid && !hit; ++c) {
        const double row = (r + 0.5) * spec.height / kGrid - 0.5;
        const double col = (c + 0.5) * spec.width / kGrid - 0.5;
        const Eigen::Vector3d p = pixel_point(f, spec, row, col);
        hit = phantom.inside(p) && s.contains(p);
      }
    }
    count += hit ? 1 : 0;
  }
  return count;
}

Pose quantize_pose(const Pose& p) {
  const auto q = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::strtod(buf, nullptr);
  };
  return {q(p.x), q(p.y), q(p.z), q(p.yaw), q(p.pitch), q(p.roll)};
}

std::map<PlaneId, Pose> standard_plane_poses(const Phantom& phantom, const ImageSpec& spec) {
  // Plane placements in the heart frame: long axis along +z (apex at -z).
  // Short-axis views face +z (roll 90); apical views look up the long axis.
  static const std::map<PlaneId, Pose> kLocal = {
      {PlaneId::PLAX, {4.0, 2.0, 8.0, 96.0, 0.0, 180.0}},
      {PlaneId::PSAX_AV, {3.0, 6.0, 28.0, 0.0, 0.0, 90.0}},
      {PlaneId::PSAX_PV, {-8.0, 12.0, 34.0, 22.0, 0.0, 78.0}},
      {PlaneId::PSAX_MV, {6.0, 0.0, 16.0, 0.0, 0.0, 90.0}},
      {PlaneId::PSAX_PAP, {7.0, 0.0, -6.0, -8.0, 0.0, 92.0}},
      {PlaneId::PSAX_APEX, {8.0, 0.0, -28.0, -14.0, 0.0, 96.0}},
      {PlaneId::A4C, {-2.0, 0.0, -2.0, 0.0, 0.0, 0.0}},
      {PlaneId::A5C, {-1.0, 6.0, -2.0, 0.0, 0.0, -16.0}},
      {PlaneId::A3C, {4.0, 2.0, -2.0, 112.0, 0.0, 0.0}},
      {PlaneId::A2C, {6.0, 0.0, -2.0, 58.0, 0.0, 0.0}},
  };
  std::map<PlaneId, Pose> planes;
  for (const auto& [id, local] : kLocal) {
    planes[id] = quantize_pose((phantom.heart_frame() * RigidMatrix::from_pose(local)).to_pose());
  }
  for (auto a = planes.begin(); a != planes.end(); ++a) {
    for (auto b = std::next(a); b != planes.end(); ++b) {
      const Pose& pa = a->second;
      const Pose& pb = b->second;
      const double dist = std::hypot(pa.x - pb.x, pa.y - pb.y, pa.z - pb.z);
      if (dist < kPlaneMinSeparationMm && rotation_angle_deg(relative(pb, pa)) < kPlaneMinSeparationDeg) {
        throw DataError("standard planes " + std::string(plane_name(a->first)) + " and " +
                        std::string(plane_name(b->first)) + " are not separated");
      }
    }
    if (structures_in_plane(phantom, a->second, spec) < 2) {
      throw DataError("standard plane " + std::string(plane_name(a->first)) + " intersects fewer than 2 structures");
    }
  }
  return planes;
}

}  // namespace probeguide
