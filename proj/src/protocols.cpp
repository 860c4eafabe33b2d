#include "probeguide/protocols.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "probeguide/checkpoint.hpp"
#include "probeguide/errors.hpp"

namespace probeguide {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<Movements> OraclePredictor::predict(const Scan& scan, const std::vector<std::size_t>& positions) {
  std::vector<Movements> out;
  for (std::size_t p : positions) {
    const PlaneTargets t = all_plane_targets(scan, scan.frames.at(p).pose);
    out.push_back(t.movement);
  }
  return out;
}

std::vector<Movements> OraclePredictor::predict(const Scan&, const std::vector<GuidanceSample>& samples) {
  std::vector<Movements> out;
  for (const auto& s : samples) out.push_back(s.targets.movement);
  return out;
}

std::vector<Movements> ZeroPredictor::predict(const Scan&, const std::vector<std::size_t>& positions) {
  return std::vector<Movements>(positions.size());
}

std::vector<Movements> ZeroPredictor::predict(const Scan&, const std::vector<GuidanceSample>& samples) {
  return std::vector<Movements>(samples.size());
}

ModelPredictor::ModelPredictor(GuidanceModel model, int batch) : model_(std::move(model)), batch_(batch) {
  if (batch_ <= 0) throw ConfigError("prediction batch must be positive");
}

namespace {

torch::Tensor frames_tensor(const Scan& scan, std::size_t begin, std::size_t end) {
  std::vector<const GrayImage*> images;
  for (std::size_t i = begin; i < end; ++i) images.push_back(&scan.frames[i].image);
  return images_to_tensor(images);
}

void append_movements(const torch::Tensor& pred, std::vector<Movements>& out) {
  for (int64_t i = 0; i < pred.size(0); ++i) out.push_back(denormalize_movements(pred[i]));
}

}  // namespace

std::vector<Movements> ModelPredictor::predict(const Scan& scan, const std::vector<std::size_t>& positions) {
  torch::NoGradGuard guard;
  model_->eval();
  std::vector<Movements> out;
  for (std::size_t b = 0; b < positions.size(); b += static_cast<std::size_t>(batch_)) {
    const std::size_t e = std::min(positions.size(), b + static_cast<std::size_t>(batch_));
    std::vector<const GrayImage*> images;
    for (std::size_t i = b; i < e; ++i) images.push_back(&scan.frames.at(positions[i]).image);
    append_movements(model_->forward_single(images_to_tensor(images)), out);
  }
  return out;
}

std::vector<Movements> ModelPredictor::predict(const Scan& scan, const std::vector<GuidanceSample>& samples) {
  torch::NoGradGuard guard;
  model_->eval();
  std::vector<torch::Tensor> chunks;
  const auto step = static_cast<std::size_t>(batch_);
  for (std::size_t b = 0; b < scan.frames.size(); b += step) {
    chunks.push_back(model_->frame_features(frames_tensor(scan, b, std::min(scan.frames.size(), b + step))));
  }
  const auto features = torch::cat(chunks, 0);
  std::vector<Movements> out;
  for (std::size_t b = 0; b < samples.size(); b += step) {
    const std::size_t e = std::min(samples.size(), b + step);
    std::vector<torch::Tensor> h;
    std::vector<torch::Tensor> motion;
    for (std::size_t i = b; i < e; ++i) {
      std::vector<int64_t> idx(samples[i].positions.begin(), samples[i].positions.end());
      h.push_back(features.index_select(0, torch::tensor(idx, torch::kLong)));
      motion.push_back(pairwise_motion_tensor(samples[i]));
    }
    append_movements(model_->forward_sequence(torch::stack(h, 0), torch::stack(motion, 0)), out);
  }
  return out;
}

double PlaneTable::avg_trans() const {
  double s = 0.0;
  for (double v : trans_mae) s += v;
  return s / kNumPlanes;
}

double PlaneTable::avg_rot() const {
  double s = 0.0;
  for (double v : rot_mae) s += v;
  return s / kNumPlanes;
}

double PlaneTable::average() const {
  double s = 0.0;
  for (std::size_t k = 0; k < kNumPlanes; ++k) s += trans_mae[k] + rot_mae[k];
  return s / (2 * kNumPlanes);
}

void MetricAccumulator::add(std::size_t plane, const PoseError& e) {
  trans_.at(plane) += e.trans_mae;
  rot_.at(plane) += e.rot_mae;
  ++count_.at(plane);
}

PlaneTable MetricAccumulator::table() const {
  PlaneTable t;
  for (std::size_t k = 0; k < kNumPlanes; ++k) {
    const double n = static_cast<double>(count_[k]);
    t.count[k] = count_[k];
    t.trans_mae[k] = count_[k] > 0 ? trans_[k] / n : std::numeric_limits<double>::quiet_NaN();
    t.rot_mae[k] = count_[k] > 0 ? rot_[k] / n : std::numeric_limits<double>::quiet_NaN();
  }
  return t;
}

namespace {

bool include_scan(const Scan& scan, MetricsReport& report) {
  if (scan.has_all_planes()) return true;
  std::fprintf(stderr, "warning: scan %s lacks some plane annotations; excluded from evaluation\n", scan.scan_id.c_str());
  report.excluded.push_back(scan.scan_id);
  return false;
}

void check_count(const std::vector<Movements>& preds, std::size_t expected) {
  if (preds.size() != expected) throw DataError("predictor returned the wrong number of predictions");
}

}  // namespace

MetricsReport eval_single_frame(SingleFramePredictor& model, const std::vector<Scan>& scans, double fps) {
  MetricsReport report;
  report.protocol = "single";
  MetricAccumulator acc;
  for (const auto& raw : scans) {
    if (!include_scan(raw, report)) continue;
    const Scan scan = decimate(raw, fps);
    std::vector<std::size_t> positions(scan.frames.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
    const auto preds = model.predict(scan, positions);
    check_count(preds, positions.size());
    for (std::size_t i = 0; i < positions.size(); ++i) {
      const Pose& current = scan.frames[i].pose;
      for (const auto& [id, ann] : scan.annotations) {
        const auto k = static_cast<std::size_t>(index_of(id));
        acc.add(k, pose_error(preds[i][k], guidance_target(ann.pose, current)));
      }
    }
  }
  report.planes = acc.table();
  return report;
}

MetricsReport eval_sequential(SequencePredictor& model, const std::vector<Scan>& scans, double fps, int history,
                              double alpha) {
  MetricsReport report;
  report.protocol = "sequential";
  MetricAccumulator all;
  MetricAccumulator fwd;
  MetricAccumulator rev;
  for (const auto& raw : scans) {
    if (!include_scan(raw, report)) continue;
    const Scan scan = decimate(raw, fps);
    for (const Direction dir : {Direction::Forward, Direction::Reverse}) {
      std::vector<GuidanceSample> samples;
      for (int t = 1; t <= static_cast<int>(scan.frames.size()); ++t) {
        samples.push_back(build_sequence_input(scan, t, history, alpha, dir));
      }
      const auto preds = model.predict(scan, samples);
      check_count(preds, samples.size());
      MetricAccumulator& side = dir == Direction::Forward ? fwd : rev;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        for (std::size_t k = 0; k < kNumPlanes; ++k) {
          if (!samples[i].targets.mask[k]) continue;
          const PoseError e = pose_error(preds[i][k], samples[i].targets.movement[k]);
          all.add(k, e);
          side.add(k, e);
        }
      }
    }
  }
  report.planes = all.table();
  report.forward = fwd.table();
  report.reverse = rev.table();
  return report;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string table_csv(const PlaneTable& t) {
  std::string out = std::string(kReportHeader) + "\n";
  for (std::size_t k = 0; k < kNumPlanes; ++k) {
    out += std::string(kPlaneNames[k]) + "," + fmt(t.trans_mae[k]) + "," + fmt(t.rot_mae[k]) + "\n";
  }
  out += "AVG," + fmt(t.avg_trans()) + "," + fmt(t.avg_rot()) + "\n";
  return out;
}

json table_json(const PlaneTable& t) {
  json planes = json::object();
  for (std::size_t k = 0; k < kNumPlanes; ++k) {
    planes[std::string(kPlaneNames[k])] = {{"trans_mae_mm", t.trans_mae[k]}, {"rot_mae_deg", t.rot_mae[k]}, {"count", t.count[k]}};
  }
  return {{"planes", planes}, {"avg_trans_mae_mm", t.avg_trans()}, {"avg_rot_mae_deg", t.avg_rot()}, {"average", t.average()}};
}

double parse_number(const std::string& s, const fs::path& path) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw MalformedReportError(path.string() + ": bad number '" + s + "'");
  }
}

}  // namespace

void write_report(const MetricsReport& report, const fs::path& path) { write_text_atomic(path, table_csv(report.planes)); }

json report_to_json(const MetricsReport& report) {
  json j = table_json(report.planes);
  j["protocol"] = report.protocol;
  j["excluded"] = report.excluded;
  j["config_hash"] = report.config_hash;
  if (report.forward) j["forward"] = table_json(*report.forward);
  if (report.reverse) j["reverse"] = table_json(*report.reverse);
  return j;
}

void write_report_json(const MetricsReport& report, const fs::path& path) {
  write_text_atomic(path, report_to_json(report).dump(2) + "\n");
}

PlaneTable read_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError(path.string());
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader) throw MalformedReportError(path.string() + ": bad header");
  PlaneTable t;
  std::size_t row = 0;
  bool saw_avg = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string name, trans, rot, extra;
    if (!std::getline(ss, name, ',') || !std::getline(ss, trans, ',') || !std::getline(ss, rot, ',') ||
        std::getline(ss, extra, ',')) {
      throw MalformedReportError(path.string() + ": expected 3 columns in '" + line + "'");
    }
    if (row < kNumPlanes) {
      if (name != kPlaneNames[row]) throw MalformedReportError(path.string() + ": unexpected plane '" + name + "'");
      t.trans_mae[row] = parse_number(trans, path);
      t.rot_mae[row] = parse_number(rot, path);
      ++row;
    } else if (row == kNumPlanes && name == "AVG" && !saw_avg) {
      const double at = parse_number(trans, path);
      const double ar = parse_number(rot, path);
      if (std::abs(at - t.avg_trans()) > 1e-9 || std::abs(ar - t.avg_rot()) > 1e-9) {
        throw MalformedReportError(path.string() + ": AVG row disagrees with the plane rows");
      }
      saw_avg = true;
    } else {
      throw MalformedReportError(path.string() + ": unexpected row '" + line + "'");
    }
  }
  if (row != kNumPlanes || !saw_avg) throw MalformedReportError(path.string() + ": missing plane or AVG rows");
  return t;
}

PlaneTable compare_reports(const PlaneTable& a, const PlaneTable& b) {
  PlaneTable d;
  for (std::size_t k = 0; k < kNumPlanes; ++k) {
    d.trans_mae[k] = b.trans_mae[k] - a.trans_mae[k];
    d.rot_mae[k] = b.rot_mae[k] - a.rot_mae[k];
    d.count[k] = b.count[k] - a.count[k];
  }
  return d;
}

void write_comparison(const std::vector<std::pair<std::string, PlaneTable>>& reports, const fs::path& path) {
  std::string out = "plane";
  for (const auto& [name, t] : reports) out += "," + name + "_trans_mae_mm," + name + "_rot_mae_deg";
  out += "\n";
  for (std::size_t k = 0; k <= kNumPlanes; ++k) {
    out += k < kNumPlanes ? std::string(kPlaneNames[k]) : "AVG";
    for (const auto& [name, t] : reports) {
      out += "," + fmt(k < kNumPlanes ? t.trans_mae[k] : t.avg_trans());
      out += "," + fmt(k < kNumPlanes ? t.rot_mae[k] : t.avg_rot());
    }
    out += "\n";
  }
  write_text_atomic(path, out);
}

}  // namespace probeguide
