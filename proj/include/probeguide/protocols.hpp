#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "probeguide/guidance.hpp"
#include "probeguide/scan.hpp"
#include "probeguide/scan_store.hpp"

namespace probeguide {

/// Predicts movements to all ten planes from single frames of a (decimated) scan.
class SingleFramePredictor {
 public:
  virtual ~SingleFramePredictor() = default;
  virtual std::vector<Movements> predict(const Scan& scan, const std::vector<std::size_t>& positions) = 0;
};

/// Predicts movements from history samples of a (decimated) scan.
class SequencePredictor {
 public:
  virtual ~SequencePredictor() = default;
  virtual std::vector<Movements> predict(const Scan& scan, const std::vector<GuidanceSample>& samples) = 0;
};

/// Returns the ground-truth movements.
class OraclePredictor : public SingleFramePredictor, public SequencePredictor {
 public:
  std::vector<Movements> predict(const Scan& scan, const std::vector<std::size_t>& positions) override;
  std::vector<Movements> predict(const Scan& scan, const std::vector<GuidanceSample>& samples) override;
};

/// Always predicts the identity movement.
class ZeroPredictor : public SingleFramePredictor, public SequencePredictor {
 public:
  std::vector<Movements> predict(const Scan& scan, const std::vector<std::size_t>& positions) override;
  std::vector<Movements> predict(const Scan& scan, const std::vector<GuidanceSample>& samples) override;
};

/// Runs a guidance model in eval mode without gradients.
class ModelPredictor : public SingleFramePredictor, public SequencePredictor {
 public:
  explicit ModelPredictor(GuidanceModel model, int batch = 64);
  std::vector<Movements> predict(const Scan& scan, const std::vector<std::size_t>& positions) override;
  std::vector<Movements> predict(const Scan& scan, const std::vector<GuidanceSample>& samples) override;

 private:
  GuidanceModel model_;
  int batch_;
};

/// Per-plane mean absolute errors, pooled over all scored frames.
struct PlaneTable {
  std::array<double, kNumPlanes> trans_mae{};
  std::array<double, kNumPlanes> rot_mae{};
  std::array<std::int64_t, kNumPlanes> count{};

  double avg_trans() const;
  double avg_rot() const;
  /// Mean of the 20 per-plane entries.
  double average() const;
};

struct MetricsReport {
  std::string protocol;
  PlaneTable planes;
  std::optional<PlaneTable> forward;
  std::optional<PlaneTable> reverse;
  std::vector<std::string> excluded;
  std::string config_hash;
};

/// Running sums for one table; additions happen in a fixed order, so results are reproducible.
class MetricAccumulator {
 public:
  void add(std::size_t plane, const PoseError& e);
  PlaneTable table() const;

 private:
  std::array<double, kNumPlanes> trans_{};
  std::array<double, kNumPlanes> rot_{};
  std::array<std::int64_t, kNumPlanes> count_{};
};

/// Every frame of every test scan at `fps`, scored against all ten annotated planes.
/// Scans missing a plane annotation are excluded with a warning.
MetricsReport eval_single_frame(SingleFramePredictor& model, const std::vector<Scan>& scans, double fps = 6.0);

/// Every timestep of every test scan at `fps`, in both directions, scored on unvisited planes.
MetricsReport eval_sequential(SequencePredictor& model, const std::vector<Scan>& scans, double fps = 3.0,
                              int history = 8, double alpha = 0.4);

inline constexpr const char* kReportHeader = "plane,trans_mae_mm,rot_mae_deg";

/// CSV with one row per plane in canonical order plus an AVG row.
void write_report(const MetricsReport& report, const std::filesystem::path& path);
nlohmann::json report_to_json(const MetricsReport& report);
void write_report_json(const MetricsReport& report, const std::filesystem::path& path);

/// Parses a report CSV; throws MissingFileError or MalformedReportError.
PlaneTable read_report(const std::filesystem::path& path);

/// Signed deltas b - a.
PlaneTable compare_reports(const PlaneTable& a, const PlaneTable& b);

/// One row per plane plus AVG, with trans/rot columns for each named report.
void write_comparison(const std::vector<std::pair<std::string, PlaneTable>>& reports, const std::filesystem::path& path);

}  // namespace probeguide
