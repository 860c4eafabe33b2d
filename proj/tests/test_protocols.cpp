#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <gtest/gtest.h>

#include "probeguide/errors.hpp"
#include "probeguide/phantom.hpp"
#include "probeguide/protocols.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace probeguide;
using namespace fixtures;
using namespace oracle;
namespace fs = std::filesystem;

namespace {

void expect_matches_brute(const PlaneTable& t, const BruteTable& b) {
  for (std::size_t k = 0; k < kNumPlanes; ++k) {
    EXPECT_EQ(static_cast<double>(t.count[k]), b.count[k]);
    EXPECT_NEAR(t.trans_mae[k], b.trans[k] / b.count[k], 1e-9) << k;
    EXPECT_NEAR(t.rot_mae[k], b.rot[k] / b.count[k], 1e-9) << k;
  }
}

/// Oracle plus Gaussian noise on every component.
class NoisyOracle : public SingleFramePredictor {
 public:
  NoisyOracle(double sigma, std::uint64_t seed) : sigma_(sigma), rng_(seed) {}
  std::vector<Movements> predict(const Scan& scan, const std::vector<std::size_t>& positions) override {
    auto out = oracle_.predict(scan, positions);
    for (auto& m : out) {
      for (auto& p : m) {
        auto v = p.as_array();
        for (auto& x : v) x += rng_.normal(0.0, sigma_);
        p = Pose::from_array(v);
      }
    }
    return out;
  }

 private:
  double sigma_;
  Rng rng_;
  OraclePredictor oracle_;
};

/// Deterministic function of the history content only.
class HistoryDigest : public SequencePredictor {
 public:
  std::vector<Movements> predict(const Scan&, const std::vector<GuidanceSample>& samples) override {
    std::vector<Movements> out;
    for (const auto& s : samples) {
      Movements m{};
      const std::size_t n = s.size();
      for (std::size_t k = 0; k < kNumPlanes; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const Pose& r = s.pairwise_motion[i][n - 1];
          acc += (r.x + 0.5 * r.yaw) * static_cast<double>(k + 1) + s.frames[i].image.pixels[k] / 64.0;
        }
        m[k] = Pose{acc, -acc / 3.0, 2.0, acc / 10.0, 1.0, -5.0};
      }
      out.push_back(m);
    }
    return out;
  }
};

/// Frames mirrored in time at 3 fps with every plane annotated at the centre.
Scan palindrome_scan(int half, std::uint64_t seed) {
  Rng rng(seed);
  Scan base = walk_scan(half, rng, "pal");
  Scan scan;
  scan.scan_id = "palindrome";
  scan.fps = 3.0;
  for (int t = 1; t <= 2 * half; ++t) {
    Frame f = base.frames[static_cast<std::size_t>(t <= half ? t - 1 : 2 * half - t)];
    f.t = t;
    scan.frames.push_back(f);
  }
  for (const PlaneId id : kAllPlanes) scan.annotations[id] = Annotation{half, scan.frames[static_cast<std::size_t>(half - 1)].pose};
  return scan;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST(Protocols, OracleGivesZeroReport) {
  const auto scans = walk_scans(3, 1);
  OraclePredictor oracle;
  for (const MetricsReport& r : {eval_single_frame(oracle, scans), eval_sequential(oracle, scans)}) {
    for (std::size_t k = 0; k < kNumPlanes; ++k) {
      EXPECT_EQ(r.planes.trans_mae[k], 0.0);
      EXPECT_EQ(r.planes.rot_mae[k], 0.0);
      EXPECT_GT(r.planes.count[k], 0);
    }
    EXPECT_EQ(r.planes.average(), 0.0);
  }
}

TEST(Protocols, ZeroPredictorMatchesBruteForceSingleFrame) {
  const auto scans = walk_scans(4, 2);
  ZeroPredictor zero;
  expect_matches_brute(eval_single_frame(zero, scans, 6.0).planes, brute_zero_errors(scans, 5));
}

TEST(Protocols, ZeroPredictorSequentialCoversEveryFramePlanePairOnce) {
  const auto scans = walk_scans(3, 3);
  ZeroPredictor zero;
  const MetricsReport r = eval_sequential(zero, scans, 3.0);
  expect_matches_brute(r.planes, brute_zero_errors(scans, 10));
  for (std::size_t k = 0; k < kNumPlanes; ++k) EXPECT_EQ(r.forward->count[k] + r.reverse->count[k], r.planes.count[k]);
}

TEST(Protocols, FinalForwardTimestepScoresNothing) {
  Rng rng(5);
  Scan scan = walk_scan(60, rng, "f");
  for (auto& [id, ann] : scan.annotations) {
    ann.t = std::min(ann.t, 50);
    ann.pose = scan.frames[static_cast<std::size_t>(ann.t - 1)].pose;
  }
  EXPECT_EQ(build_sequence_input(scan, 60, 8, 0.4, Direction::Forward).targets.count(), 0);
}

TEST(Protocols, PalindromeDirectionsAgree) {
  const Scan scan = palindrome_scan(20, 7);
  HistoryDigest digest;
  const MetricsReport r = eval_sequential(digest, {scan}, 3.0);
  for (std::size_t k = 0; k < kNumPlanes; ++k) {
    EXPECT_EQ(r.forward->count[k], r.reverse->count[k]);
    EXPECT_GT(r.forward->count[k], 0);
    EXPECT_NEAR(r.forward->trans_mae[k], r.reverse->trans_mae[k], 1e-9);
    EXPECT_NEAR(r.forward->rot_mae[k], r.reverse->rot_mae[k], 1e-9);
  }
  EXPECT_GT(r.planes.average(), 0.0);
}

TEST(Protocols, PalindromeDirectionsAgreeForModel) {
  init_torch_runtime();
  torch::manual_seed(3);
  EncoderConfig e = small_encoder();
  e.image_size = 16;
  Scan scan = palindrome_scan(12, 8);
  Rng rng(9);
  for (auto& f : scan.frames) f.image = GrayImage(16, 16);
  for (int t = 0; t < 12; ++t) {
    GrayImage img(16, 16);
    for (auto& px : img.pixels) px = static_cast<std::uint8_t>(rng.uniform_int(256));
    scan.frames[static_cast<std::size_t>(t)].image = img;
    scan.frames[static_cast<std::size_t>(23 - t)].image = img;
  }
  FinetuneConfig fc;
  fc.attention_heads = 2;
  fc.head_hidden = 8;
  ModelPredictor model(GuidanceModel(e, fc, Aggregator::MotionAware), 64);
  const MetricsReport r = eval_sequential(model, {scan}, 3.0);
  for (std::size_t k = 0; k < kNumPlanes; ++k) {
    EXPECT_NEAR(r.forward->trans_mae[k], r.reverse->trans_mae[k], 1e-4 * (1.0 + r.forward->trans_mae[k]));
    EXPECT_NEAR(r.forward->rot_mae[k], r.reverse->rot_mae[k], 1e-4 * (1.0 + r.forward->rot_mae[k]));
  }
}

TEST(Protocols, NoiseIncreasesEveryPlaneError) {
  const auto scans = walk_scans(3, 11);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    NoisyOracle small(0.5, seed);
    NoisyOracle large(2.0, seed + 100);
    const PlaneTable a = eval_single_frame(small, scans).planes;
    const PlaneTable b = eval_single_frame(large, scans).planes;
    for (std::size_t k = 0; k < kNumPlanes; ++k) {
      EXPECT_GT(a.trans_mae[k], 0.0);
      EXPECT_GT(a.rot_mae[k], 0.0);
      EXPECT_GT(b.trans_mae[k], a.trans_mae[k]);
      EXPECT_GT(b.rot_mae[k], a.rot_mae[k]);
    }
  }
}

TEST(Protocols, ModelReportsAreBitIdenticalAcrossRuns) {
  init_torch_runtime();
  const auto scans = tiny_scans(2);
  FinetuneConfig fc;
  fc.attention_heads = 2;
  fc.head_hidden = 8;
  torch::manual_seed(1);
  GuidanceModel single(small_encoder(), fc, Aggregator::SingleFrame);
  GuidanceModel seq(small_encoder(), fc, Aggregator::MotionAware);
  TempDir dir;
  for (int run = 0; run < 2; ++run) {
    ModelPredictor a(single, 16);
    ModelPredictor b(seq, 16);
    write_report_json(eval_single_frame(a, scans), dir.path / ("single" + std::to_string(run) + ".json"));
    write_report_json(eval_sequential(b, scans), dir.path / ("seq" + std::to_string(run) + ".json"));
  }
  EXPECT_EQ(slurp(dir.path / "single0.json"), slurp(dir.path / "single1.json"));
  EXPECT_EQ(slurp(dir.path / "seq0.json"), slurp(dir.path / "seq1.json"));
}

TEST(Protocols, ModelPredictionsStayInRange) {
  init_torch_runtime();
  torch::manual_seed(2);
  const auto scans = tiny_scans(1);
  FinetuneConfig fc;
  fc.head_hidden = 8;
  GuidanceModel model(small_encoder(), fc, Aggregator::SingleFrame);
  {
    torch::NoGradGuard guard;
    for (auto& p : model->heads->parameters()) p.mul_(1000.0);
  }
  ModelPredictor predictor(model, 32);
  const Scan d = decimate(scans[0], 6.0);
  const auto preds = predictor.predict(d, std::vector<std::size_t>{0, 1, 2, 3});
  for (const auto& m : preds) {
    for (const auto& p : m) {
      for (double v : {p.x, p.y, p.z}) EXPECT_LE(std::abs(v), 100.0);
      for (double v : {p.yaw, p.pitch, p.roll}) EXPECT_LE(std::abs(v), 180.0);
    }
  }
}

TEST(Protocols, ExcludesScansMissingPlanes) {
  auto scans = walk_scans(2, 4);
  scans[1].annotations.erase(PlaneId::A4C);
  ZeroPredictor zero;
  const MetricsReport r = eval_single_frame(zero, scans);
  ASSERT_EQ(r.excluded.size(), 1u);
  EXPECT_EQ(r.excluded[0], scans[1].scan_id);
  expect_matches_brute(r.planes, brute_zero_errors({scans[0]}, 5));
}

TEST(Reports, RoundTripAndAverages) {
  const auto scans = walk_scans(2, 6);
  ZeroPredictor zero;
  const MetricsReport r = eval_single_frame(zero, scans);
  TempDir dir;
  write_report(r, dir.path / "r.csv");
  const PlaneTable back = read_report(dir.path / "r.csv");
  EXPECT_EQ(back.trans_mae, r.planes.trans_mae);
  EXPECT_EQ(back.rot_mae, r.planes.rot_mae);
  const PlaneTable d = compare_reports(back, back);
  for (std::size_t k = 0; k < kNumPlanes; ++k) {
    EXPECT_EQ(d.trans_mae[k], 0.0);
    EXPECT_EQ(d.rot_mae[k], 0.0);
  }
  // Hand-sum the CSV rows.
  const auto lines = read_lines(dir.path / "r.csv");
  ASSERT_EQ(lines.size(), 12u);
  EXPECT_EQ(lines[0], kReportHeader);
  double st = 0.0, sr = 0.0;
  for (std::size_t i = 1; i <= 10; ++i) {
    std::stringstream ss(lines[i]);
    std::string name, t, rr;
    std::getline(ss, name, ',');
    std::getline(ss, t, ',');
    std::getline(ss, rr, ',');
    EXPECT_EQ(name, kPlaneNames[i - 1]);
    st += std::stod(t);
    sr += std::stod(rr);
  }
  std::stringstream avg(lines[11]);
  std::string name, t, rr;
  std::getline(avg, name, ',');
  std::getline(avg, t, ',');
  std::getline(avg, rr, ',');
  EXPECT_EQ(name, "AVG");
  EXPECT_NEAR(std::stod(t), st / 10.0, 1e-9);
  EXPECT_NEAR(std::stod(rr), sr / 10.0, 1e-9);
  EXPECT_NEAR(r.planes.average(), (st + sr) / 20.0, 1e-9);

  NoisyOracle noisy(1.0, 1);
  const PlaneTable other = eval_single_frame(noisy, scans).planes;
  const PlaneTable delta = compare_reports(r.planes, other);
  EXPECT_NEAR(delta.trans_mae[3], other.trans_mae[3] - r.planes.trans_mae[3], 0.0);

  write_report_json(r, dir.path / "r.json");
  std::ifstream in(dir.path / "r.json");
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j.at("protocol"), "single");
  EXPECT_EQ(j.at("planes").size(), 10u);
}

TEST(Reports, MalformedFilesAreRejected) {
  TempDir dir;
  fs::create_directories(dir.path);
  EXPECT_THROW(read_report(dir.path / "missing.csv"), MissingFileError);
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream(dir.path / name) << text;
    return dir.path / name;
  };
  std::string good = std::string(kReportHeader) + "\n";
  for (std::size_t k = 0; k < kNumPlanes; ++k) good += std::string(kPlaneNames[k]) + ",1,2\n";
  EXPECT_NO_THROW(read_report(write("good.csv", good + "AVG,1,2\n")));
  EXPECT_THROW(read_report(write("noavg.csv", good)), MalformedReportError);
  EXPECT_THROW(read_report(write("badavg.csv", good + "AVG,1,3\n")), MalformedReportError);
  EXPECT_THROW(read_report(write("header.csv", "plane,a,b\n")), MalformedReportError);
  std::string swapped = std::string(kReportHeader) + "\n" + std::string(kPlaneNames[1]) + ",1,2\n" +
                        std::string(kPlaneNames[0]) + ",1,2\n";
  for (std::size_t k = 2; k < kNumPlanes; ++k) swapped += std::string(kPlaneNames[k]) + ",1,2\n";
  EXPECT_THROW(read_report(write("order.csv", swapped + "AVG,1,2\n")), MalformedReportError);
  EXPECT_THROW(read_report(write("nan.csv", std::string(kReportHeader) + "\n" + std::string(kPlaneNames[0]) + ",x,2\n")),
               MalformedReportError);
  EXPECT_THROW(read_report(write("cols.csv", std::string(kReportHeader) + "\n" + std::string(kPlaneNames[0]) + ",1,2,3\n")),
               MalformedReportError);
}

TEST(Reports, ComparisonTable) {
  PlaneTable a;
  PlaneTable b;
  for (std::size_t k = 0; k < kNumPlanes; ++k) {
    a.trans_mae[k] = static_cast<double>(k);
    b.trans_mae[k] = 2.0 * static_cast<double>(k);
  }
  TempDir dir;
  write_comparison({{"a", a}, {"b", b}}, dir.path / "cmp.csv");
  const auto lines = read_lines(dir.path / "cmp.csv");
  ASSERT_EQ(lines.size(), 12u);
  EXPECT_EQ(lines[0], "plane,a_trans_mae_mm,a_rot_mae_deg,b_trans_mae_mm,b_rot_mae_deg");
  EXPECT_EQ(lines[11], "AVG,4.5,0,9,0");
}
