#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

#include "fixtures.hpp"
#include "probeguide/checkpoint.hpp"
#include "probeguide/dataset.hpp"
#include "probeguide/errors.hpp"
#include "probeguide/image.hpp"
#include "probeguide/plot.hpp"
#include "probeguide/scan_store.hpp"

using namespace probeguide;
using namespace fixtures;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_data_config() {
  ExperimentConfig c = tiny_experiment();
  c.data.phantom.resolution = 48;
  c.data.trajectory.duration = 150;
  return c;
}

DatasetRequest small_request() {
  DatasetRequest r;
  r.train_scans = 2;
  r.test_scans = 1;
  r.seed = 7;
  r.quiet = true;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

const char* kReport =
    "plane,trans_mae_mm,rot_mae_deg\n"
    "PLAX,10,5\nPSAX-AV,20,4\nPSAX-PV,30,3\nPSAX-MV,40,2\nPSAX-PAP,50,1\n"
    "PSAX-APEX,5,10\nA4C,4,20\nA5C,3,30\nA3C,2,40\nA2C,1,50\n"
    "AVG,16.5,16.5\n";

}  // namespace

TEST(Dataset, GenerationIsDeterministic) {
  const auto config = small_data_config();
  TempDir a;
  TempDir b;
  generate_dataset(config, a.path, small_request());
  generate_dataset(config, b.path, small_request());
  EXPECT_EQ(slurp(a.path / "manifest.json"), slurp(b.path / "manifest.json"));
  EXPECT_EQ(slurp(a.path / "config.json"), slurp(b.path / "config.json"));
  for (const char* rel : {"train/train_0000/poses.csv", "train/train_0001/planes.json", "test/test_0000/frames/000042.png"}) {
    EXPECT_EQ(slurp(a.path / rel), slurp(b.path / rel)) << rel;
  }
  EXPECT_FALSE(is_incomplete(a.path));
}

TEST(Dataset, SeedRangesAreDisjoint) {
  TempDir d;
  const auto manifest = generate_dataset(small_data_config(), d.path, small_request());
  EXPECT_EQ(manifest.at("train").at(0).at("phantom_seed"), 7u);
  EXPECT_EQ(manifest.at("train").at(1).at("phantom_seed"), 8u);
  EXPECT_EQ(manifest.at("test").at(0).at("phantom_seed"), 7u + 1000000u);
  const auto train = load_split(d.path, "train");
  const auto test = load_split(d.path, "test");
  ASSERT_EQ(train.size(), 2u);
  ASSERT_EQ(test.size(), 1u);
  EXPECT_EQ(test[0].scan_id, "test_0000");
  EXPECT_NE(train[0].frames[0].image, train[1].frames[0].image);
}

TEST(Dataset, OverlappingSeedsRejected) {
  TempDir d;
  DatasetRequest r = small_request();
  r.test_seed_offset = 1;
  EXPECT_THROW(generate_dataset(small_data_config(), d.path, r), ConfigError);
}

TEST(Dataset, NonEmptyOutputNeedsForce) {
  TempDir d;
  write_file(d.path / "stale.txt", "x");
  EXPECT_THROW(generate_dataset(small_data_config(), d.path, small_request()), ConfigError);
  DatasetRequest r = small_request();
  r.force = true;
  generate_dataset(small_data_config(), d.path, r);
  EXPECT_FALSE(fs::exists(d.path / "stale.txt"));
  EXPECT_TRUE(fs::exists(d.path / "manifest.json"));
}

TEST(Dataset, HashCoversOnlyGenerationSettings) {
  const auto base = small_data_config();
  auto other = base;
  other.finetune.lr *= 2.0;
  other.pretrain.epochs += 1;
  EXPECT_EQ(data_config_hash(base), data_config_hash(other));
  other.data.image.noise = 0.1;
  EXPECT_NE(data_config_hash(base), data_config_hash(other));
  other = base;
  other.data.phantom.resolution = 64;
  EXPECT_NE(data_config_hash(base), data_config_hash(other));
}

TEST(Dataset, HashMismatchAndIncompleteRejected) {
  TempDir d;
  generate_dataset(small_data_config(), d.path, small_request());
  EXPECT_THROW(load_split(d.path, "train", std::string("0000000000000000")), ConfigError);
  EXPECT_NO_THROW(load_split(d.path, "train", data_config_hash(small_data_config())));
  EXPECT_THROW(load_split(d.path, "validation"), MalformedMetadataError);
  mark_incomplete(d.path);
  EXPECT_THROW(load_split(d.path, "train"), DataError);
}

TEST(Dataset, DefaultDataRootFollowsEnvironment) {
  ::setenv("ECHOWORLD_DATA", "/somewhere/else", 1);
  EXPECT_EQ(default_data_root(), fs::path("/somewhere/else"));
  ::unsetenv("ECHOWORLD_DATA");
  EXPECT_EQ(default_data_root(), fs::path("data"));
}

TEST(Plot, ReportChartIsDeterministicWithOneGroupPerPlane) {
  TempDir d;
  write_file(d.path / "report.csv", kReport);
  plot_report(d.path / "report.csv", d.path / "a.svg");
  plot_report(d.path / "report.csv", d.path / "b.svg");
  const std::string svg = slurp(d.path / "a.svg");
  EXPECT_EQ(svg, slurp(d.path / "b.svg"));
  std::vector<std::string> ids;
  const std::regex group("<g class=\"plane\" id=\"([^\"]+)\">");
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), group); it != std::sregex_iterator(); ++it) {
    ids.push_back((*it)[1]);
  }
  const std::vector<std::string> expected{"PLAX",      "PSAX-AV", "PSAX-PV", "PSAX-MV", "PSAX-PAP",
                                          "PSAX-APEX", "A4C",     "A5C",     "A3C",     "A2C"};
  EXPECT_EQ(ids, expected);
  // Tallest bar (50) spans the full 260-pixel plot height; PLAX translation (10) one fifth of it.
  EXPECT_NE(svg.find("height=\"260.00\""), std::string::npos);
  EXPECT_NE(svg.find("y=\"248.00\" width=\"30\" height=\"52.00\""), std::string::npos);
}

TEST(Plot, LogChartHasOneSeriesPerUsedColumn) {
  TempDir d;
  write_file(d.path / "log.csv", "iteration,loss,lr,val_loss\n0,1.0,0.1,\n1,0.8,0.2,0.9\n2,0.5,0.3,\n3,0.4,0.2,0.7\n");
  write_file(d.path / "empty_col.csv", "step,a,b\n0,1,\n1,2,\n");
  plot_log(d.path / "log.csv", d.path / "log.svg");
  plot_log(d.path / "empty_col.csv", d.path / "e.svg");
  auto count = [](const std::string& s) {
    std::size_t n = 0;
    for (std::size_t p = s.find("class=\"series\""); p != std::string::npos; p = s.find("class=\"series\"", p + 1)) ++n;
    return n;
  };
  EXPECT_EQ(count(slurp(d.path / "log.svg")), 3u);
  EXPECT_EQ(count(slurp(d.path / "e.svg")), 1u);
  plot_log(d.path / "log.csv", d.path / "log2.svg");
  EXPECT_EQ(slurp(d.path / "log.svg"), slurp(d.path / "log2.svg"));
}

TEST(Plot, AttentionHeatmapEncodesMatrix) {
  TempDir d;
  const std::vector<std::vector<double>> m{{1.0, 0.0, 0.0}, {0.25, 0.75, 0.0}, {0.2, 0.3, 0.5}};
  std::string csv;
  for (const auto& row : m) {
    for (std::size_t j = 0; j < row.size(); ++j) csv += (j ? "," : "") + std::to_string(row[j]);
    csv += "\n";
  }
  write_file(d.path / "att.csv", csv);
  plot_attention(d.path / "att.csv", d.path / "att.png");
  const GrayImage img = read_png(d.path / "att.png");
  ASSERT_EQ(img.height, 3 * kHeatmapCell);
  ASSERT_EQ(img.width, 3 * kHeatmapCell);
  for (int i = 0; i < 3; ++i) {
    double row_sum = 0.0;
    for (int j = 0; j < 3; ++j) {
      const int expected = static_cast<int>(std::lround(m[i][j] * 255.0));
      EXPECT_EQ(img.at(i * kHeatmapCell, j * kHeatmapCell), expected);
      EXPECT_EQ(img.at(i * kHeatmapCell + kHeatmapCell - 1, j * kHeatmapCell + 7), expected);
      row_sum += img.at(i * kHeatmapCell + 3, j * kHeatmapCell + 3) / 255.0;
    }
    EXPECT_NEAR(row_sum, 1.0, 3 * 0.5 / 255.0);
  }
}

TEST(Plot, MalformedInputsRejected) {
  TempDir d;
  write_file(d.path / "rect.csv", "0.5,0.5\n0.5,0.5\n1,0\n");
  EXPECT_THROW(plot_attention(d.path / "rect.csv", d.path / "x.png"), DataError);
  write_file(d.path / "words.csv", "a,b\n1,x\n");
  EXPECT_THROW(plot_log(d.path / "words.csv", d.path / "x.svg"), DataError);
  EXPECT_THROW(plot_report(d.path / "missing.csv", d.path / "x.svg"), MissingFileError);
}
