#include "probeguide/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "probeguide/checkpoint.hpp"
#include "probeguide/errors.hpp"
#include "probeguide/image.hpp"

namespace probeguide {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

}  // namespace

CsvTable read_numeric_csv(const fs::path& path, bool has_header, std::size_t skip_columns) {
  std::ifstream in(path);
  if (!in) throw MissingFileError(path.string());
  CsvTable t;
  std::string line;
  if (has_header) {
    if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
    t.header = split(line);
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    std::vector<double> row;
    for (std::size_t i = skip_columns; i < cells.size(); ++i) {
      if (cells[i].empty()) {
        row.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      try {
        row.push_back(std::stod(cells[i]));
      } catch (const std::exception&) {
        throw DataError(path.string() + ": non-numeric cell '" + cells[i] + "'");
      }
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

void plot_report(const fs::path& report_csv, const fs::path& out_svg) {
  std::ifstream in(report_csv);
  if (!in) throw MissingFileError(report_csv.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::string> names;
  std::vector<std::pair<double, double>> values;
  while (std::getline(in, line)) {
    const auto cells = split(line);
    if (cells.size() != 3) throw DataError(report_csv.string() + ": expected 3 columns");
    if (cells[0] == "AVG") continue;
    names.push_back(cells[0]);
    values.emplace_back(std::stod(cells[1]), std::stod(cells[2]));
  }
  double top = 1e-9;
  for (const auto& [a, b] : values) top = std::max({top, a, b});
  const double width = 80.0 * static_cast<double>(names.size()) + 80.0;
  const double height = 360.0;
  const double base = 300.0;
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width) + "\" height=\"" + num(height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<line x1=\"50\" y1=\"" + num(base) + "\" x2=\"" + num(width - 20) + "\" y2=\"" + num(base) + "\" stroke=\"black\"/>\n";
  svg += "<text x=\"50\" y=\"20\" font-size=\"12\">max " + num(top) + " (bars: mm, degrees)</text>\n";
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double x = 60.0 + 80.0 * static_cast<double>(i);
    const double ht = 260.0 * values[i].first / top;
    const double hr = 260.0 * values[i].second / top;
    svg += "<g class=\"plane\" id=\"" + names[i] + "\">\n";
    svg += "<rect x=\"" + num(x) + "\" y=\"" + num(base - ht) + "\" width=\"30\" height=\"" + num(ht) + "\" fill=\"" + kPalette[0] + "\"/>\n";
    svg += "<rect x=\"" + num(x + 32) + "\" y=\"" + num(base - hr) + "\" width=\"30\" height=\"" + num(hr) + "\" fill=\"" + kPalette[1] + "\"/>\n";
    svg += "<text x=\"" + num(x) + "\" y=\"" + num(base + 16) + "\" font-size=\"10\">" + names[i] + "</text>\n";
    svg += "</g>\n";
  }
  svg += "</svg>\n";
  write_text_atomic(out_svg, svg);
}

void plot_log(const fs::path& log_csv, const fs::path& out_svg) {
  const CsvTable t = read_numeric_csv(log_csv);
  if (t.rows.empty()) throw DataError(log_csv.string() + ": no rows");
  const double width = 720.0;
  const double height = 400.0;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0;
  for (const auto& r : t.rows) {
    if (!r.empty() && std::isfinite(r[0])) {
      x0 = std::min(x0, r[0]);
      x1 = std::max(x1, r[0]);
    }
  }
  if (!(x1 > x0)) x1 = x0 + 1.0;
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width) + "\" height=\"" + num(height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t c = 1; c < t.header.size(); ++c) {
    double y0 = std::numeric_limits<double>::infinity(), y1 = -y0;
    for (const auto& r : t.rows) {
      if (c < r.size() && std::isfinite(r[c])) {
        y0 = std::min(y0, r[c]);
        y1 = std::max(y1, r[c]);
      }
    }
    if (!std::isfinite(y0)) continue;
    if (!(y1 > y0)) y1 = y0 + 1.0;
    std::string points;
    for (const auto& r : t.rows) {
      if (c >= r.size() || !std::isfinite(r[c]) || !std::isfinite(r[0])) continue;
      const double px = 50.0 + (width - 70.0) * (r[0] - x0) / (x1 - x0);
      const double py = height - 40.0 - (height - 80.0) * (r[c] - y0) / (y1 - y0);
      points += num(px) + "," + num(py) + " ";
    }
    const char* color = kPalette[(c - 1) % 6];
    svg += "<polyline class=\"series\" fill=\"none\" stroke=\"" + std::string(color) + "\" points=\"" + points + "\"/>\n";
    svg += "<text x=\"60\" y=\"" + num(20.0 + 14.0 * static_cast<double>(c - 1)) + "\" font-size=\"11\" fill=\"" + color + "\">" +
           t.header[c] + " [" + num(y0) + ", " + num(y1) + "]</text>\n";
  }
  svg += "</svg>\n";
  write_text_atomic(out_svg, svg);
}

void plot_attention(const fs::path& attention_csv, const fs::path& out_png) {
  const CsvTable t = read_numeric_csv(attention_csv, false);
  const std::size_t n = t.rows.size();
  if (n == 0) throw DataError(attention_csv.string() + ": empty matrix");
  for (const auto& r : t.rows) {
    if (r.size() != n) throw DataError(attention_csv.string() + ": attention matrix is not square");
  }
  const int side = static_cast<int>(n) * kHeatmapCell;
  GrayImage img(side, side);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto level = static_cast<std::uint8_t>(std::lround(std::clamp(t.rows[i][j], 0.0, 1.0) * 255.0));
      for (int r = 0; r < kHeatmapCell; ++r) {
        for (int c = 0; c < kHeatmapCell; ++c) {
          img.at(static_cast<int>(i) * kHeatmapCell + r, static_cast<int>(j) * kHeatmapCell + c) = level;
        }
      }
    }
  }
  if (out_png.has_parent_path()) fs::create_directories(out_png.parent_path());
  write_png(out_png, img);
}

}  // namespace probeguide
