#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace probeguide {

/// Numeric CSV with a header row; empty cells read as NaN.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

/// Throws MissingFileError or DataError.
CsvTable read_numeric_csv(const std::filesystem::path& path, bool has_header = true, std::size_t skip_columns = 0);

/// Grouped bar chart of a report CSV: one group per plane, translation and rotation bars.
void plot_report(const std::filesystem::path& report_csv, const std::filesystem::path& out_svg);

/// Line chart of every numeric column of a training log against its first column.
void plot_log(const std::filesystem::path& log_csv, const std::filesystem::path& out_svg);

/// Grayscale heatmap of an attention CSV (rows = queries), 16 pixels per cell.
void plot_attention(const std::filesystem::path& attention_csv, const std::filesystem::path& out_png);

inline constexpr int kHeatmapCell = 16;

}  // namespace probeguide
