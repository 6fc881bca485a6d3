#pragma once

#include <string>
#include <utility>
#include <vector>

namespace bam {

/// Results grid: rows are method/config labels, columns are folds plus a
/// mean. Serializes to aligned text and to JSON that round-trips losslessly.
struct ResultsTable {
  std::string title;
  std::vector<std::string> columns;
  std::vector<std::pair<std::string, std::vector<double>>> rows;

  std::string to_text() const;
  std::string to_json_text() const;
  static ResultsTable from_json_text(const std::string& text);

  void save_json(const std::string& path) const;
  static ResultsTable load_json(const std::string& path);
};

/// One named curve for plot emission.
struct CurveSeries {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

/// Static SVG line/scatter plot.
void write_svg_plot(const std::string& path, const std::string& title,
                    const std::string& x_label, const std::string& y_label,
                    const std::vector<CurveSeries>& series);

}  // namespace bam
