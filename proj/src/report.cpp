#include "bam/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace bam {

using nlohmann::json;

std::string ResultsTable::to_text() const {
  std::size_t label_w = 6;
  for (const auto& [label, values] : rows) label_w = std::max(label_w, label.size());
  std::ostringstream out;
  out << title << "\n";
  out << std::left << std::setw(static_cast<int>(label_w) + 2) << "method";
  for (const auto& c : columns) out << std::right << std::setw(10) << c;
  out << "\n";
  for (const auto& [label, values] : rows) {
    out << std::left << std::setw(static_cast<int>(label_w) + 2) << label;
    for (double v : values)
      out << std::right << std::setw(10) << std::fixed << std::setprecision(2) << 100.0 * v;
    out << "\n";
  }
  return out.str();
}

std::string ResultsTable::to_json_text() const {
  json j;
  j["title"] = title;
  j["columns"] = columns;
  json rws = json::array();
  for (const auto& [label, values] : rows) rws.push_back({{"label", label}, {"values", values}});
  j["rows"] = rws;
  return j.dump(2);
}

ResultsTable ResultsTable::from_json_text(const std::string& text) {
  json j = json::parse(text);
  ResultsTable t;
  t.title = j.at("title").get<std::string>();
  t.columns = j.at("columns").get<std::vector<std::string>>();
  for (const auto& r : j.at("rows"))
    t.rows.emplace_back(r.at("label").get<std::string>(),
                        r.at("values").get<std::vector<double>>());
  return t;
}

void ResultsTable::save_json(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("report: cannot write " + path);
  out << to_json_text() << "\n";
}

ResultsTable ResultsTable::load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("report: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

void write_svg_plot(const std::string& path, const std::string& title,
                    const std::string& x_label, const std::string& y_label,
                    const std::vector<CurveSeries>& series) {
  const int width = 640, height = 420;
  const int ml = 70, mr = 30, mt = 50, mb = 55;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool first = true;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      if (first) {
        x0 = x1 = x;
        y0 = y1 = y;
        first = false;
      }
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (x1 - x0 < 1e-12) x1 = x0 + 1;
  if (y1 - y0 < 1e-12) y1 = y0 + 1;
  const double xpad = 0.05 * (x1 - x0), ypad = 0.08 * (y1 - y0);
  x0 -= xpad;
  x1 += xpad;
  y0 -= ypad;
  y1 += ypad;

  auto px = [&](double x) { return ml + (x - x0) / (x1 - x0) * (width - ml - mr); };
  auto py = [&](double y) { return height - mb - (y - y0) / (y1 - y0) * (height - mt - mb); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << width / 2 << "\" y=\"28\" text-anchor=\"middle\" font-size=\"16\">"
      << title << "</text>\n";
  // axes
  svg << "<line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\"" << width - mr
      << "\" y2=\"" << height - mb << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
      << height - mb << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4, yv = y0 + (y1 - y0) * i / 4;
    svg << "<text x=\"" << px(xv) << "\" y=\"" << height - mb + 18
        << "\" text-anchor=\"middle\" font-size=\"11\">" << std::setprecision(4) << xv
        << "</text>\n";
    svg << "<text x=\"" << ml - 8 << "\" y=\"" << py(yv) + 4
        << "\" text-anchor=\"end\" font-size=\"11\">" << std::setprecision(4) << yv
        << "</text>\n";
  }
  svg << "<text x=\"" << width / 2 << "\" y=\"" << height - 12
      << "\" text-anchor=\"middle\" font-size=\"13\">" << x_label << "</text>\n";
  svg << "<text x=\"18\" y=\"" << height / 2
      << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 "
      << height / 2 << ")\">" << y_label << "</text>\n";

  int si = 0;
  for (const auto& s : series) {
    const char* color = colors[si % 5];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : s.points) svg << px(x) << "," << py(y) << " ";
    svg << "\"/>\n";
    for (const auto& [x, y] : s.points)
      svg << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << color
          << "\"/>\n";
    svg << "<text x=\"" << width - mr - 8 << "\" y=\"" << mt + 16 * si + 4
        << "\" text-anchor=\"end\" font-size=\"12\" fill=\"" << color << "\">" << s.name
        << "</text>\n";
    ++si;
  }
  svg << "</svg>\n";

  std::ofstream out(path);
  if (!out) throw std::runtime_error("plot: cannot write " + path);
  out << svg.str();
}

}  // namespace bam
