#pragma once

// Minimal static SVG rendering of the report CSVs. CSV stays the contract;
// these images are a convenience for eyeballing runs.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lily/io.hpp"

namespace lily::plot {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw FormatError("csv: missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
  std::vector<double> numbers(const std::string& name) const {
    const std::size_t c = column(name);
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(c < r.size() && !r[c].empty() ? parse_real(r[c]) : std::nan(""));
    return out;
  }
};

inline Table read_table(std::istream& in) {
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
  };
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw FormatError("csv: empty file");
  t.header = split(line);
  while (std::getline(in, line))
    if (!line.empty()) t.rows.push_back(split(line));
  return t;
}

class Svg {
 public:
  Svg(int w, int h) : w_(w), h_(h) {}
  void line(double x1, double y1, double x2, double y2, const std::string& stroke, double width = 1.0) {
    body_ << "<line x1='" << x1 << "' y1='" << y1 << "' x2='" << x2 << "' y2='" << y2 << "' stroke='" << stroke
          << "' stroke-width='" << width << "'/>\n";
  }
  void rect(double x, double y, double w, double h, const std::string& fill) {
    body_ << "<rect x='" << x << "' y='" << y << "' width='" << w << "' height='" << h << "' fill='" << fill << "'/>\n";
  }
  void text(double x, double y, const std::string& s, int size = 11, const char* anchor = "middle") {
    body_ << "<text x='" << x << "' y='" << y << "' font-size='" << size << "' font-family='sans-serif' text-anchor='"
          << anchor << "'>" << s << "</text>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
    body_ << "<polyline fill='none' stroke='" << stroke << "' stroke-width='1.5' points='";
    for (auto [x, y] : pts) body_ << x << ',' << y << ' ';
    body_ << "'/>\n";
  }
  void save(const std::string& path) const {
    std::ofstream out(path);
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w_ << "' height='" << h_ << "'>\n"
        << "<rect width='100%' height='100%' fill='white'/>\n"
        << body_.str() << "</svg>\n";
  }

 private:
  int w_, h_;
  std::ostringstream body_;
};

inline std::string shade(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const int r = static_cast<int>(255 - 200 * t), g = static_cast<int>(255 - 120 * t), b = 255;
  std::ostringstream s;
  s << "rgb(" << r << ',' << g << ',' << b << ')';
  return s.str();
}

inline std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

/// y against x as a polyline with min/max labels.
inline void line_chart(const std::vector<double>& x, const std::vector<double>& y, const std::string& title,
                       const std::string& path) {
  Svg svg(640, 360);
  const double l = 60, r = 620, t = 30, b = 320;
  svg.text(320, 18, title, 13);
  svg.line(l, b, r, b, "black");
  svg.line(l, t, l, b, "black");
  if (!x.empty()) {
    auto [xmin, xmax] = std::minmax_element(x.begin(), x.end());
    auto [ymin, ymax] = std::minmax_element(y.begin(), y.end());
    const double xs = *xmax > *xmin ? *xmax - *xmin : 1.0, ys = *ymax > *ymin ? *ymax - *ymin : 1.0;
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < x.size(); ++i)
      pts.emplace_back(l + (x[i] - *xmin) / xs * (r - l), b - (y[i] - *ymin) / ys * (b - t));
    svg.polyline(pts, "steelblue");
    svg.text(l - 5, b, fmt(*ymin), 10, "end");
    svg.text(l - 5, t + 8, fmt(*ymax), 10, "end");
    svg.text(l, b + 15, fmt(*xmin), 10);
    svg.text(r, b + 15, fmt(*xmax), 10);
  }
  svg.save(path);
}

/// Grid of cells keyed by (row, col) with shading proportional to value.
inline void heat_grid(const std::vector<double>& rows, const std::vector<double>& cols, const std::vector<double>& vals,
                      const std::string& title, const std::string& row_label, const std::string& col_label,
                      const std::string& path) {
  std::map<double, std::size_t> ri, ci;
  for (double v : rows) ri.emplace(v, 0);
  for (double v : cols) ci.emplace(v, 0);
  std::size_t k = 0;
  for (auto& [v, i] : ri) i = k++;
  k = 0;
  for (auto& [v, i] : ci) i = k++;
  const double cell = 40, l = 80, t = 40;
  Svg svg(static_cast<int>(l + cell * static_cast<double>(ci.size()) + 40),
          static_cast<int>(t + cell * static_cast<double>(ri.size()) + 40));
  svg.text(l + cell * static_cast<double>(ci.size()) / 2, 18, title, 13);
  double vmax = 0.0;
  for (double v : vals) vmax = std::max(vmax, v);
  for (std::size_t n = 0; n < vals.size(); ++n) {
    const double x = l + cell * static_cast<double>(ci[cols[n]]), y = t + cell * static_cast<double>(ri[rows[n]]);
    svg.rect(x, y, cell - 2, cell - 2, shade(vmax > 0 ? vals[n] / vmax : 0.0));
    svg.text(x + cell / 2, y + cell / 2 + 4, fmt(vals[n]), 9);
  }
  for (auto [v, i] : ri) svg.text(l - 8, t + cell * static_cast<double>(i) + cell / 2 + 4, fmt(v), 10, "end");
  for (auto [v, i] : ci) svg.text(l + cell * static_cast<double>(i) + cell / 2, t - 4, fmt(v), 10);
  svg.text(20, t - 4, row_label, 10, "start");
  svg.text(l + cell * static_cast<double>(ci.size()) / 2, t + cell * static_cast<double>(ri.size()) + 20, col_label, 10);
  svg.save(path);
}

}  // namespace lily::plot
