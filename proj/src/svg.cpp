// SPDX-License-Identifier: Apache-2.0
#include "ecgpt/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "ecgpt/errors.hpp"

namespace ecgpt::svg {

namespace {

constexpr double kWidth = 640.0;
constexpr double kHeight = 440.0;
constexpr double kMarginLeft = 70.0;
constexpr double kMarginRight = 20.0;
constexpr double kMarginTop = 40.0;
constexpr double kMarginBottom = 55.0;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
constexpr int kPaletteSize = 8;

std::string num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string tick_text(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (const char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

struct Range {
  double lo = 0.0, hi = 1.0;
};

Range pad_range(double lo, double hi) {
  if (!(hi > lo)) {
    const double pad = std::max(1e-6, std::abs(lo) * 0.1 + 0.1);
    return {lo - pad, hi + pad};
  }
  const double pad = (hi - lo) * 0.05;
  return {lo - pad, hi + pad};
}

std::vector<double> linear_ticks(const Range& r, int n) {
  std::vector<double> ticks;
  for (int i = 0; i <= n; ++i) {
    ticks.push_back(r.lo + (r.hi - r.lo) * static_cast<double>(i) / n);
  }
  return ticks;
}

void open_svg(std::ostringstream& out, const std::string& title) {
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << static_cast<int>(kWidth)
      << "\" height=\"" << static_cast<int>(kHeight) << "\" viewBox=\"0 0 "
      << static_cast<int>(kWidth) << " " << static_cast<int>(kHeight) << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
  out << "<text x=\"" << num(kWidth / 2) << "\" y=\"22\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"15\">" << escape_xml(title) << "</text>\n";
}

void axes(std::ostringstream& out, const Range& xr, const Range& yr, const std::string& x_label,
          const std::string& y_label, bool numeric_x) {
  const double x0 = kMarginLeft;
  const double x1 = kWidth - kMarginRight;
  const double y0 = kHeight - kMarginBottom;
  const double y1 = kMarginTop;
  out << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x1) << "\" y2=\""
      << num(y0) << "\" stroke=\"#000000\"/>\n";
  out << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x0) << "\" y2=\""
      << num(y1) << "\" stroke=\"#000000\"/>\n";
  if (numeric_x) {
    for (const double t : linear_ticks(xr, 5)) {
      const double px = x0 + (t - xr.lo) / (xr.hi - xr.lo) * (x1 - x0);
      out << "<line x1=\"" << num(px) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(px)
          << "\" y2=\"" << num(y0 + 5) << "\" stroke=\"#000000\"/>\n";
      out << "<text x=\"" << num(px) << "\" y=\"" << num(y0 + 20)
          << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
          << tick_text(t) << "</text>\n";
    }
  }
  for (const double t : linear_ticks(yr, 5)) {
    const double py = y0 - (t - yr.lo) / (yr.hi - yr.lo) * (y0 - y1);
    out << "<line x1=\"" << num(x0 - 5) << "\" y1=\"" << num(py) << "\" x2=\"" << num(x0)
        << "\" y2=\"" << num(py) << "\" stroke=\"#000000\"/>\n";
    out << "<text x=\"" << num(x0 - 9) << "\" y=\"" << num(py + 4)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << tick_text(t)
        << "</text>\n";
  }
  out << "<text x=\"" << num((x0 + x1) / 2) << "\" y=\"" << num(kHeight - 12)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">"
      << escape_xml(x_label) << "</text>\n";
  out << "<text x=\"16\" y=\"" << num((y0 + y1) / 2)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
      << "transform=\"rotate(-90 16 " << num((y0 + y1) / 2) << ")\">" << escape_xml(y_label)
      << "</text>\n";
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write svg file: " + path);
  out << content;
  if (!out) throw DataError("failed writing svg file: " + path);
}

}  // namespace

void write_line_plot(const std::string& path, const std::string& title,
                     const std::string& x_label, const std::string& y_label,
                     const std::vector<Series>& series) {
  if (series.empty()) throw DataError("write_line_plot: no series");
  double xmin = std::numeric_limits<double>::infinity();
  double xmax = -xmin;
  double ymin = xmin;
  double ymax = -xmin;
  for (const auto& s : series) {
    if (s.x.empty() || s.x.size() != s.y.size()) {
      throw DataError("write_line_plot: series '" + s.label + "' is empty or ragged");
    }
    for (const double v : s.x) {
      xmin = std::min(xmin, v);
      xmax = std::max(xmax, v);
    }
    for (const double v : s.y) {
      ymin = std::min(ymin, v);
      ymax = std::max(ymax, v);
    }
  }
  const Range xr = pad_range(xmin, xmax);
  const Range yr = pad_range(ymin, ymax);

  const double x0 = kMarginLeft;
  const double x1 = kWidth - kMarginRight;
  const double y0 = kHeight - kMarginBottom;
  const double y1 = kMarginTop;
  auto px = [&](double v) { return x0 + (v - xr.lo) / (xr.hi - xr.lo) * (x1 - x0); };
  auto py = [&](double v) { return y0 - (v - yr.lo) / (yr.hi - yr.lo) * (y0 - y1); };

  std::ostringstream out;
  open_svg(out, title);
  axes(out, xr, yr, x_label, y_label, true);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = kPalette[i % kPaletteSize];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t j = 0; j < s.x.size(); ++j) {
      if (j) out << ' ';
      out << num(px(s.x[j])) << ',' << num(py(s.y[j]));
    }
    out << "\"/>\n";
    for (std::size_t j = 0; j < s.x.size(); ++j) {
      out << "<circle cx=\"" << num(px(s.x[j])) << "\" cy=\"" << num(py(s.y[j]))
          << "\" r=\"2.2\" fill=\"" << color << "\"/>\n";
    }
    const double ly = kMarginTop + 14.0 * static_cast<double>(i);
    out << "<line x1=\"" << num(x1 - 130) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(x1 - 110)
        << "\" y2=\"" << num(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << num(x1 - 105) << "\" y=\"" << num(ly + 4)
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << escape_xml(s.label) << "</text>\n";
  }
  out << "</svg>\n";
  write_file(path, out.str());
}

void write_bar_plot(const std::string& path, const std::string& title,
                    const std::string& y_label, const std::vector<Bar>& bars) {
  if (bars.empty()) throw DataError("write_bar_plot: no bars");
  double ymin = 0.0;
  double ymax = -std::numeric_limits<double>::infinity();
  for (const auto& b : bars) {
    ymax = std::max(ymax, b.has_ci ? std::max(b.value, b.ci_upper) : b.value);
    ymin = std::min(ymin, b.has_ci ? std::min(b.value, b.ci_lower) : b.value);
  }
  const Range yr = pad_range(std::min(0.0, ymin), ymax);

  const double x0 = kMarginLeft;
  const double x1 = kWidth - kMarginRight;
  const double y0 = kHeight - kMarginBottom;
  const double y1 = kMarginTop;
  auto py = [&](double v) { return y0 - (v - yr.lo) / (yr.hi - yr.lo) * (y0 - y1); };

  std::ostringstream out;
  open_svg(out, title);
  axes(out, Range{0, 1}, yr, "", y_label, false);
  const double slot = (x1 - x0) / static_cast<double>(bars.size());
  const double bar_w = slot * 0.6;
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const auto& b = bars[i];
    const double cx = x0 + slot * (static_cast<double>(i) + 0.5);
    const double top = py(b.value);
    const double base = py(std::max(0.0, yr.lo));
    const char* color = kPalette[i % kPaletteSize];
    out << "<rect x=\"" << num(cx - bar_w / 2) << "\" y=\"" << num(std::min(top, base))
        << "\" width=\"" << num(bar_w) << "\" height=\"" << num(std::abs(base - top))
        << "\" fill=\"" << color << "\"/>\n";
    if (b.has_ci) {
      out << "<line x1=\"" << num(cx) << "\" y1=\"" << num(py(b.ci_lower)) << "\" x2=\"" << num(cx)
          << "\" y2=\"" << num(py(b.ci_upper)) << "\" stroke=\"#000000\" stroke-width=\"1.5\"/>\n";
      for (const double v : {b.ci_lower, b.ci_upper}) {
        out << "<line x1=\"" << num(cx - 6) << "\" y1=\"" << num(py(v)) << "\" x2=\""
            << num(cx + 6) << "\" y2=\"" << num(py(v)) << "\" stroke=\"#000000\"/>\n";
      }
    }
    out << "<text x=\"" << num(cx) << "\" y=\"" << num(y0 + 20)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">"
        << escape_xml(b.label) << "</text>\n";
    out << "<text x=\"" << num(cx) << "\" y=\"" << num(top - 5)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">"
        << tick_text(b.value) << "</text>\n";
  }
  out << "</svg>\n";
  write_file(path, out.str());
}

}  // namespace ecgpt::svg
