// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

namespace ecgpt::svg {

struct Series {
  std::string label;
  std::vector<double> x, y;
};

struct Bar {
  std::string label;
  double value = 0.0;
  double ci_lower = 0.0;
  double ci_upper = 0.0;
  bool has_ci = false;
};

// Static line plot with fixed canvas, fixed number formatting and no
// timestamps; identical inputs give byte-identical files.
void write_line_plot(const std::string& path, const std::string& title,
                     const std::string& x_label, const std::string& y_label,
                     const std::vector<Series>& series);

// Bar chart with optional confidence-interval whiskers.
void write_bar_plot(const std::string& path, const std::string& title,
                    const std::string& y_label, const std::vector<Bar>& bars);

}  // namespace ecgpt::svg
