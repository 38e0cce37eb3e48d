#pragma once

#include <string>
#include <vector>

namespace adl::detail {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  bool dashed = false;
};

// Minimal line chart: axes with min/max tick labels, one polyline per series
// and a legend. Non-finite points are dropped.
std::string line_chart_svg(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series);

}  // namespace adl::detail
