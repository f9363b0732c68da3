#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace evmap::eval {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  // Horizontal reference line, drawn when set.
  std::optional<double> reference_y;
};

// Static line chart with axes, ticks and a legend.
std::string render_svg(const PlotSpec& spec);
void write_svg(const PlotSpec& spec, const std::filesystem::path& path);

}  // namespace evmap::eval
