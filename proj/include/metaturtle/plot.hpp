#pragma once

// Learning-curve SVG charts from metrics.csv files.

#include <filesystem>
#include <istream>
#include <stdexcept>
#include <string>
#include <vector>

namespace metaturtle::plot {

// Malformed metrics CSV; what() reads "<source>:<line>: <message>".
class CsvError : public std::runtime_error {
 public:
  CsvError(const std::string& source, std::size_t line, const std::string& message)
      : std::runtime_error(source + ":" + std::to_string(line) + ": " + message), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct Series {
  std::string label;
  std::vector<Point> points;  // ascending x
};

// Validation rows of a `tasks_seen,split,mse` file, averaged per tasks_seen
// (a file holding several runs back to back yields the mean curve).
std::vector<Point> read_validation_curve(std::istream& in, const std::string& source);

// A metrics.csv file, or a directory whose run_*/metrics.csv files are
// averaged per tasks_seen.
Series load_series(const std::filesystem::path& input, const std::string& label);

// Standalone SVG: linear axes, one polyline per series (a lone point becomes
// a marker), legend from the labels. Throws std::invalid_argument when there
// is nothing to draw.
std::string render_svg(const std::vector<Series>& series, const std::string& title = {});

}  // namespace metaturtle::plot
