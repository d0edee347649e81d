#include "metaturtle/plot.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace metaturtle::plot {
namespace {

constexpr double kWidth = 760, kHeight = 460;
constexpr double kLeft = 80, kRight = 190, kTop = 40, kBottom = 60;

const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                               "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", std::abs(v) < 1e-12 ? 0.0 : v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

// "Nice" tick step covering [lo, hi] with about `count` intervals.
double tick_step(double lo, double hi, int count) {
  const double raw = (hi - lo) / count;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 2.5, 5.0, 10.0}) {
    if (m * mag >= raw) return m * mag;
  }
  return 10.0 * mag;
}

struct Range {
  double lo, hi;
};

Range padded(double lo, double hi) {
  if (hi - lo < 1e-12 * std::max(1.0, std::abs(hi))) {
    const double pad = std::max(std::abs(lo) * 0.1, 1.0);
    return {lo - pad, hi + pad};
  }
  return {lo, hi};
}

void accumulate(std::map<std::size_t, std::pair<double, std::size_t>>& acc,
                const std::vector<Point>& pts) {
  for (const auto& p : pts) {
    auto& [sum, n] = acc[static_cast<std::size_t>(p.x)];
    sum += p.y;
    ++n;
  }
}

std::vector<Point> means(const std::map<std::size_t, std::pair<double, std::size_t>>& acc) {
  std::vector<Point> out;
  for (const auto& [x, sn] : acc) out.push_back({static_cast<double>(x), sn.first / sn.second});
  return out;
}

std::vector<Point> read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return read_validation_curve(in, path.string());
}

}  // namespace

std::vector<Point> read_validation_curve(std::istream& in, const std::string& source) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw CsvError(source, 1, "empty file");
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "tasks_seen,split,mse") {
    throw CsvError(source, line_no, "expected header 'tasks_seen,split,mse'");
  }
  std::map<std::size_t, std::pair<double, std::size_t>> acc;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 3) {
      throw CsvError(source, line_no, "expected 3 fields, got " + std::to_string(f.size()));
    }
    std::size_t tasks = 0;
    const auto* end = f[0].data() + f[0].size();
    if (auto [p, ec] = std::from_chars(f[0].data(), end, tasks); ec != std::errc() || p != end) {
      throw CsvError(source, line_no, "tasks_seen '" + f[0] + "' is not a non-negative integer");
    }
    if (f[1] != "val" && f[1] != "test") {
      throw CsvError(source, line_no, "split '" + f[1] + "' is not val or test");
    }
    double mse = 0.0;
    const auto* mend = f[2].data() + f[2].size();
    if (auto [p, ec] = std::from_chars(f[2].data(), mend, mse);
        ec != std::errc() || p != mend || !std::isfinite(mse)) {
      throw CsvError(source, line_no, "mse '" + f[2] + "' is not a finite number");
    }
    if (f[1] == "val") {
      auto& [sum, n] = acc[tasks];
      sum += mse;
      ++n;
    }
  }
  return means(acc);
}

Series load_series(const std::filesystem::path& input, const std::string& label) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(input)) return {label, read_file(input)};
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(input)) {
    const auto csv = entry.path() / "metrics.csv";
    if (entry.is_directory() && entry.path().filename().string().rfind("run_", 0) == 0 &&
        fs::exists(csv)) {
      files.push_back(csv);
    }
  }
  if (fs::exists(input / "metrics.csv")) files.push_back(input / "metrics.csv");
  if (files.empty()) throw std::runtime_error("no metrics.csv under " + input.string());
  std::sort(files.begin(), files.end());
  std::map<std::size_t, std::pair<double, std::size_t>> acc;
  for (const auto& f : files) accumulate(acc, read_file(f));
  return {label, means(acc)};
}

std::string render_svg(const std::vector<Series>& series, const std::string& title) {
  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  for (const auto& s : series) {
    for (const auto& p : s.points) {
      xmin = std::min(xmin, p.x), xmax = std::max(xmax, p.x);
      ymin = std::min(ymin, p.y), ymax = std::max(ymax, p.y);
    }
  }
  if (!std::isfinite(xmin)) throw std::invalid_argument("nothing to plot: no validation points");

  const auto xr = padded(xmin, xmax);
  auto yr = padded(ymin, ymax);
  const double ystep = tick_step(yr.lo, yr.hi, 5);
  yr = {std::floor(yr.lo / ystep) * ystep, std::ceil(yr.hi / ystep) * ystep};
  const double xstep = tick_step(xr.lo, xr.hi, 6);

  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto sx = [&](double x) { return kLeft + (x - xr.lo) / (xr.hi - xr.lo) * pw; };
  auto sy = [&](double y) { return kTop + (yr.hi - y) / (yr.hi - yr.lo) * ph; };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty()) {
    o << "<text x=\"" << num(kLeft + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
      << escape(title) << "</text>\n";
  }

  o << "<g class=\"grid\" stroke=\"#e0e0e0\">\n";
  for (double y = yr.lo; y <= yr.hi + ystep * 1e-9; y += ystep) {
    o << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(sy(y)) << "\" x2=\"" << num(kLeft + pw)
      << "\" y2=\"" << num(sy(y)) << "\"/>\n";
  }
  o << "</g>\n<g class=\"axes\" stroke=\"black\">\n";
  o << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(kTop + ph) << "\" x2=\"" << num(kLeft + pw)
    << "\" y2=\"" << num(kTop + ph) << "\"/>\n";
  o << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(kTop) << "\" x2=\"" << num(kLeft)
    << "\" y2=\"" << num(kTop + ph) << "\"/>\n</g>\n";

  o << "<g class=\"ticks\">\n";
  for (double y = yr.lo; y <= yr.hi + ystep * 1e-9; y += ystep) {
    o << "<text x=\"" << num(kLeft - 6) << "\" y=\"" << num(sy(y) + 4) << "\" text-anchor=\"end\">"
      << tick_label(y) << "</text>\n";
  }
  for (double x = std::ceil(xr.lo / xstep) * xstep; x <= xr.hi + xstep * 1e-9; x += xstep) {
    o << "<line x1=\"" << num(sx(x)) << "\" y1=\"" << num(kTop + ph) << "\" x2=\"" << num(sx(x))
      << "\" y2=\"" << num(kTop + ph + 5) << "\" stroke=\"black\"/>\n";
    o << "<text x=\"" << num(sx(x)) << "\" y=\"" << num(kTop + ph + 20)
      << "\" text-anchor=\"middle\">" << tick_label(x) << "</text>\n";
  }
  o << "</g>\n";
  o << "<text x=\"" << num(kLeft + pw / 2) << "\" y=\"" << num(kHeight - 15)
    << "\" text-anchor=\"middle\">tasks seen</text>\n";
  o << "<text transform=\"translate(20 " << num(kTop + ph / 2)
    << ") rotate(-90)\" text-anchor=\"middle\">mean validation MSE</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = kColors[i % std::size(kColors)];
    if (s.points.size() == 1) {
      o << "<circle class=\"series\" data-label=\"" << escape(s.label) << "\" cx=\""
        << num(sx(s.points[0].x)) << "\" cy=\"" << num(sy(s.points[0].y)) << "\" r=\"4\" fill=\""
        << color << "\"/>\n";
    } else if (s.points.size() > 1) {
      o << "<polyline class=\"series\" data-label=\"" << escape(s.label) << "\" fill=\"none\" stroke=\""
        << color << "\" stroke-width=\"2\" points=\"";
      for (std::size_t k = 0; k < s.points.size(); ++k) {
        o << (k ? " " : "") << num(sx(s.points[k].x)) << ',' << num(sy(s.points[k].y));
      }
      o << "\"/>\n";
    }
  }

  o << "<g class=\"legend\">\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = kTop + 10 + 20.0 * static_cast<double>(i);
    const double x = kLeft + pw + 15;
    o << "<line x1=\"" << num(x) << "\" y1=\"" << num(y) << "\" x2=\"" << num(x + 24) << "\" y2=\""
      << num(y) << "\" stroke=\"" << kColors[i % std::size(kColors)] << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << num(x + 30) << "\" y=\"" << num(y + 4) << "\">" << escape(series[i].label)
      << "</text>\n";
  }
  o << "</g>\n</svg>\n";
  return o.str();
}

}  // namespace metaturtle::plot
