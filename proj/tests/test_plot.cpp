// metrics.csv parsing and SVG rendering.

#include <regex>
#include <sstream>

#include "doctest.h"
#include "metaturtle/plot.hpp"

using namespace metaturtle::plot;

namespace {

std::vector<Point> parse(const std::string& text) {
  std::istringstream in(text);
  return read_validation_curve(in, "m.csv");
}

std::size_t error_line(const std::string& text) {
  try {
    parse(text);
  } catch (const CsvError& e) {
    return e.line();
  }
  return 0;
}

std::vector<std::string> attribute_values(const std::string& svg, const std::string& attr) {
  std::vector<std::string> out;
  const std::regex re(attr + "=\"([^\"]*)\"");
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), re); it != std::sregex_iterator(); ++it) {
    out.push_back((*it)[1]);
  }
  return out;
}

const char* kCurve =
    "tasks_seen,split,mse\n"
    "0,val,4.5\n"
    "2500,val,2.0\n"
    "5000,val,1.25\n"
    "2500,test,1.9\n";

}  // namespace

TEST_CASE("validation rows become the curve; test rows are ignored") {
  const auto pts = parse(kCurve);
  REQUIRE(pts.size() == 3);
  CHECK(pts[0].x == 0);
  CHECK(pts[1].y == 2.0);
  CHECK(pts[2].x == 5000);
}

TEST_CASE("repeated tasks_seen rows are averaged") {
  const auto pts = parse("tasks_seen,split,mse\n0,val,1\n10,val,3\n0,val,2\n10,val,5\n");
  REQUIRE(pts.size() == 2);
  CHECK(pts[0].y == 1.5);
  CHECK(pts[1].y == 4.0);
}

TEST_CASE("malformed csv reports the line") {
  CHECK(error_line("") == 1);
  CHECK(error_line("x,y,z\n") == 1);
  CHECK(error_line("tasks_seen,split,mse\n0,val,1\n5,val\n") == 3);
  CHECK(error_line("tasks_seen,split,mse\n0,val,1\n\n-5,val,1\n") == 4);
  CHECK(error_line("tasks_seen,split,mse\n0,train,1\n") == 2);
  CHECK(error_line("tasks_seen,split,mse\n0,val,abc\n") == 2);
  CHECK(error_line("tasks_seen,split,mse\n0,val,nan\n") == 2);
  CHECK(error_line("tasks_seen,split,mse\n0,val,1,2\n") == 2);
  try {
    parse("tasks_seen,split,mse\n0,val,oops\n");
  } catch (const CsvError& e) {
    CHECK(std::string(e.what()).rfind("m.csv:2: ", 0) == 0);
  }
  CHECK(parse("tasks_seen,split,mse\r\n0,val,1\r\n").size() == 1);
}

TEST_CASE("empty curve set is an error") {
  CHECK_THROWS_AS(render_svg({}), std::invalid_argument);
  CHECK_THROWS_AS(render_svg({{"a", {}}}), std::invalid_argument);
  CHECK_THROWS_AS(render_svg({{"a", parse("tasks_seen,split,mse\n0,test,1\n")}}), std::invalid_argument);
}

TEST_CASE("single point is a marker, not a line") {
  const auto svg = render_svg({{"only", {{0, 1.0}}}});
  CHECK(svg.find("<circle class=\"series\"") != std::string::npos);
  CHECK(svg.find("<polyline") == std::string::npos);
}

TEST_CASE("identical inputs give coincident polylines") {
  const auto pts = parse(kCurve);
  const auto svg = render_svg({{"first", pts}, {"second", pts}}, "curves");
  const auto points = attribute_values(svg, "points");
  REQUIRE(points.size() == 2);
  CHECK(points[0] == points[1]);
  const auto labels = attribute_values(svg, "data-label");
  REQUIRE(labels.size() == 2);
  CHECK(labels[0] == "first");
  CHECK(labels[1] == "second");
  CHECK(svg.find(">curves</text>") != std::string::npos);
}

TEST_CASE("rendering is deterministic and escapes labels") {
  const auto pts = parse(kCurve);
  const auto a = render_svg({{"a<b & \"c\"", pts}});
  CHECK(a == render_svg({{"a<b & \"c\"", pts}}));
  CHECK(a.rfind("<svg xmlns=", 0) == 0);
  CHECK(a.find("a&lt;b &amp; &quot;c&quot;") != std::string::npos);
  CHECK(a.find("a<b") == std::string::npos);
}

TEST_CASE("lower mse plots higher on the page") {
  const auto svg = render_svg({{"s", {{0, 4.0}, {10, 1.0}}}});
  const auto points = attribute_values(svg, "points");
  REQUIRE(points.size() == 1);
  double x0, y0, x1, y1;
  REQUIRE(std::sscanf(points[0].c_str(), "%lf,%lf %lf,%lf", &x0, &y0, &x1, &y1) == 4);
  CHECK(x0 < x1);
  CHECK(y0 < y1);
}
