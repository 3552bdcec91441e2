#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "atomo/error.hpp"
#include "atomo/phantom.hpp"

using namespace atomo;
using namespace atomo::phantom;

TEST_CASE("smooth phantom: isolated terms") {
  // c0 = 0, c1 = 1, c2 = 0 leaves -q2 - q3; at (0,1) q2 = 0 and q3 = e^-1
  CHECK(eval_smooth(0.0, 1.0, {0.0, 1.0, 0.0}) == doctest::Approx(-std::exp(-1.0)).epsilon(1e-15));
  // q1 vanishes at s = 1/3 whatever c2 is
  const double s = 1.0 / 3.0;
  CHECK(eval_smooth(s, 0.4, {4.0, 1.0, 1.0}) == doctest::Approx(eval_smooth(s, 0.4, {4.0, 1.0, 7.0})).epsilon(1e-14));
}

TEST_CASE("smooth phantom: golden value at the centre") {
  // 30-digit re-evaluation of the printed formula
  CHECK(eval_smooth(0.5, 0.5, {4.0, 1.0, 1.0}) == doctest::Approx(3.97011900317978163).epsilon(1e-14));
  CHECK_THROWS_AS(eval_smooth(1.2, 0.5, {}), Error);
}

TEST_CASE("smooth phantom: analytic gradient matches central differences") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  const PhantomConstants c{4.0, 0.7, 1.3};
  const double h = 1e-5;
  for (int k = 0; k < 10; ++k) {
    const double s = u(rng), t = u(rng);
    const Point g = grad_smooth(s, t, c);
    const double ds = (eval_smooth(s + h, t, c) - eval_smooth(s - h, t, c)) / (2 * h);
    const double dt = (eval_smooth(s, t + h, c) - eval_smooth(s, t - h, c)) / (2 * h);
    const double scale = std::hypot(g.x, g.y);
    CHECK(std::abs(ds - g.x) <= 1e-6 * scale);
    CHECK(std::abs(dt - g.y) <= 1e-6 * scale);
  }
}

TEST_CASE("smooth phantom: repeated evaluation is bit identical") {
  const PhantomConstants c{4.0, 0.3, 1.0};
  CHECK(eval_smooth(0.123, 0.456, c) == eval_smooth(0.123, 0.456, c));
}

TEST_CASE("calibration hits the target range") {
  const auto c = calibrate_constants(3.43, 4.53);
  CHECK(c.c0 == 4.0);
  CHECK(c.c2 == 1.0);
  CHECK(c.c1 > 0);
  const auto r512 = sample_range(c, 512);
  CHECK(r512.min >= 3.43);
  CHECK(r512.max <= 4.53);
  CHECK(r512.boundary_deviation <= 1e-3);
  // the range is actually used (within a percent of the binding side)
  CHECK(std::max((4.0 - r512.min) / 0.57, (r512.max - 4.0) / 0.53) > 0.99);
  const auto r1024 = sample_range(c, 1024);
  CHECK(r1024.min >= 3.43);
  CHECK(r1024.max <= 4.53);
}

TEST_CASE("calibration degenerate and infeasible cases") {
  const auto r = sample_range({4.0, 0.0, 1.0}, 64);
  CHECK(r.min == 4.0);
  CHECK(r.max == 4.0);
  CHECK_THROWS_AS(calibrate_constants(4.2, 4.6), Error);
  try {
    calibrate_constants(4.2, 4.6);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kCalibration);
  }
  CHECK_THROWS_AS(calibrate_constants(0.5, 4.6), Error);
}

TEST_CASE("raster rescaling") {
  const auto g = build_uniform_grid(1.0, 4);
  io::Gray8 two{2, 2, {0, 255, 255, 0}};
  auto f = raster_to_field(two, 3.43, 4.53, g);
  CHECK(f.min() == 3.43);
  CHECK(f.max() == 4.53);
  // nearest neighbour: each pixel becomes a 2x2 block; top image row is the
  // top of the grid (i = n-1)
  CHECK(f.at(3, 0) == 3.43);
  CHECK(f.at(2, 1) == 3.43);
  CHECK(f.at(3, 2) == 4.53);
  CHECK(f.at(0, 0) == 4.53);
  CHECK(f.at(1, 3) == 3.43);

  io::Gray8 flat{3, 3, std::vector<std::uint8_t>(9, 77)};
  auto c = raster_to_field(flat, 3.43, 4.53, g);
  for (double v : c.values) CHECK(v == doctest::Approx(3.98));
  CHECK_THROWS_AS(load_raster("/nonexistent/raster.pgm", 3.43, 4.53, g), Error);
}

TEST_CASE("synthetic raster round trip through PGM") {
  const auto path = (std::filesystem::temp_directory_path() / "atomo_raster_test.pgm").string();
  write_synthetic_raster(path, 64, 64);
  auto f = load_raster(path, 3.43, 4.53, inscribed_grid(1.0, 32));
  CHECK(f.min() == 3.43);
  CHECK(f.max() == 4.53);
  f.check_admissible();
  std::filesystem::remove(path);
}

TEST_CASE("field container round trip") {
  const auto g = inscribed_grid(1.0, 9);
  auto f = gaussian_bump(g, 0.5, 0.1, -0.2, 0.2);
  const auto path = (std::filesystem::temp_directory_path() / "atomo_field_test.atf").string();
  write_field(path, f);
  auto r = read_field(path);
  CHECK(r.grid == f.grid);
  CHECK(r.values == f.values);
  std::filesystem::remove(path);
}
