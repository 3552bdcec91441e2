#include "atomo/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "atomo/error.hpp"
#include "atomo/io.hpp"

namespace atomo {

CoefficientField::CoefficientField(const UniformGrid& g, std::vector<double> v) : grid(g), values(std::move(v)) {
  require(values.size() == grid.size(), "coefficient field: value count does not match grid");
}

double CoefficientField::min() const { return *std::min_element(values.begin(), values.end()); }
double CoefficientField::max() const { return *std::max_element(values.begin(), values.end()); }

void CoefficientField::check_admissible() const {
  for (std::size_t k = 0; k < values.size(); ++k)
    if (!std::isfinite(values[k]) || values[k] < 1.0)
      fail(ErrorKind::kInvalidArgument, "coefficient q must be finite and >= 1 (node " + std::to_string(k) +
                                            " has " + std::to_string(values[k]) + ")");
}

namespace phantom {

namespace {

void check_unit(double s, double t) {
  if (!(s >= 0 && s <= 1 && t >= 0 && t <= 1))
    fail(ErrorKind::kInvalidArgument, "eval_smooth: (s,t) must lie in [0,1]^2");
}

double bracket(double s, double t, double c2) {
  const double q1 = c2 * (1 - 3 * s) * (1 - 3 * s) * std::exp(-9 * s * s - (3 * t - 2) * (3 * t - 2));
  const double q2 = (0.6 * s - 27 * s * s * s - std::pow(3 * (t - 1), 5)) *
                    std::exp(-(9 * s * s + 9 * (t - 1) * (t - 1)));
  const double q3 = std::exp(-(3 * s + 1) * (3 * s + 1) - 9 * (t - 1) * (t - 1));
  return q1 - q2 - q3;
}

double smoothstep(double x) {
  if (x <= 0) return 0;
  if (x >= 1) return 1;
  const double a = std::exp(-1 / x), b = std::exp(-1 / (1 - x));
  return a / (a + b);
}

}  // namespace

double eval_smooth(double s, double t, const PhantomConstants& c) {
  check_unit(s, t);
  return c.c0 + c.c1 * bracket(s, t, c.c2);
}

Point grad_smooth(double s, double t, const PhantomConstants& c) {
  check_unit(s, t);
  const double a = 1 - 3 * s;
  const double e1 = std::exp(-9 * s * s - (3 * t - 2) * (3 * t - 2));
  const double d1s = c.c2 * (-6 * a * e1 - 18 * s * a * a * e1);
  const double d1t = c.c2 * a * a * e1 * (-6 * (3 * t - 2));
  const double u = 3 * (t - 1);
  const double p = 0.6 * s - 27 * s * s * s - std::pow(u, 5);
  const double e2 = std::exp(-(9 * s * s + 9 * (t - 1) * (t - 1)));
  const double d2s = (0.6 - 81 * s * s) * e2 - 18 * s * p * e2;
  const double d2t = -15 * std::pow(u, 4) * e2 - 18 * (t - 1) * p * e2;
  const double e3 = std::exp(-(3 * s + 1) * (3 * s + 1) - 9 * (t - 1) * (t - 1));
  const double d3s = -6 * (3 * s + 1) * e3;
  const double d3t = -18 * (t - 1) * e3;
  return {c.c1 * (d1s - d2s - d3s), c.c1 * (d1t - d2t - d3t)};
}

double edge_mollifier(double s, double width) {
  return smoothstep(s / width) * smoothstep((1 - s) / width);
}

double eval_smooth_mollified(double s, double t, const PhantomConstants& c, double width) {
  check_unit(s, t);
  return c.c0 + c.c1 * edge_mollifier(s, width) * edge_mollifier(t, width) * bracket(s, t, c.c2);
}

RangeReport sample_range(const PhantomConstants& c, int n, double width) {
  RangeReport r{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(), 0.0};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double s = double(j) / (n - 1), t = double(i) / (n - 1);
      const double q = eval_smooth_mollified(s, t, c, width);
      r.min = std::min(r.min, q);
      r.max = std::max(r.max, q);
      if (i == 0 || j == 0 || i == n - 1 || j == n - 1)
        r.boundary_deviation = std::max(r.boundary_deviation, std::abs(q - c.c0));
    }
  return r;
}

PhantomConstants calibrate_constants(double lo, double hi, double width) {
  require(lo >= 1 && lo < hi, "calibrate_constants: need 1 <= target_lo < target_hi");
  PhantomConstants c{4.0, 0.0, 1.0};
  if (!(lo < c.c0 && c.c0 < hi)) {
    std::ostringstream ss;
    ss << "background c0 = " << c.c0 << " lies outside the target range [" << lo << ", " << hi << "]";
    fail(ErrorKind::kCalibration, ss.str());
  }
  // range is linear in c1: sample the unit-c1 perturbation once, then bisect
  const int n = 512;
  double bmin = 0, bmax = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double s = double(j) / (n - 1), t = double(i) / (n - 1);
      const double b = edge_mollifier(s, width) * edge_mollifier(t, width) * bracket(s, t, c.c2);
      bmin = std::min(bmin, b);
      bmax = std::max(bmax, b);
    }
  if (bmax - bmin <= 0) fail(ErrorKind::kCalibration, "phantom perturbation vanishes identically");
  auto inside = [&](double c1) { return c.c0 + c1 * bmin >= lo && c.c0 + c1 * bmax <= hi; };
  double a = 0, b = 1;
  while (inside(b)) b *= 2;
  for (int it = 0; it < 200 && b - a > 1e-15 * b; ++it) {
    const double m = 0.5 * (a + b);
    (inside(m) ? a : b) = m;
  }
  c.c1 = a * (1 - 1e-3);
  const auto rep = sample_range(c, n, width);
  if (rep.min < lo || rep.max > hi || rep.boundary_deviation > 1e-3) {
    std::ostringstream ss;
    ss << "calibrated field range [" << rep.min << ", " << rep.max << "], boundary deviation "
       << rep.boundary_deviation;
    fail(ErrorKind::kCalibration, ss.str());
  }
  return c;
}

CoefficientField smooth_field(const UniformGrid& grid, const PhantomConstants& c, double width) {
  CoefficientField f(grid, 0.0);
  const int n = grid.n;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      f.values[grid.index(i, j)] = eval_smooth_mollified(double(j) / (n - 1), double(i) / (n - 1), c, width);
  return f;
}

CoefficientField raster_to_field(const io::Gray8& img, double lo, double hi, const UniformGrid& grid) {
  require(lo < hi, "load_raster: need lo < hi");
  const auto [pmin, pmax] = std::minmax_element(img.pixels.begin(), img.pixels.end());
  const double a = *pmin, b = *pmax;
  CoefficientField f(grid, 0.0);
  const int n = grid.n;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double s = double(j) / (n - 1), t = double(i) / (n - 1);
      const int col = std::min(img.width - 1, static_cast<int>(s * img.width));
      const int row = img.height - 1 - std::min(img.height - 1, static_cast<int>(t * img.height));
      const double p = img.pixels[static_cast<std::size_t>(row) * img.width + col];
      f.values[grid.index(i, j)] = (b == a) ? 0.5 * (lo + hi) : (p == b ? hi : lo + (hi - lo) * (p - a) / (b - a));
    }
  return f;
}

CoefficientField load_raster(const std::string& path, double lo, double hi, const UniformGrid& grid) {
  return raster_to_field(io::read_pgm(path), lo, hi, grid);
}

std::vector<unsigned char> synthetic_raster_pixels(int w, int h) {
  require(w >= 8 && h >= 8, "synthetic raster too small");
  struct Ellipse {
    double cx, cy, ax, ay, rot;
    unsigned char level;
  };
  // normalised image coordinates, y downwards
  const Ellipse shapes[] = {
      {0.40, 0.45, 0.22, 0.15, 0.5, 0},    // fatty region, low q
      {0.62, 0.38, 0.09, 0.07, -0.3, 255}, // lesion, high q
      {0.35, 0.70, 0.06, 0.10, 0.0, 255},
  };
  std::vector<unsigned char> px(static_cast<std::size_t>(w) * h, 132);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double x = (c + 0.5) / w, y = (r + 0.5) / h;
      for (const auto& e : shapes) {
        const double dx = x - e.cx, dy = y - e.cy;
        const double u = std::cos(e.rot) * dx + std::sin(e.rot) * dy;
        const double v = -std::sin(e.rot) * dx + std::cos(e.rot) * dy;
        if ((u * u) / (e.ax * e.ax) + (v * v) / (e.ay * e.ay) <= 1) px[static_cast<std::size_t>(r) * w + c] = e.level;
      }
    }
  return px;
}

void write_synthetic_raster(const std::string& path, int w, int h) {
  io::Gray8 img{w, h, synthetic_raster_pixels(w, h)};
  io::write_pgm(path, img);
}

CoefficientField gaussian_bump(const UniformGrid& grid, double amplitude, double cx, double cy, double sigma) {
  CoefficientField f(grid, 0.0);
  for (int i = 0; i < grid.n; ++i)
    for (int j = 0; j < grid.n; ++j) {
      const Point p = grid.node(i, j);
      const double r2 = (p.x - cx) * (p.x - cx) + (p.y - cy) * (p.y - cy);
      f.values[grid.index(i, j)] = amplitude * std::exp(-r2 / (2 * sigma * sigma));
    }
  return f;
}

}  // namespace phantom

void write_field(const std::string& path, const CoefficientField& f) {
  io::BinaryWriter w(path, "ATF1");
  w.put<std::uint32_t>(1);
  w.put<double>(f.grid.origin.x);
  w.put<double>(f.grid.origin.y);
  w.put<double>(f.grid.spacing);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(f.grid.n));
  w.put_span<double>(f.values);
  w.commit();
}

CoefficientField read_field(const std::string& path) {
  io::BinaryReader r(path, "ATF1");
  if (r.get<std::uint32_t>() != 1) fail(ErrorKind::kData, path + ": unsupported ATF1 version");
  UniformGrid g;
  g.origin.x = r.get<double>();
  g.origin.y = r.get<double>();
  g.spacing = r.get<double>();
  g.n = static_cast<int>(r.get<std::uint32_t>());
  auto v = r.get_vector<double>(g.size());
  return CoefficientField(g, std::move(v));
}

void write_field_csv(const std::string& path, const CoefficientField& f) {
  std::ostringstream ss;
  ss.precision(17);
  ss << "i,j,x1,x2,value\n";
  for (int i = 0; i < f.grid.n; ++i)
    for (int j = 0; j < f.grid.n; ++j) {
      const Point p = f.grid.node(i, j);
      ss << i << ',' << j << ',' << p.x << ',' << p.y << ',' << f.at(i, j) << '\n';
    }
  io::write_text(path, ss.str());
}

void write_field_pgm(const std::string& path, const CoefficientField& f, double lo, double hi) {
  const int n = f.grid.n;
  io::Gray8 img{n, n, std::vector<std::uint8_t>(f.grid.size())};
  const double span = hi > lo ? hi - lo : 1.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double g = std::clamp((f.at(i, j) - lo) / span, 0.0, 1.0);
      img.pixels[static_cast<std::size_t>(n - 1 - i) * n + j] = static_cast<std::uint8_t>(std::lround(255 * g));
    }
  io::write_pgm(path, img);
  std::ostringstream ss;
  ss.precision(17);
  ss << "min " << lo << "\nmax " << hi << '\n';
  io::write_text(path + ".window", ss.str());
}

}  // namespace atomo
