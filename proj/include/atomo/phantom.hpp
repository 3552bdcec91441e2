#pragma once

#include <string>
#include <vector>

#include "atomo/geometry.hpp"
#include "atomo/io.hpp"

namespace atomo {

// q (or xi = q - 4) sampled on a grid, row-major like UniformGrid.
struct CoefficientField {
  UniformGrid grid;
  std::vector<double> values;

  CoefficientField() = default;
  CoefficientField(const UniformGrid& g, double fill) : grid(g), values(g.size(), fill) {}
  CoefficientField(const UniformGrid& g, std::vector<double> v);

  double at(int i, int j) const { return values[grid.index(i, j)]; }
  double min() const;
  double max() const;
  // throws invalid-argument if any value is < 1 or non-finite
  void check_admissible() const;
};

struct PhantomConstants {
  double c0 = 4.0;
  double c1 = 1.0;
  double c2 = 1.0;
};

namespace phantom {

// The three-bump smooth phantom exactly as printed, (s,t) in [0,1]^2.
double eval_smooth(double s, double t, const PhantomConstants& c);
// analytic gradient d/ds, d/dt
Point grad_smooth(double s, double t, const PhantomConstants& c);

// C-infinity ramp: 0 at s=0 and s=1, 1 on [width, 1-width].
double edge_mollifier(double s, double width);

inline constexpr double kDefaultMollifierWidth = 0.1;

// c0 + c1*m(s)m(t)*[q1 - q2 - q3]: the printed phantom with its perturbation
// faded out near the square boundary.
double eval_smooth_mollified(double s, double t, const PhantomConstants& c,
                             double width = kDefaultMollifierWidth);

PhantomConstants calibrate_constants(double target_lo, double target_hi,
                                     double width = kDefaultMollifierWidth);

struct RangeReport {
  double min = 0;
  double max = 0;
  double boundary_deviation = 0;  // max |q - c0| over the sampled square boundary
};
RangeReport sample_range(const PhantomConstants& c, int n, double width = kDefaultMollifierWidth);

CoefficientField smooth_field(const UniformGrid& grid, const PhantomConstants& c,
                              double width = kDefaultMollifierWidth);

// Affine pixel-min -> lo, pixel-max -> hi, nearest-neighbour onto the grid.
CoefficientField raster_to_field(const io::Gray8& image, double lo, double hi, const UniformGrid& grid);
CoefficientField load_raster(const std::string& path, double lo, double hi, const UniformGrid& grid);

// Stand-in for the ultrasound scan: background ~ q=4 with ellipse inclusions
// at the two extreme levels.
std::vector<unsigned char> synthetic_raster_pixels(int width, int height);
void write_synthetic_raster(const std::string& path, int width, int height);

// Gaussian bump centred at (cx, cy) in physical coordinates; used as xi*.
CoefficientField gaussian_bump(const UniformGrid& grid, double amplitude, double cx, double cy, double sigma);

}  // namespace phantom

void write_field(const std::string& path, const CoefficientField& f);  // f64 container "ATF1"
CoefficientField read_field(const std::string& path);
void write_field_csv(const std::string& path, const CoefficientField& f);
// linear window [lo, hi] -> [0, 255]; writes `path` and `path + ".window"`
void write_field_pgm(const std::string& path, const CoefficientField& f, double lo, double hi);

}  // namespace atomo
