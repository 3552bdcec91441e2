#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "atomo/forward.hpp"
#include "atomo/geometry.hpp"

namespace atomo::laplace {

inline constexpr double kEulerGamma = 0.57721566490153286061;
// |ln(|x-x0|/rho)| below this is treated as a near-singular pair
inline constexpr double kLogGuard = 0.05;

// Strictly decreasing p values in (0, e^-gamma).
struct PGrid {
  std::vector<double> p;

  static PGrid log_spaced(double lo, double hi, int count);
  static PGrid standard() { return log_spaced(0.01, 0.3, 8); }
  void validate() const;
  std::size_t size() const { return p.size(); }
};

// Composite Simpson of e^{-pt} series(t) over [tau, T], samples at k*dt.
// An odd interval count closes with Simpson's 3/8 rule on the last three.
double truncated_laplace(std::span<const double> series, double dt, double tau, double p);

// Eq. (rel_5) exactly as printed, and its derivative in r = |x - x0|.
double g0_kernel(Point x, Point x0, double p);
double g0_kernel_dr(double r, double p);
// Eq. (rel_4)
double h_from_v(double v, double g0, double p);

// Least-squares fit h(p) ~ H0 + H1 w + psi w^2, w = 1/(ln p + gamma).
struct LimitFit {
  double h0 = 0;
  double h1 = 0;
  double psi = 0;
  double residual = 0;
  double condition = 0;
};
LimitFit extract_limits(const PGrid& grid, std::span<const double> h);

// The fitted limits refer to ln|x-x'| ln|x'-x0|; the same data with the
// kernel ln(|x-x'|/rho) ln(|x'-x0|/rho).
double rescale_log_scale(const LimitFit& f, double rho);

// Boundary potential u = (1/2pi) int ell ell xi on the data circle from psi.
inline double potential_from_psi(double psi) { return -psi / (2.0 * 3.14159265358979323846); }

// Normal derivative on a circle of radius R of the exterior harmonic
// extension of ring samples (equispaced, any start angle).  Modes k != 0
// decay as r^-|k|; the mean mode as ln(r/rho)/ln(R/rho) (needs rho != R;
// rho == R falls back to a logarithmic cut-off at 100 R).
std::vector<double> exterior_neumann_completion(std::span<const double> psi, double radius, double rho);

// Eqs. (bc_1)-(bc_2) for the field v = u / ell, ell = ln(|x-x0|/rho).
struct BoundaryValue {
  double s0 = 0;
  double s1 = 0;
  bool excluded = false;  // near-singular log weight
};
BoundaryValue assemble_boundary_data(double u, double u_nu, Point x, Point x0, Point nu, double rho);

// ---------------------------------------------------------------- trace data

enum class Background { kReference, kG0 };

struct SpectralOptions {
  PGrid pgrid = PGrid::standard();
  double tau = 0.0;
  Background background = Background::kReference;
};

// Laplace-domain data for every (source, receiver) pair, pair index
// s * receivers + r.
struct SpectralBoundaryData {
  PGrid pgrid;
  double tau = 0;
  Background background = Background::kReference;
  std::vector<Point> sources;
  std::vector<Point> receivers;
  std::vector<Point> normals;
  std::vector<double> u_tilde;  // pairs x K, background removed
  std::vector<double> h;        // pairs x K
  std::vector<LimitFit> value;  // fits of the Dirichlet data
  std::vector<LimitFit> flux;   // fits of the normal-derivative data
  std::vector<std::uint8_t> excluded;
  std::vector<std::string> warnings;

  std::size_t pair(std::size_t s, std::size_t r) const { return s * receivers.size() + r; }
  std::size_t pair_count() const { return sources.size() * receivers.size(); }
};

// `traces` holds one block per source (value p0 and flux p1); `reference`
// the same layout for q = 4 (required for Background::kReference).
SpectralBoundaryData spectral_from_traces(const forward::BoundaryTraceSet& traces,
                                          const forward::BoundaryTraceSet* reference,
                                          const std::vector<Point>& sources, const SpectralOptions& opts);

void write_spectral(const std::string& path, const SpectralBoundaryData& d);
SpectralBoundaryData read_spectral(const std::string& path);
// psi and psi1 matrices (rows = sources) at log scale rho
void write_spectral_csv(const std::string& prefix, const SpectralBoundaryData& d, double rho);

}  // namespace atomo::laplace
