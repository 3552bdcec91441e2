#pragma once

#include <Eigen/Sparse>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "atomo/geometry.hpp"
#include "atomo/phantom.hpp"

namespace atomo::forward {

using Vec = Eigen::VectorXd;
using SpMat = Eigen::SparseMatrix<double>;

// q per triangle: field value (bilinear) at the centroid inside the grid's
// square, `background` elsewhere.
std::vector<double> triangle_coefficients(const TriMesh& mesh, const CoefficientField& q, double background);
double sample_bilinear(const CoefficientField& f, Point p, double outside);

struct FemSystem {
  std::shared_ptr<const TriMesh> mesh;
  std::vector<double> q;   // per triangle
  SpMat mass;              // consistent, q-weighted
  SpMat stiffness;
  SpMat boundary_mass;     // consistent 1D mass on the outer circle edges
  Vec lumped;              // row sums of mass
  Vec area_lumped;         // row sums of the unweighted mass
  Vec boundary_lumped;     // row sums of boundary_mass
  double q_min = 0;
  double q_max = 0;
  double h_min = 0;
  // cached spectral estimates (see max_frequency_squared), -1 = not yet known
  mutable double lambda_lumped = -1;
  mutable double lambda_consistent = -1;
};

// Element matrices of one P1 triangle (q = 1).
std::array<std::array<double, 3>, 3> element_mass(Point a, Point b, Point c);
std::array<std::array<double, 3>, 3> element_stiffness(Point a, Point b, Point c);

FemSystem assemble_fem(std::shared_ptr<const TriMesh> mesh, std::vector<double> q_per_triangle);
FemSystem assemble_fem(std::shared_ptr<const TriMesh> mesh, const CoefficientField& q, double background);

// Waveforms
double ricker(double t, double f0);
double cap_delta(double r, double eps);
// Load vector of the cap profile centred at `c`, normalised to unit sum.
Vec cap_load(const TriMesh& mesh, Point c, double eps);

struct ControlWaveform {
  enum class Kind { kRicker, kCapDelta, kTabulated };
  Kind kind = Kind::kRicker;
  double f0 = 2.0;   // ricker centre frequency
  double eps = 0.1;  // cap width along the boundary (cap-delta)
  double amplitude = 1.0;
  // ricker: hat profile at nodes[0]; cap-delta: cap centred at nodes[0] times
  // a ricker pulse; tabulated: nodal values at `nodes`, table[k*nodes.size()+i]
  // at time k*dt_table, linear in between, zero after the table ends.
  std::vector<std::uint32_t> nodes;
  double dt_table = 0;
  std::vector<double> table;

  // boundary nodal values f(x_n, t) for every node in `boundary`
  void nodal_values(double t, const TriMesh& mesh, std::vector<double>& out) const;
  bool active_after(double t) const;
  static ControlWaveform ricker_at(std::uint32_t node, double f0);
};

// Linear functional on nodal vectors: sum w_i u[idx_i].
struct Probe {
  std::vector<std::uint32_t> idx;
  std::vector<double> w;
  double apply(const Vec& u) const {
    double s = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) s += w[i] * u[idx[i]];
    return s;
  }
};

struct ReceiverSet {
  std::vector<Point> positions;
  std::vector<Point> normals;
  std::vector<Probe> value;
  std::vector<Probe> flux;  // outward normal derivative
  std::vector<std::string> warnings;
  std::size_t size() const { return positions.size(); }
};

// Nodes of ring `ring` (every `stride`-th), flux by one-sided differences
// along the inward radius.
ReceiverSet ring_receivers(const TriMesh& mesh, int ring, int stride = 1);
// Arbitrary interior points (P1 interpolation); flux by a one-sided
// second-order difference with step `delta` against the normal.
ReceiverSet point_receivers(const TriMesh& mesh, const std::vector<Point>& pts,
                            const std::vector<Point>& normals, double delta);

struct BoundaryTraceSet {
  double dt = 0;
  std::vector<Point> receivers;
  std::vector<Point> normals;
  std::vector<std::int64_t> sources;          // source / control id per block
  std::vector<std::size_t> samples;           // samples per block (t_k = k dt)
  std::vector<std::vector<double>> p0;        // samples x receivers, row-major
  std::vector<std::vector<double>> p1;        // empty when not recorded
  std::vector<std::string> warnings;

  std::size_t receiver_count() const { return receivers.size(); }
  double horizon(std::size_t b) const { return dt * static_cast<double>(samples[b] - 1); }
  // time series of receiver r in block b
  std::vector<double> series(std::size_t b, std::size_t r, bool flux = false) const;
  void append(const BoundaryTraceSet& other);
};

void write_traces(const std::string& path, const BoundaryTraceSet& t);
BoundaryTraceSet read_traces(const std::string& path);
void write_traces_csv(const std::string& path, const BoundaryTraceSet& t, std::size_t block);

enum class MassKind { kLumped, kConsistent };

// Largest eigenvalue of M^-1 K (power iteration); explicit leapfrog is stable
// for dt < 2/sqrt(lambda).
double max_frequency_squared(const FemSystem& sys, MassKind mass = MassKind::kLumped);
inline constexpr double kSpectralMargin = 0.98;
// min(cfl_const * h_min * sqrt(q_min), kSpectralMargin * 2/sqrt(lambda))
double cfl_limit(const FemSystem& sys, double cfl_const = 0.9, MassKind mass = MassKind::kLumped);

// Central differences for M U'' + C U' + K U = F with diagonal C.
class Leapfrog {
 public:
  Leapfrog(const FemSystem& sys, double dt, MassKind mass, Vec damping = {}, SpMat extra_stiffness = {});
  // u(0) = u0, u'(0) = v0, F(0) = f0
  void start(const Vec& u0, const Vec& v0, const Vec& f0);
  void step(const Vec& f);  // advance with F(t_n) = f
  const Vec& u() const { return u_; }
  const Vec& u_prev() const { return u_prev_; }
  std::size_t steps() const { return n_; }
  double dt() const { return dt_; }
  // 1/2 |(U^n - U^{n-1})/dt|_M^2 + 1/2 U^n.K U^{n-1}, conserved when C = 0, F = 0
  double discrete_energy() const;
  const SpMat& stiffness() const { return k_; }

 private:
  Vec apply_mass(const Vec& v) const;
  Vec solve_mass(const Vec& r) const;
  const FemSystem* sys_;
  double dt_;
  MassKind mass_;
  Vec c_;
  SpMat k_;
  Vec u_, u_prev_;
  std::size_t n_ = 0;
  struct Factor;
  std::shared_ptr<Factor> factor_;
};

struct IbvpOptions {
  MassKind mass = MassKind::kLumped;
  double cfl_const = 0.9;
  std::vector<double> snapshot_times;  // states returned at these times (nearest step)
  bool check_cfl = true;
};

struct IbvpResult {
  BoundaryTraceSet traces;       // Dirichlet traces at mesh boundary nodes, one block
  Vec final_state;               // U at the horizon
  std::vector<Vec> snapshots;
};

// Neumann control on the outer boundary, zero initial data.
IbvpResult solve_neumann_ibvp(const FemSystem& sys, const ControlWaveform& control, double horizon, double dt,
                              const IbvpOptions& opts = {});

// General driver: Neumann data given as boundary nodal values per step.
using BoundaryData = std::function<void(std::size_t step, double t, std::vector<double>& f_boundary)>;
IbvpResult solve_neumann_ibvp(const FemSystem& sys, const BoundaryData& data, double horizon, double dt,
                              const IbvpOptions& opts);

struct CauchyOptions {
  double eps = 0.0;          // cap width, 0 -> 2 h
  double stop_norm = 1e-3;   // ||v(.,T)||_2 threshold
  double cfl_const = 0.9;
  bool absorbing = true;     // false: plain Neumann (reflecting) outer boundary
  std::size_t check_every = 10;
};

// u_tt q = Lap u in S, u(0) = 0, u_t(0) = cap delta at `source`; first-order
// absorbing condition on the outer circle.  Records value and flux at the
// receivers until the L2 norm drops below stop_norm or the horizon.
BoundaryTraceSet solve_cauchy_absorbing(const FemSystem& sys, Point source, const ReceiverSet& receivers,
                                        double horizon, double dt, const CauchyOptions& opts = {});

// One-sided derivative along the inward normal from values at outward
// coordinates 0, -a, -(a+b).
std::array<double, 3> one_sided_weights(double a, double b);

}  // namespace atomo::forward
