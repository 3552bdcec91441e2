#pragma once

#include <Eigen/Dense>
#include <array>
#include <string>
#include <vector>

#include "atomo/forward.hpp"
#include "atomo/geometry.hpp"
#include "atomo/phantom.hpp"

namespace atomo::bcm {

using Vec = Eigen::VectorXd;

// {1, Re z^k, Im z^k : k = 1..K}.  Nodal values are the discrete harmonic
// extension of the boundary samples (zero P1 stiffness residual at interior
// nodes); gradients are the analytic ones.
struct HarmonicFamily {
  int k = 0;
  std::vector<std::string> names;
  Eigen::MatrixXd values;  // nodes x (2K+1)
  Eigen::MatrixXd grad_x, grad_y;
  int size() const { return static_cast<int>(values.cols()); }
};
HarmonicFamily harmonic_family(int k, const TriMesh& mesh, bool discrete_harmonic = true);
// member `index` of the family (0 = 1, 2j-1 = Re z^j, 2j = Im z^j) at p
double harmonic_value(int index, Point p);

// Boundary hats (angular, `boundary` of them) x half-period sine pulses in
// time (`time` of them, all supported in [0, T]).  Element e = b * time + p.
struct ControlBasisSpec {
  int boundary = 16;
  int time = 32;
};

struct ControlBasis {
  ControlBasisSpec spec;
  double horizon = 0;       // T
  double dt = 0;
  std::size_t steps = 0;    // T / dt; traces run to 2 * steps
  Eigen::MatrixXd space;    // mesh boundary nodes x boundary hats
  Eigen::MatrixXd time;     // (2 steps + 1) x pulses
  int size() const { return spec.boundary * spec.time; }
};
// dt is the largest step <= dt_max that divides T evenly
ControlBasis make_control_basis(const TriMesh& mesh, const ControlBasisSpec& spec, double horizon, double dt_max);

// Responses of the medium to every basis element (consistent-mass leapfrog).
struct ResponseBank {
  ControlBasis basis;
  Eigen::MatrixXd final_states;           // nodes x elements, u(T)
  std::vector<Eigen::MatrixXd> traces;    // per element: (2 steps + 1) x boundary nodes
  Eigen::MatrixXd control_gram;           // L2(boundary x (0,T)) Gram of the basis
};
ResponseBank simulate_responses(const forward::FemSystem& sys, const ControlBasis& basis);

// Discrete H1 norm on the mesh: M + K with unit coefficient.
struct H1Norm {
  Eigen::SparseMatrix<double> gram;
  double operator()(const Vec& u) const { return std::sqrt(std::max(0.0, u.dot(gram * u))); }
};
H1Norm h1_norm(const TriMesh& mesh);

struct ControlSolution {
  std::string target;
  Vec coeffs;              // over the basis elements; empty = missing
  Vec final_state;
  double residual = 0;     // ||u(T) - h||_H1
  double target_norm = 0;  // ||h||_H1
  double energy = 0;       // ||f||^2_L2
  std::vector<std::string> warnings;
};
// min ||u^f(T) - h||^2_H1 + reg * s * ||f||^2_L2, s = tr(R^T G R) / tr(Q) making reg
// dimensionless; controllability warning above ceiling * ||h||_H1
ControlSolution control_for_target(const Vec& h, const ResponseBank& bank, const H1Norm& norm, double reg,
                                   double ceiling = 0.1, const std::string& name = "h");

// Neumann input (p1) and Dirichlet trace (p0) of u^f at the mesh boundary nodes over [0, 2T].
forward::BoundaryTraceSet control_traces(const ResponseBank& bank, const Vec& coeffs, const TriMesh& mesh);

// [f, g] = int q u^f(T) u^g(T) from boundary data only, by the discrete
// Blagoveshchenskii recurrence for W(n, m) = U_n^f . M U_m^g; exact for the
// consistent-mass leapfrog that produced the traces.  `boundary_mass` is the
// 1D mass on the boundary nodes (boundary x boundary).
double bilinear_from_boundary(const forward::BoundaryTraceSet& f, const forward::BoundaryTraceSet& g,
                              const Eigen::MatrixXd& boundary_mass, double horizon);
Eigen::MatrixXd boundary_mass_block(const forward::FemSystem& sys);
// interior oracle U^f(T) . M_q U^g(T)
double bilinear_interior(const forward::FemSystem& sys, const Vec& uf, const Vec& ug);

struct BcmSystem {
  Eigen::MatrixXd a;                    // pairs x triangles
  Vec b;
  std::vector<std::array<int, 2>> pairs;  // alpha <= beta
  double condition = 0;                 // sigma_max / sigma_min (nonzero rows)
  std::vector<std::string> warnings;
};
// a_k^{(n,m)} exact P1 element mass, phi = nodal harmonic values, b = bilinear(alpha, beta)
BcmSystem assemble_bcm_system(const HarmonicFamily& family, const std::vector<ControlSolution>& controls,
                              const Eigen::MatrixXd& bilinear, const TriMesh& mesh);

// shared-edge graph Laplacian on triangles
Eigen::SparseMatrix<double> triangle_graph_laplacian(const TriMesh& mesh);

struct BcmSolution {
  std::vector<double> q_triangles;
  double residual = 0;   // ||A q - b||
  double penalty = 0;    // ||L q||
  double gamma = 0;
};
// min ||A q - b||^2 + gamma ||L q||^2
BcmSolution solve_bcm(const BcmSystem& sys, const TriMesh& mesh, double gamma);

// Piecewise-constant q -> area-weighted nodal values -> P1 interpolation at the grid nodes.
CoefficientField resample_to_grid(const TriMesh& mesh, const std::vector<double>& q_triangles, const UniformGrid& grid);

void write_bcm(const std::string& path, const BcmSystem& sys, const BcmSolution& sol);
struct BcmRecord {
  BcmSystem system;
  BcmSolution solution;
};
BcmRecord read_bcm(const std::string& path);

}  // namespace atomo::bcm
