#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "atomo/geometry.hpp"
#include "atomo/laplace.hpp"
#include "atomo/phantom.hpp"

namespace atomo::qrm {

using Vec = Eigen::VectorXd;
using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;

// ell = ln(|x - x0| / rho) and its x-gradient
struct LogKernel {
  double ell = 0;
  Point grad{};
};
LogKernel log_kernel(Point x, Point x0, double rho);

// Orthonormal basis on the transducer ring, sampled at the transducers.
// Built from P_k(2s/L - 1) e^s on the arc length s unrolled from a seam half
// a spacing before transducer 0.
struct RingBasis {
  int n = 0;                  // N
  int m = 0;                  // ring nodes
  double weight = 0;          // quadrature weight 2 pi R / m
  TransducerRing ring;
  std::vector<double> s;      // unrolled arc length per node
  Eigen::MatrixXd psi;        // m x N
  Eigen::MatrixXd dpsi;       // m x N, d/ds
  Eigen::MatrixXd pairing;    // D[n,k] = sum_j w dpsi_k psi_n
  Eigen::VectorXd singular_values;

  Eigen::MatrixXd gram() const;
};
RingBasis build_ring_basis(int n, const TransducerRing& ring);

// M_N V_lap + K1 V_x1 + K2 V_x2 + K0 V = 0, coefficient matrices per grid node
struct OperatorBundle {
  int n = 0;
  UniformGrid grid;
  Eigen::MatrixXd m_n;
  std::vector<Eigen::MatrixXd> k0, k1, k2;  // per grid node (k0 identically zero)
  std::size_t masked_quadrature_nodes = 0;
};
OperatorBundle assemble_operator_bundle(const RingBasis& basis, const UniformGrid& grid, double rho);

// ---------------------------------------------------------------- data

// Cauchy data u, d_nu u on the grid boundary for every ring source,
// index b * m + j (b = boundary node, j = source).
struct CauchyData {
  UniformGrid grid;
  TransducerRing ring;
  double rho = 2.5;
  std::vector<double> u;
  std::vector<double> u_nu;
};

// Projected boundary data S0, S1: boundary nodes x N
struct ProjectedData {
  Eigen::MatrixXd s0;
  Eigen::MatrixXd s1;
  std::size_t excluded_pairs = 0;
  std::vector<std::string> warnings;
};
ProjectedData project_boundary_data(const CauchyData& data, const RingBasis& basis);

// Brute-force (1/2pi) int ell(x,x') ell(x',x0) xi(x') dx' by the midpoint rule
// on a refined cell grid over D.
class LavrentievOracle {
 public:
  LavrentievOracle(std::function<double(Point)> xi, const Square& domain, int cells_per_side, double rho);
  LavrentievOracle(const CoefficientField& xi, int refine, double rho);

  double u(Point x, Point x0) const;
  Point grad_u(Point x, Point x0) const;
  // Cauchy data on the grid boundary for every transducer of `ring`
  CauchyData cauchy_data(const UniformGrid& grid, const TransducerRing& ring) const;
  // u at every grid node for one source
  std::vector<double> field(const UniformGrid& grid, Point x0) const;
  double rho() const { return rho_; }
  std::size_t quadrature_size() const { return xq_.size(); }

 private:
  std::vector<Point> xq_;
  std::vector<double> wxi_;  // xi * cell area
  double rho_;
};

// Cauchy data from Laplace-domain limits (receivers = grid boundary nodes).
CauchyData cauchy_data_from_spectral(const laplace::SpectralBoundaryData& spec, const UniformGrid& grid,
                                     const TransducerRing& ring, double rho);

// ---------------------------------------------------------------- system

struct RowInfo {
  enum Kind : std::uint8_t { kInterior, kDirichlet, kNeumann };
  Kind kind;
  std::uint32_t node;
  std::uint16_t component;
};

struct QrmLinearSystem {
  SpMat a;
  Vec b;
  std::vector<RowInfo> rows;
  int n = 0;
  UniformGrid grid;
  std::size_t unknowns() const { return static_cast<std::size_t>(a.cols()); }
};
// unknown index = grid node * N + k
QrmLinearSystem discretize(const OperatorBundle& bundle, const ProjectedData& data);

struct CgReport {
  std::size_t iterations = 0;
  double relative_residual = 0;
  bool converged = false;
};
// (A^T A + alpha I) V = A^T b by conjugate gradients
Vec tikhonov_solve(const QrmLinearSystem& sys, double alpha, CgReport* report = nullptr, const Vec* start = nullptr,
                   double tol = 1e-10);

// Sparse LDL^T of A^T A + alpha I.  Same minimiser as tikhonov_solve; pays
// off when one system is solved for many data vectors (noise draws).
class TikhonovFactor {
 public:
  TikhonovFactor(const QrmLinearSystem& sys, double alpha);
  // V for data vector b (rows of sys)
  Vec solve(const Vec& b) const;
  double alpha() const { return alpha_; }

 private:
  struct Impl;
  std::shared_ptr<const Impl> impl_;
  double alpha_ = 0;
};

// ---------------------------------------------------------------- recovery

struct XiField {
  std::vector<double> values;   // grid order
  std::vector<std::uint8_t> masked;
};
// v(x) = sum_k v_k(x) psi_k(x0_j); xi = Lap v + 2 grad(ell)/ell . grad v
XiField recover_xi(const Vec& v, const RingBasis& basis, const UniformGrid& grid, int source, double rho);

struct AveragedXi {
  CoefficientField xi;
  std::vector<std::uint32_t> counts;  // unmasked sources per node
};
AveragedXi average_xi(const std::vector<XiField>& fields, const UniformGrid& grid);

// ---------------------------------------------------------------- chain

enum class Solver { kCg, kLdlt };

struct QrmOptions {
  int n_basis = 8;
  double rho = 2.5;
  double alpha = 5e-6;
  double cg_tol = 1e-10;
  Solver solver = Solver::kCg;
};

struct QrmSolution {
  UniformGrid grid;
  int n = 0;
  double alpha = 0;
  double rho = 0;
  Vec v;
  CoefficientField xi;   // recovered q - 4
  CoefficientField q;
  double residual = 0;   // ||A V - b||
  double solution_norm = 0;
  CgReport cg;
  std::vector<std::string> warnings;
};

// Everything up to the linear system, reusable across alphas.
struct QrmProblem {
  RingBasis basis;
  OperatorBundle bundle;
  ProjectedData projected;
  QrmLinearSystem system;
  double rho = 2.5;
};
QrmProblem prepare(const CauchyData& data, const QrmOptions& opts);
// same basis and operator, new boundary data (A does not depend on the data)
QrmProblem with_data(const QrmProblem& base, const CauchyData& data);
QrmSolution solve(const QrmProblem& problem, double alpha, const Vec* start = nullptr, double cg_tol = 1e-10);
// factor must belong to problem.system's matrix
QrmSolution solve(const QrmProblem& problem, const TikhonovFactor& factor);
QrmSolution run_qrm(const CauchyData& data, const QrmOptions& opts);

struct SweepRow {
  double alpha = 0;
  double residual = 0;
  double solution_norm = 0;
  std::optional<double> error;  // rel L2 against the truth
};
struct SweepResult {
  std::vector<SweepRow> rows;
  std::size_t chosen = 0;
  std::vector<QrmSolution> solutions;
};
std::vector<double> default_alphas();
// argmin of the error with a truth, otherwise the maximum-curvature corner of
// (log residual, log norm)
SweepResult alpha_sweep(const QrmProblem& problem, const std::vector<double>& alphas,
                        const CoefficientField* truth_xi = nullptr, Solver solver = Solver::kCg);

void write_solution(const std::string& path, const QrmSolution& s);
QrmSolution read_solution(const std::string& path);
void write_sweep_csv(const std::string& path, const SweepResult& r);

}  // namespace atomo::qrm
