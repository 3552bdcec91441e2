#include "atomo/qrm.hpp"

#include <algorithm>
#include <array>
#include <Eigen/SparseCholesky>
#include <cmath>
#include <numbers>
#include <sstream>

#include "atomo/error.hpp"
#include "atomo/forward.hpp"
#include "atomo/io.hpp"
#include "atomo/parallel.hpp"
#include "atomo/postproc.hpp"

namespace atomo::qrm {

namespace {
constexpr double kPi = std::numbers::pi;
constexpr double kBackground = 4.0;
}  // namespace

LogKernel log_kernel(Point x, Point x0, double rho) {
  const Point d = x - x0;
  const double r2 = dot(d, d);
  if (r2 == 0) fail(ErrorKind::kSingularPair, "log kernel evaluated at x = x0");
  return {0.5 * std::log(r2) - std::log(rho), (1 / r2) * d};
}

// ---------------------------------------------------------------- basis

Eigen::MatrixXd RingBasis::gram() const { return weight * psi.transpose() * psi; }

RingBasis build_ring_basis(int n, const TransducerRing& ring) {
  require(n >= 1, "ring basis: N must be >= 1");
  const int m = ring.count;
  require(m >= 4 * n, "ring basis: need at least 4N ring nodes (have " + std::to_string(m) + " for N = " +
                          std::to_string(n) + ")");
  const double r = ring.circle.radius, len = 2 * kPi * r;
  RingBasis b;
  b.n = n;
  b.m = m;
  b.ring = ring;
  b.weight = len / m;
  b.s.resize(m);
  Eigen::MatrixXd phi(m, n), dphi(m, n);
  for (int j = 0; j < m; ++j) {
    // seam half a spacing before transducer 0
    const double s = r * ring.spacing() * (j + 0.5);
    b.s[j] = s;
    const double t = 2 * s / len - 1, es = std::exp(s);
    double p_prev = 0, p = 1, dp_prev = 0, dp = 0;
    for (int k = 0; k < n; ++k) {
      phi(j, k) = p * es;
      dphi(j, k) = (p + dp * 2 / len) * es;
      // Legendre recurrences for P_{k+1} and P'_{k+1}
      const double p_next = ((2 * k + 1) * t * p - k * p_prev) / (k + 1);
      const double dp_next = dp_prev + (2 * k + 1) * p;
      p_prev = p;
      p = p_next;
      dp_prev = dp;
      dp = dp_next;
    }
  }
  const Eigen::MatrixXd weighted = std::sqrt(b.weight) * phi;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(weighted);
  b.singular_values = svd.singularValues();
  if (b.singular_values[n - 1] < 1e-13 * b.singular_values[0]) {
    std::ostringstream ss;
    ss << "ring basis is numerically rank deficient (singular value ratio "
       << b.singular_values[n - 1] / b.singular_values[0] << "); use a smaller N";
    fail(ErrorKind::kBasis, ss.str());
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(weighted);
  Eigen::MatrixXd rr = qr.matrixQR().topRows(n).triangularView<Eigen::Upper>();
  for (int k = 0; k < n; ++k)
    if (rr(k, k) < 0) rr.row(k) *= -1;
  const Eigen::MatrixXd rinv = rr.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(n, n));
  b.psi = phi * rinv;
  b.dpsi = dphi * rinv;
  b.pairing = b.weight * b.psi.transpose() * b.dpsi;
  return b;
}

// ---------------------------------------------------------------- bundle

OperatorBundle assemble_operator_bundle(const RingBasis& basis, const UniformGrid& grid, double rho) {
  const double r = basis.ring.circle.radius;
  const Point c = basis.ring.circle.center;
  for (int i : {0, grid.n - 1})
    for (int j : {0, grid.n - 1})
      require(dist(grid.node(i, j), c) <= r * (1 + 1e-12), "operator bundle: grid must lie inside the ring");
  OperatorBundle out;
  out.n = basis.n;
  out.grid = grid;
  out.m_n = basis.pairing;
  const std::size_t nodes = grid.size();
  const int n = basis.n, m = basis.m;
  out.k0.assign(nodes, Eigen::MatrixXd::Zero(n, n));
  out.k1.resize(nodes);
  out.k2.resize(nodes);
  std::vector<std::size_t> masked(nodes, 0);
  std::vector<Point> x0(m), tau(m);
  for (int j = 0; j < m; ++j) {
    x0[j] = basis.ring.position(j);
    tau[j] = basis.ring.tangent(j);
  }
  parallel_for(nodes, [&](std::size_t node) {
    const Point x = grid.node(static_cast<int>(node / grid.n), static_cast<int>(node % grid.n));
    Eigen::VectorXd a1(m), b1(m), a2(m), b2(m);
    for (int j = 0; j < m; ++j) {
      const Point d = x - x0[j];
      const double r2 = dot(d, d);
      const double ell = 0.5 * std::log(r2) - std::log(rho);
      if (std::abs(ell) < laplace::kLogGuard) {
        a1[j] = b1[j] = a2[j] = b2[j] = 0;
        ++masked[node];
        continue;
      }
      // derivatives along the ring: d(x0)/ds = tau, so d(d)/ds = -tau
      const double dt = dot(d, tau[j]);
      const double ds_ell = -dt / r2;
      const double e[2] = {d.x / r2, d.y / r2};
      const double t[2] = {tau[j].x, tau[j].y}, dd[2] = {d.x, d.y};
      double g[2], ds_g[2];
      for (int i = 0; i < 2; ++i) {
        const double ds_e = -t[i] / r2 + 2 * dd[i] * dt / (r2 * r2);
        g[i] = e[i] / ell;
        ds_g[i] = ds_e / ell - e[i] * ds_ell / (ell * ell);
      }
      const double w2 = 2 * basis.weight;
      a1[j] = w2 * ds_g[0];
      b1[j] = w2 * g[0];
      a2[j] = w2 * ds_g[1];
      b2[j] = w2 * g[1];
    }
    const auto& p = basis.psi;
    const auto& dp = basis.dpsi;
    out.k1[node] = p.transpose() * a1.asDiagonal() * p + p.transpose() * b1.asDiagonal() * dp;
    out.k2[node] = p.transpose() * a2.asDiagonal() * p + p.transpose() * b2.asDiagonal() * dp;
  });
  for (auto k : masked) out.masked_quadrature_nodes += k;
  return out;
}

// ---------------------------------------------------------------- data

ProjectedData project_boundary_data(const CauchyData& data, const RingBasis& basis) {
  const auto bd = grid_boundary(data.grid);
  const std::size_t nb = bd.nodes.size();
  const int m = basis.m, n = basis.n;
  require(data.ring.count == m, "projection: data and basis use different rings");
  require(data.u.size() == nb * m && data.u_nu.size() == nb * m, "projection: Cauchy data have the wrong size");
  ProjectedData out;
  out.s0 = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nb), n);
  out.s1 = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nb), n);
  std::size_t worst = 0;
  for (std::size_t b = 0; b < nb; ++b) {
    const Point x = data.grid.node(bd.ij[b][0], bd.ij[b][1]);
    std::size_t excl = 0;
    for (int j = 0; j < m; ++j) {
      const auto v = laplace::assemble_boundary_data(data.u[b * m + j], data.u_nu[b * m + j], x,
                                                     data.ring.position(j), bd.normals[b], data.rho);
      if (v.excluded) {
        ++excl;
        continue;
      }
      out.s0.row(static_cast<Eigen::Index>(b)) += basis.weight * v.s0 * basis.psi.row(j);
      out.s1.row(static_cast<Eigen::Index>(b)) += basis.weight * v.s1 * basis.psi.row(j);
    }
    out.excluded_pairs += excl;
    worst = std::max(worst, excl);
  }
  if (worst > static_cast<std::size_t>(0.3 * m)) {
    std::ostringstream ss;
    ss << "data coverage: up to " << worst << " of " << m << " ring sources excluded at a boundary node";
    out.warnings.push_back(ss.str());
  }
  return out;
}

LavrentievOracle::LavrentievOracle(std::function<double(Point)> xi, const Square& domain, int cells, double rho)
    : rho_(rho) {
  require(cells >= 1, "oracle: need at least one cell");
  require(rho > 0, "oracle: log scale must be positive");
  const double hq = domain.side / cells;
  const Point lo = domain.lower_left();
  for (int i = 0; i < cells; ++i)
    for (int j = 0; j < cells; ++j) {
      const Point p{lo.x + hq * (j + 0.5), lo.y + hq * (i + 0.5)};
      const double v = xi(p);
      if (v == 0) continue;
      xq_.push_back(p);
      wxi_.push_back(v * hq * hq);
    }
}

LavrentievOracle::LavrentievOracle(const CoefficientField& xi, int refine, double rho)
    : LavrentievOracle([&xi](Point p) { return forward::sample_bilinear(xi, p, 0.0); },
                       Square{{xi.grid.origin.x + xi.grid.side() / 2, xi.grid.origin.y + xi.grid.side() / 2},
                              xi.grid.side()},
                       (xi.grid.n - 1) * refine, rho) {}

double LavrentievOracle::u(Point x, Point x0) const {
  double s = 0;
  for (std::size_t q = 0; q < xq_.size(); ++q)
    s += log_kernel(x, xq_[q], rho_).ell * log_kernel(xq_[q], x0, rho_).ell * wxi_[q];
  return s / (2 * kPi);
}

Point LavrentievOracle::grad_u(Point x, Point x0) const {
  Point g{};
  for (std::size_t q = 0; q < xq_.size(); ++q) {
    const auto k = log_kernel(x, xq_[q], rho_);
    g = g + (log_kernel(xq_[q], x0, rho_).ell * wxi_[q]) * k.grad;
  }
  return (1 / (2 * kPi)) * g;
}

namespace {

// U = K B with K(x, q) = ell(x, x_q) (and its gradient), B(q, j) = ell(x_q, x0_j) w_q,
// chunked over quadrature points
void oracle_products(const std::vector<Point>& xq, const std::vector<double>& wxi, double rho,
                     const std::vector<Point>& pts, const std::vector<Point>& sources, bool with_grad,
                     Eigen::MatrixXd& u, Eigen::MatrixXd& g1, Eigen::MatrixXd& g2) {
  const auto np = static_cast<Eigen::Index>(pts.size()), ns = static_cast<Eigen::Index>(sources.size());
  u = Eigen::MatrixXd::Zero(np, ns);
  if (with_grad) {
    g1 = Eigen::MatrixXd::Zero(np, ns);
    g2 = Eigen::MatrixXd::Zero(np, ns);
  }
  const std::size_t chunk = 2048;
  const double lr = std::log(rho);
  for (std::size_t q0 = 0; q0 < xq.size(); q0 += chunk) {
    const auto nq = static_cast<Eigen::Index>(std::min(chunk, xq.size() - q0));
    Eigen::MatrixXd b(nq, ns), k(np, nq), k1, k2;
    if (with_grad) {
      k1.resize(np, nq);
      k2.resize(np, nq);
    }
    for (Eigen::Index q = 0; q < nq; ++q) {
      const Point xqq = xq[q0 + static_cast<std::size_t>(q)];
      for (Eigen::Index j = 0; j < ns; ++j) {
        const Point d = xqq - sources[static_cast<std::size_t>(j)];
        b(q, j) = (0.5 * std::log(dot(d, d)) - lr) * wxi[q0 + static_cast<std::size_t>(q)];
      }
    }
    parallel_for(static_cast<std::size_t>(np), [&](std::size_t p) {
      const auto pi = static_cast<Eigen::Index>(p);
      for (Eigen::Index q = 0; q < nq; ++q) {
        const Point d = pts[p] - xq[q0 + static_cast<std::size_t>(q)];
        const double r2 = dot(d, d);
        k(pi, q) = 0.5 * std::log(r2) - lr;
        if (with_grad) {
          k1(pi, q) = d.x / r2;
          k2(pi, q) = d.y / r2;
        }
      }
    });
    u.noalias() += k * b;
    if (with_grad) {
      g1.noalias() += k1 * b;
      g2.noalias() += k2 * b;
    }
  }
  u /= 2 * kPi;
  if (with_grad) {
    g1 /= 2 * kPi;
    g2 /= 2 * kPi;
  }
}

}  // namespace

CauchyData LavrentievOracle::cauchy_data(const UniformGrid& grid, const TransducerRing& ring) const {
  const auto bd = grid_boundary(grid);
  std::vector<Point> pts, src;
  for (auto ij : bd.ij) pts.push_back(grid.node(ij[0], ij[1]));
  for (int j = 0; j < ring.count; ++j) src.push_back(ring.position(j));
  Eigen::MatrixXd u, g1, g2;
  oracle_products(xq_, wxi_, rho_, pts, src, true, u, g1, g2);
  CauchyData d;
  d.grid = grid;
  d.ring = ring;
  d.rho = rho_;
  const std::size_t m = src.size();
  d.u.resize(pts.size() * m);
  d.u_nu.resize(pts.size() * m);
  for (std::size_t b = 0; b < pts.size(); ++b)
    for (std::size_t j = 0; j < m; ++j) {
      const auto bi = static_cast<Eigen::Index>(b), ji = static_cast<Eigen::Index>(j);
      d.u[b * m + j] = u(bi, ji);
      d.u_nu[b * m + j] = bd.normals[b].x * g1(bi, ji) + bd.normals[b].y * g2(bi, ji);
    }
  return d;
}

std::vector<double> LavrentievOracle::field(const UniformGrid& grid, Point x0) const {
  std::vector<Point> pts;
  for (int i = 0; i < grid.n; ++i)
    for (int j = 0; j < grid.n; ++j) pts.push_back(grid.node(i, j));
  Eigen::MatrixXd u, g1, g2;
  oracle_products(xq_, wxi_, rho_, pts, {x0}, false, u, g1, g2);
  return std::vector<double>(u.data(), u.data() + u.size());
}

CauchyData cauchy_data_from_spectral(const laplace::SpectralBoundaryData& spec, const UniformGrid& grid,
                                     const TransducerRing& ring, double rho) {
  const auto bd = grid_boundary(grid);
  if (spec.receivers.size() != bd.nodes.size() || spec.sources.size() != static_cast<std::size_t>(ring.count))
    fail(ErrorKind::kData, "spectral data do not match the grid boundary / transducer ring");
  for (std::size_t b = 0; b < bd.nodes.size(); ++b)
    if (dist(spec.receivers[b], grid.node(bd.ij[b][0], bd.ij[b][1])) > 1e-9)
      fail(ErrorKind::kData, "spectral receivers are not the grid boundary nodes");
  for (int j = 0; j < ring.count; ++j)
    if (dist(spec.sources[static_cast<std::size_t>(j)], ring.position(j)) > 1e-9)
      fail(ErrorKind::kData, "spectral sources are not the transducer positions");
  CauchyData d;
  d.grid = grid;
  d.ring = ring;
  d.rho = rho;
  const std::size_t m = static_cast<std::size_t>(ring.count), nb = bd.nodes.size();
  d.u.assign(nb * m, 0.0);
  d.u_nu.assign(nb * m, 0.0);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t p = spec.pair(j, b);
      if (spec.excluded[p]) continue;
      d.u[b * m + j] = laplace::potential_from_psi(laplace::rescale_log_scale(spec.value[p], rho));
      d.u_nu[b * m + j] = laplace::potential_from_psi(laplace::rescale_log_scale(spec.flux[p], rho));
    }
  return d;
}

// ---------------------------------------------------------------- system

QrmLinearSystem discretize(const OperatorBundle& bundle, const ProjectedData& data) {
  const auto& grid = bundle.grid;
  const int gn = grid.n, n = bundle.n;
  require(gn >= 5, "discretize: grid needs at least 5 nodes per side");
  const double h = grid.spacing;
  const auto bd = grid_boundary(grid);
  require(static_cast<std::size_t>(data.s0.rows()) == bd.nodes.size() && data.s0.cols() == n,
          "discretize: projected data do not match the grid/basis");
  auto var = [n](std::size_t node, int k) { return static_cast<int>(node * n + k); };

  QrmLinearSystem sys;
  sys.n = n;
  sys.grid = grid;
  std::vector<Eigen::Triplet<double>> trip;
  std::vector<double> rhs;
  int row = 0;
  std::vector<std::pair<int, double>> ent;
  auto flush = [&](double b, RowInfo info) {
    double mx = 0;
    for (auto& e : ent) mx = std::max(mx, std::abs(e.second));
    if (mx == 0) mx = 1;
    for (auto& e : ent) trip.emplace_back(row, e.first, e.second / mx);
    rhs.push_back(b / mx);
    sys.rows.push_back(info);
    ++row;
    ent.clear();
  };
  const double ih2 = 1 / (h * h), i2h = 1 / (2 * h);
  for (int i = 1; i < gn - 1; ++i)
    for (int j = 1; j < gn - 1; ++j) {
      const std::size_t c = grid.index(i, j), e = grid.index(i, j + 1), w = grid.index(i, j - 1),
                        no = grid.index(i + 1, j), so = grid.index(i - 1, j);
      const auto& k1 = bundle.k1[c];
      const auto& k2 = bundle.k2[c];
      for (int m = 0; m < n; ++m) {
        for (int k = 0; k < n; ++k) {
          const double d = bundle.m_n(m, k);
          // merge the five stencil points of component k
          const double cc = -4 * d * ih2;
          const double ce = d * ih2 + k1(m, k) * i2h, cw = d * ih2 - k1(m, k) * i2h;
          const double cn = d * ih2 + k2(m, k) * i2h, cs = d * ih2 - k2(m, k) * i2h;
          if (cc != 0) ent.emplace_back(var(c, k), cc);
          if (ce != 0) ent.emplace_back(var(e, k), ce);
          if (cw != 0) ent.emplace_back(var(w, k), cw);
          if (cn != 0) ent.emplace_back(var(no, k), cn);
          if (cs != 0) ent.emplace_back(var(so, k), cs);
        }
        flush(0.0, {RowInfo::kInterior, static_cast<std::uint32_t>(c), static_cast<std::uint16_t>(m)});
      }
    }
  for (std::size_t b = 0; b < bd.nodes.size(); ++b) {
    const std::size_t node = bd.nodes[b];
    for (int m = 0; m < n; ++m) {
      ent.emplace_back(var(node, m), 1.0);
      flush(data.s0(static_cast<Eigen::Index>(b), m),
            {RowInfo::kDirichlet, static_cast<std::uint32_t>(node), static_cast<std::uint16_t>(m)});
    }
    // outward derivative (3 v0 - 4 v1 + v2) / 2h, stepping against the normal
    const int di = -static_cast<int>(std::lround(bd.normals[b].y)), dj = -static_cast<int>(std::lround(bd.normals[b].x));
    const auto [i0, j0] = bd.ij[b];
    const std::size_t n1 = grid.index(i0 + di, j0 + dj), n2 = grid.index(i0 + 2 * di, j0 + 2 * dj);
    for (int m = 0; m < n; ++m) {
      ent.emplace_back(var(node, m), 3 * i2h);
      ent.emplace_back(var(n1, m), -4 * i2h);
      ent.emplace_back(var(n2, m), i2h);
      flush(data.s1(static_cast<Eigen::Index>(b), m),
            {RowInfo::kNeumann, static_cast<std::uint32_t>(node), static_cast<std::uint16_t>(m)});
    }
  }
  sys.a.resize(row, static_cast<Eigen::Index>(grid.size()) * n);
  sys.a.setFromTriplets(trip.begin(), trip.end());
  sys.b = Eigen::Map<Vec>(rhs.data(), static_cast<Eigen::Index>(rhs.size()));
  return sys;
}

Vec tikhonov_solve(const QrmLinearSystem& sys, double alpha, CgReport* report, const Vec* start, double tol) {
  require(alpha > 0, "tikhonov_solve: alpha must be positive");
  const auto nu = sys.a.cols();
  const Vec atb = sys.a.transpose() * sys.b;
  // Jacobi preconditioner: diag(A^T A) + alpha
  Vec diag = Vec::Constant(nu, alpha);
  for (Eigen::Index r = 0; r < sys.a.outerSize(); ++r)
    for (SpMat::InnerIterator it(sys.a, r); it; ++it) diag[it.col()] += it.value() * it.value();
  const Vec minv = diag.cwiseInverse();
  auto apply = [&](const Vec& x) -> Vec { return sys.a.transpose() * (sys.a * x) + alpha * x; };

  Vec x = start ? *start : Vec::Zero(nu);
  require(x.size() == nu, "tikhonov_solve: start vector has the wrong size");
  const double bn = atb.norm();
  CgReport rep;
  if (bn == 0) {
    rep.converged = true;
    if (report) *report = rep;
    return Vec::Zero(nu);
  }
  Vec r = atb - apply(x);
  Vec z = minv.cwiseProduct(r);
  Vec p = z;
  double rz = r.dot(z);
  const std::size_t max_it = 10 * static_cast<std::size_t>(nu);
  std::size_t it = 0;
  double rel = r.norm() / bn;
  while (rel > tol && it < max_it) {
    const Vec ap = apply(p);
    const double step = rz / p.dot(ap);
    x += step * p;
    r -= step * ap;
    ++it;
    // refresh the residual now and then against drift
    if (it % 500 == 0) r = atb - apply(x);
    rel = r.norm() / bn;
    z = minv.cwiseProduct(r);
    const double rz_new = r.dot(z);
    p = z + (rz_new / rz) * p;
    rz = rz_new;
  }
  rep.iterations = it;
  rep.relative_residual = rel;
  rep.converged = rel <= tol;
  if (report) *report = rep;
  return x;
}

struct TikhonovFactor::Impl {
  Eigen::SparseMatrix<double> at;  // A^T, column-major
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt;
};

TikhonovFactor::TikhonovFactor(const QrmLinearSystem& sys, double alpha) : alpha_(alpha) {
  require(alpha > 0, "tikhonov: alpha must be positive");
  auto impl = std::make_shared<Impl>();
  impl->at = sys.a.transpose();
  Eigen::SparseMatrix<double> normal = impl->at * sys.a;
  Eigen::SparseMatrix<double> shift(normal.rows(), normal.cols());
  shift.setIdentity();
  normal += alpha * shift;
  impl->ldlt.compute(normal);
  if (impl->ldlt.info() != Eigen::Success) fail(ErrorKind::kDivergence, "tikhonov: LDL^T factorisation failed");
  impl_ = std::move(impl);
}

Vec TikhonovFactor::solve(const Vec& b) const {
  require(b.size() == impl_->at.cols(), "tikhonov: data vector does not match the system");
  Vec v = impl_->ldlt.solve(impl_->at * b);
  if (!v.allFinite()) fail(ErrorKind::kDivergence, "tikhonov: non-finite solution");
  return v;
}

// ---------------------------------------------------------------- recovery

namespace {

// second derivative and first derivative along one axis of a grid line;
// one-sided second-order stencils at the ends
void axis_derivatives(const std::vector<double>& f, const UniformGrid& g, int i, int j, bool along_x, double& d1,
                      double& d2) {
  const int n = g.n;
  const int pos = along_x ? j : i;
  auto at = [&](int k) { return along_x ? f[g.index(i, k)] : f[g.index(k, j)]; };
  const double h = g.spacing;
  if (pos > 0 && pos < n - 1) {
    d1 = (at(pos + 1) - at(pos - 1)) / (2 * h);
    d2 = (at(pos + 1) - 2 * at(pos) + at(pos - 1)) / (h * h);
  } else {
    const int s = pos == 0 ? 1 : -1;
    const double u0 = at(pos), u1 = at(pos + s), u2 = at(pos + 2 * s), u3 = at(pos + 3 * s);
    d1 = s * (-3 * u0 + 4 * u1 - u2) / (2 * h);
    d2 = (2 * u0 - 5 * u1 + 4 * u2 - u3) / (h * h);
  }
}

}  // namespace

XiField recover_xi(const Vec& v, const RingBasis& basis, const UniformGrid& grid, int source, double rho) {
  require(grid.n >= 4, "recover_xi: grid needs at least 4 nodes per side");
  const int n = basis.n;
  require(v.size() == static_cast<Eigen::Index>(grid.size()) * n, "recover_xi: V has the wrong size");
  require(source >= 0 && source < basis.m, "recover_xi: source index out of range");
  const std::size_t nodes = grid.size();
  std::vector<double> f(nodes);
  const auto w = basis.psi.row(source);
  for (std::size_t c = 0; c < nodes; ++c) f[c] = v.segment(static_cast<Eigen::Index>(c) * n, n).dot(w);
  const Point x0 = basis.ring.position(source);
  XiField out;
  out.values.assign(nodes, 0.0);
  out.masked.assign(nodes, 0);
  for (int i = 0; i < grid.n; ++i)
    for (int j = 0; j < grid.n; ++j) {
      const std::size_t c = grid.index(i, j);
      const auto lk = log_kernel(grid.node(i, j), x0, rho);
      if (std::abs(lk.ell) < laplace::kLogGuard) {
        out.masked[c] = 1;
        continue;
      }
      double dx, dxx, dy, dyy;
      axis_derivatives(f, grid, i, j, true, dx, dxx);
      axis_derivatives(f, grid, i, j, false, dy, dyy);
      out.values[c] = dxx + dyy + 2 * (lk.grad.x * dx + lk.grad.y * dy) / lk.ell;
    }
  // masked nodes take the mean of unmasked 4-neighbours
  for (int i = 0; i < grid.n; ++i)
    for (int j = 0; j < grid.n; ++j) {
      const std::size_t c = grid.index(i, j);
      if (!out.masked[c]) continue;
      double s = 0;
      int cnt = 0;
      const int di[] = {-1, 1, 0, 0}, dj[] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const int a = i + di[k], b = j + dj[k];
        if (a < 0 || b < 0 || a >= grid.n || b >= grid.n || out.masked[grid.index(a, b)]) continue;
        s += out.values[grid.index(a, b)];
        ++cnt;
      }
      out.values[c] = cnt ? s / cnt : 0.0;
    }
  return out;
}

AveragedXi average_xi(const std::vector<XiField>& fields, const UniformGrid& grid) {
  require(!fields.empty(), "average_xi: no per-source fields");
  const std::size_t nodes = grid.size();
  AveragedXi out;
  out.xi = CoefficientField(grid, 0.0);
  out.counts.assign(nodes, 0);
  for (std::size_t c = 0; c < nodes; ++c) {
    double s = 0, all = 0;
    std::uint32_t cnt = 0;
    for (const auto& f : fields) {
      all += f.values[c];
      if (f.masked[c]) continue;
      s += f.values[c];
      ++cnt;
    }
    out.counts[c] = cnt;
    out.xi.values[c] = cnt ? s / cnt : all / static_cast<double>(fields.size());
  }
  return out;
}

// ---------------------------------------------------------------- chain

QrmProblem prepare(const CauchyData& data, const QrmOptions& opts) {
  require(opts.rho > 0, "qrm: log scale must be positive");
  require(std::abs(data.rho - opts.rho) <= 1e-12 * opts.rho, "qrm: data were produced with a different log scale");
  QrmProblem p;
  p.rho = opts.rho;
  p.basis = build_ring_basis(opts.n_basis, data.ring);
  p.bundle = assemble_operator_bundle(p.basis, data.grid, opts.rho);
  p.projected = project_boundary_data(data, p.basis);
  p.system = discretize(p.bundle, p.projected);
  return p;
}

QrmProblem with_data(const QrmProblem& base, const CauchyData& data) {
  require(std::abs(data.rho - base.rho) <= 1e-12 * base.rho, "qrm: data were produced with a different log scale");
  require(data.grid.n == base.system.grid.n && data.ring.count == base.basis.m, "qrm: data layout does not match the problem");
  QrmProblem p;
  p.rho = base.rho;
  p.basis = base.basis;
  p.bundle = base.bundle;
  p.projected = project_boundary_data(data, p.basis);
  p.system = discretize(p.bundle, p.projected);
  return p;
}

namespace {

QrmSolution start_solution(const QrmProblem& problem, double alpha) {
  QrmSolution s;
  s.grid = problem.system.grid;
  s.n = problem.system.n;
  s.alpha = alpha;
  s.rho = problem.rho;
  s.warnings = problem.projected.warnings;
  return s;
}

void finish_solution(const QrmProblem& problem, QrmSolution& s) {
  s.residual = (problem.system.a * s.v - problem.system.b).norm();
  s.solution_norm = s.v.norm();
  std::vector<XiField> per(static_cast<std::size_t>(problem.basis.m));
  parallel_for(per.size(), [&](std::size_t j) {
    per[j] = recover_xi(s.v, problem.basis, s.grid, static_cast<int>(j), problem.rho);
  });
  s.xi = average_xi(per, s.grid).xi;
  s.q = s.xi;
  for (auto& v : s.q.values) v += kBackground;
}

}  // namespace

QrmSolution solve(const QrmProblem& problem, double alpha, const Vec* start, double cg_tol) {
  auto s = start_solution(problem, alpha);
  s.v = tikhonov_solve(problem.system, alpha, &s.cg, start, cg_tol);
  if (!s.cg.converged) {
    std::ostringstream ss;
    ss << "conjugate gradients stopped after " << s.cg.iterations << " iterations at relative residual "
       << s.cg.relative_residual;
    s.warnings.push_back(ss.str());
  }
  finish_solution(problem, s);
  return s;
}

QrmSolution solve(const QrmProblem& problem, const TikhonovFactor& factor) {
  auto s = start_solution(problem, factor.alpha());
  s.v = factor.solve(problem.system.b);
  const Vec atb = problem.system.a.transpose() * problem.system.b;
  const Vec r = problem.system.a.transpose() * (problem.system.a * s.v) + factor.alpha() * s.v - atb;
  s.cg.relative_residual = atb.norm() > 0 ? r.norm() / atb.norm() : r.norm();
  s.cg.converged = true;
  finish_solution(problem, s);
  return s;
}

QrmSolution run_qrm(const CauchyData& data, const QrmOptions& opts) {
  const auto p = prepare(data, opts);
  if (opts.solver == Solver::kLdlt) return solve(p, TikhonovFactor(p.system, opts.alpha));
  return solve(p, opts.alpha, nullptr, opts.cg_tol);
}

std::vector<double> default_alphas() { return {1e-7, 5e-7, 1e-6, 5e-6, 1e-5, 5e-5, 1e-4, 5e-4, 1e-3}; }

SweepResult alpha_sweep(const QrmProblem& problem, const std::vector<double>& alphas, const CoefficientField* truth_xi,
                        Solver solver) {
  require(!alphas.empty(), "alpha_sweep: empty alpha list");
  for (std::size_t k = 0; k < alphas.size(); ++k) {
    require(alphas[k] > 0, "alpha_sweep: alphas must be positive");
    if (k) require(alphas[k] > alphas[k - 1], "alpha_sweep: alphas must be sorted ascending");
  }
  SweepResult r;
  const Vec* warm = nullptr;
  for (double a : alphas) {
    if (solver == Solver::kLdlt)
      r.solutions.push_back(solve(problem, TikhonovFactor(problem.system, a)));
    else
      r.solutions.push_back(solve(problem, a, warm));
    SweepRow row;
    row.alpha = a;
    row.residual = r.solutions.back().residual;
    row.solution_norm = r.solutions.back().solution_norm;
    if (truth_xi) row.error = postproc::rel_l2_error(r.solutions.back().xi, *truth_xi);
    r.rows.push_back(row);
    warm = &r.solutions.back().v;
  }
  if (truth_xi) {
    r.chosen = 0;
    for (std::size_t k = 1; k < r.rows.size(); ++k)
      if (*r.rows[k].error < *r.rows[r.chosen].error) r.chosen = k;
    return r;
  }
  // L-curve corner: curvature of (log residual, log norm) against log alpha
  r.chosen = 0;
  if (r.rows.size() >= 3) {
    double best = -1;
    for (std::size_t k = 1; k + 1 < r.rows.size(); ++k) {
      auto pt = [&](std::size_t i) {
        return std::array<double, 3>{std::log(r.rows[i].alpha), std::log(std::max(r.rows[i].residual, 1e-300)),
                                     std::log(std::max(r.rows[i].solution_norm, 1e-300))};
      };
      const auto a = pt(k - 1), b = pt(k), c = pt(k + 1);
      const double h1 = b[0] - a[0], h2 = c[0] - b[0];
      auto d1 = [&](int i) { return (c[i] - a[i]) / (h1 + h2); };
      auto d2 = [&](int i) { return 2 * ((c[i] - b[i]) / h2 - (b[i] - a[i]) / h1) / (h1 + h2); };
      const double x1 = d1(1), y1 = d1(2), x2 = d2(1), y2 = d2(2);
      const double den = std::pow(x1 * x1 + y1 * y1, 1.5);
      const double kappa = den > 0 ? std::abs(x1 * y2 - y1 * x2) / den : 0;
      if (kappa > best) {
        best = kappa;
        r.chosen = k;
      }
    }
  }
  return r;
}

void write_solution(const std::string& path, const QrmSolution& s) {
  io::BinaryWriter w(path, "ATQ1");
  w.put<std::uint32_t>(1);
  w.put(s.grid.origin.x);
  w.put(s.grid.origin.y);
  w.put(s.grid.spacing);
  w.put<std::int32_t>(s.grid.n);
  w.put<std::int32_t>(s.n);
  w.put(s.alpha);
  w.put(s.rho);
  w.put(s.residual);
  w.put(s.solution_norm);
  w.put<std::uint64_t>(s.cg.iterations);
  w.put(s.cg.relative_residual);
  w.put<std::uint8_t>(s.cg.converged ? 1 : 0);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(s.v.size()));
  w.put_span(std::span<const double>(s.v.data(), static_cast<std::size_t>(s.v.size())));
  w.put_span(std::span<const double>(s.xi.values));
  w.put<std::uint64_t>(s.warnings.size());
  for (const auto& m : s.warnings) w.put_string(m);
  w.commit();
}

QrmSolution read_solution(const std::string& path) {
  io::BinaryReader r(path, "ATQ1");
  if (r.get<std::uint32_t>() != 1) fail(ErrorKind::kData, path + ": unsupported ATQ1 version");
  QrmSolution s;
  s.grid.origin.x = r.get<double>();
  s.grid.origin.y = r.get<double>();
  s.grid.spacing = r.get<double>();
  s.grid.n = r.get<std::int32_t>();
  s.n = r.get<std::int32_t>();
  s.alpha = r.get<double>();
  s.rho = r.get<double>();
  s.residual = r.get<double>();
  s.solution_norm = r.get<double>();
  s.cg.iterations = r.get<std::uint64_t>();
  s.cg.relative_residual = r.get<double>();
  s.cg.converged = r.get<std::uint8_t>() != 0;
  const auto nv = r.get<std::uint64_t>();
  auto v = r.get_vector<double>(nv);
  s.v = Eigen::Map<Vec>(v.data(), static_cast<Eigen::Index>(nv));
  s.xi = CoefficientField(s.grid, r.get_vector<double>(s.grid.size()));
  s.q = s.xi;
  for (auto& x : s.q.values) x += kBackground;
  const auto nw = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < nw; ++i) s.warnings.push_back(r.get_string());
  return s;
}

void write_sweep_csv(const std::string& path, const SweepResult& r) {
  std::ostringstream ss;
  ss.precision(10);
  ss << "alpha,residual,norm,error,chosen\n";
  for (std::size_t k = 0; k < r.rows.size(); ++k) {
    const auto& row = r.rows[k];
    ss << row.alpha << ',' << row.residual << ',' << row.solution_norm << ',';
    if (row.error) ss << *row.error;
    ss << ',' << (k == r.chosen ? 1 : 0) << '\n';
  }
  io::write_text(path, ss.str());
}

}  // namespace atomo::qrm
