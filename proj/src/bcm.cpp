#include "atomo/bcm.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <numbers>
#include <sstream>

#include "atomo/error.hpp"
#include "atomo/io.hpp"
#include "atomo/parallel.hpp"

namespace atomo::bcm {

namespace {
constexpr double kPi = std::numbers::pi;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
}  // namespace

double harmonic_value(int index, Point p) {
  require(index >= 0, "harmonic_value: negative index");
  if (index == 0) return 1.0;
  const auto z = std::pow(std::complex<double>(p.x, p.y), (index + 1) / 2);
  return index % 2 ? z.real() : z.imag();
}

HarmonicFamily harmonic_family(int k, const TriMesh& mesh, bool discrete_harmonic) {
  require(k >= 1, "harmonic family: K must be >= 1");
  const auto nn = static_cast<Eigen::Index>(mesh.node_count());
  HarmonicFamily f;
  f.k = k;
  f.values.resize(nn, 2 * k + 1);
  f.grad_x.resize(nn, 2 * k + 1);
  f.grad_y.resize(nn, 2 * k + 1);
  f.names.push_back("1");
  for (int j = 1; j <= k; ++j) {
    f.names.push_back("Re z^" + std::to_string(j));
    f.names.push_back("Im z^" + std::to_string(j));
  }
  for (Eigen::Index i = 0; i < nn; ++i) {
    const std::complex<double> z(mesh.nodes[static_cast<std::size_t>(i)].x, mesh.nodes[static_cast<std::size_t>(i)].y);
    f.values(i, 0) = 1;
    f.grad_x(i, 0) = f.grad_y(i, 0) = 0;
    for (int j = 1; j <= k; ++j) {
      const auto zj = std::pow(z, j);
      // d/dx z^j = j z^{j-1}, d/dy z^j = i j z^{j-1}
      const auto dz = static_cast<double>(j) * std::pow(z, j - 1);
      f.values(i, 2 * j - 1) = zj.real();
      f.values(i, 2 * j) = zj.imag();
      f.grad_x(i, 2 * j - 1) = dz.real();
      f.grad_y(i, 2 * j - 1) = -dz.imag();
      f.grad_x(i, 2 * j) = dz.imag();
      f.grad_y(i, 2 * j) = dz.real();
    }
  }
  if (!discrete_harmonic || mesh.triangles.empty()) return f;
  // interior values from K_II phi_I = -K_IB phi_B
  auto shared = std::make_shared<const TriMesh>(mesh);
  const auto unit = forward::assemble_fem(shared, std::vector<double>(mesh.triangles.size(), 1.0));
  std::vector<int> slot(mesh.node_count(), -1);
  for (auto v : mesh.boundary_nodes) slot[v] = -2;
  std::vector<std::uint32_t> inner;
  for (std::uint32_t v = 0; v < mesh.node_count(); ++v)
    if (slot[v] == -1) {
      slot[v] = static_cast<int>(inner.size());
      inner.push_back(v);
    }
  if (inner.empty()) return f;
  const auto ni = static_cast<Eigen::Index>(inner.size());
  std::vector<Eigen::Triplet<double>> tii;
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(ni, f.values.cols());
  for (int c = 0; c < unit.stiffness.outerSize(); ++c)
    for (forward::SpMat::InnerIterator it(unit.stiffness, c); it; ++it) {
      const int r = slot[static_cast<std::size_t>(it.row())];
      if (r < 0) continue;
      const int cc = slot[static_cast<std::size_t>(it.col())];
      if (cc >= 0)
        tii.emplace_back(r, cc, it.value());
      else
        rhs.row(r) -= it.value() * f.values.row(it.col());
    }
  forward::SpMat kii(ni, ni);
  kii.setFromTriplets(tii.begin(), tii.end());
  Eigen::SimplicialLDLT<forward::SpMat> ldlt(kii);
  if (ldlt.info() != Eigen::Success) fail(ErrorKind::kAssembly, "harmonic family: interior stiffness is singular");
  const Eigen::MatrixXd sol = ldlt.solve(rhs);
  for (Eigen::Index r = 0; r < ni; ++r) f.values.row(inner[static_cast<std::size_t>(r)]) = sol.row(r);
  return f;
}

ControlBasis make_control_basis(const TriMesh& mesh, const ControlBasisSpec& spec, double horizon, double dt_max) {
  require(spec.boundary >= 3 && spec.time >= 1, "control basis: need >= 3 boundary hats and >= 1 time pulse");
  require(horizon > 0 && dt_max > 0, "control basis: horizon and dt must be positive");
  ControlBasis b;
  b.spec = spec;
  b.horizon = horizon;
  b.steps = static_cast<std::size_t>(std::ceil(horizon / dt_max - 1e-9));
  b.dt = horizon / static_cast<double>(b.steps);
  const auto& bn = mesh.boundary_nodes;
  b.space = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(bn.size()), spec.boundary);
  const double width = 2 * kPi / spec.boundary;
  for (std::size_t i = 0; i < bn.size(); ++i) {
    const Point p = mesh.nodes[bn[i]];
    const double th = std::atan2(p.y, p.x);
    for (int c = 0; c < spec.boundary; ++c) {
      double d = std::remainder(th - width * c, 2 * kPi);
      b.space(static_cast<Eigen::Index>(i), c) = std::max(0.0, 1 - std::abs(d) / width);
    }
  }
  const auto nt = static_cast<Eigen::Index>(2 * b.steps + 1);
  b.time = Eigen::MatrixXd::Zero(nt, spec.time);
  const double step = horizon / (spec.time + 1), w = 2 * step;
  for (Eigen::Index n = 0; n < nt; ++n) {
    const double t = b.dt * static_cast<double>(n);
    for (int p = 0; p < spec.time; ++p) {
      const double s = t - step * p;
      if (s > 0 && s < w) b.time(n, p) = std::sin(kPi * s / w);
    }
  }
  return b;
}

Eigen::MatrixXd boundary_mass_block(const forward::FemSystem& sys) {
  const auto& bn = sys.mesh->boundary_nodes;
  const auto nb = static_cast<Eigen::Index>(bn.size());
  Eigen::MatrixXd b(nb, nb);
  for (Eigen::Index i = 0; i < nb; ++i)
    for (Eigen::Index j = 0; j < nb; ++j)
      b(i, j) = sys.boundary_mass.coeff(bn[static_cast<std::size_t>(i)], bn[static_cast<std::size_t>(j)]);
  return b;
}

ResponseBank simulate_responses(const forward::FemSystem& sys, const ControlBasis& basis) {
  const auto& mesh = *sys.mesh;
  require(static_cast<std::size_t>(basis.space.rows()) == mesh.boundary_nodes.size(),
          "responses: basis was built for another mesh");
  // fills the spectral cache before the workers read it
  forward::cfl_limit(sys, 0.9, forward::MassKind::kConsistent);
  ResponseBank bank;
  bank.basis = basis;
  const int ne = basis.size(), np = basis.spec.time;
  const auto nn = static_cast<Eigen::Index>(mesh.node_count());
  bank.final_states.resize(nn, ne);
  bank.traces.resize(static_cast<std::size_t>(ne));
  forward::IbvpOptions opts;
  opts.mass = forward::MassKind::kConsistent;
  opts.snapshot_times = {basis.horizon};
  parallel_for(static_cast<std::size_t>(ne), [&](std::size_t e) {
    const int c = static_cast<int>(e) / np, p = static_cast<int>(e) % np;
    const forward::BoundaryData data = [&](std::size_t k, double, std::vector<double>& f) {
      const double tv = basis.time(static_cast<Eigen::Index>(k), p);
      for (std::size_t i = 0; i < f.size(); ++i) f[i] = tv * basis.space(static_cast<Eigen::Index>(i), c);
    };
    auto res = forward::solve_neumann_ibvp(sys, data, 2 * basis.horizon, basis.dt, opts);
    if (res.traces.samples[0] != 2 * basis.steps + 1) fail(ErrorKind::kAssembly, "responses: time axis mismatch");
    bank.final_states.col(static_cast<Eigen::Index>(e)) = res.snapshots[0];
    bank.traces[e] = Eigen::Map<const RowMat>(res.traces.p0[0].data(), static_cast<Eigen::Index>(2 * basis.steps + 1),
                                              static_cast<Eigen::Index>(mesh.boundary_nodes.size()));
  });
  // Gram over boundary x (0, T): space part from the boundary mass, time part by the rectangle rule
  const Eigen::MatrixXd sb = basis.space.transpose() * boundary_mass_block(sys) * basis.space;
  const auto head = basis.time.topRows(static_cast<Eigen::Index>(basis.steps) + 1);
  const Eigen::MatrixXd tt = basis.dt * head.transpose() * head;
  bank.control_gram.resize(ne, ne);
  for (int a = 0; a < basis.spec.boundary; ++a)
    for (int b = 0; b < basis.spec.boundary; ++b)
      bank.control_gram.block(a * np, b * np, np, np) = sb(a, b) * tt;
  return bank;
}

H1Norm h1_norm(const TriMesh& mesh) {
  auto shared = std::make_shared<const TriMesh>(mesh);
  const auto unit = forward::assemble_fem(shared, std::vector<double>(mesh.triangles.size(), 1.0));
  return {unit.mass + unit.stiffness};
}

ControlSolution control_for_target(const Vec& h, const ResponseBank& bank, const H1Norm& norm, double reg,
                                   double ceiling, const std::string& name) {
  require(reg >= 0, "control_for_target: reg must be non-negative");
  require(h.size() == bank.final_states.rows(), "control_for_target: target has the wrong size");
  ControlSolution s;
  s.target = name;
  s.target_norm = norm(h);
  const auto& r = bank.final_states;
  const Eigen::MatrixXd gr = norm.gram * r;
  Eigen::MatrixXd lhs = r.transpose() * gr;
  const double scale = lhs.trace() / bank.control_gram.trace();
  lhs += reg * scale * bank.control_gram;
  // keep the normal matrix definite when reg = 0
  lhs.diagonal().array() += 1e-14 * lhs.diagonal().maxCoeff();
  const Vec rhs = gr.transpose() * h;
  if (rhs.norm() == 0) {
    s.coeffs = Vec::Zero(r.cols());
    s.final_state = Vec::Zero(r.rows());
    return s;
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(lhs);
  if (ldlt.info() != Eigen::Success) fail(ErrorKind::kFit, "control_for_target: normal matrix factorisation failed");
  s.coeffs = ldlt.solve(rhs);
  s.final_state = r * s.coeffs;
  s.residual = norm(s.final_state - h);
  s.energy = s.coeffs.dot(bank.control_gram * s.coeffs);
  if (s.residual > ceiling * s.target_norm) {
    std::ostringstream ss;
    ss << "controllability: residual for " << name << " is " << s.residual << " (" << s.residual / s.target_norm
       << " of ||h||)";
    s.warnings.push_back(ss.str());
  }
  return s;
}

forward::BoundaryTraceSet control_traces(const ResponseBank& bank, const Vec& coeffs, const TriMesh& mesh) {
  const auto& basis = bank.basis;
  require(coeffs.size() == basis.size(), "control_traces: coefficient vector has the wrong size");
  const auto nt = static_cast<Eigen::Index>(2 * basis.steps + 1);
  const auto nb = static_cast<Eigen::Index>(mesh.boundary_nodes.size());
  RowMat dir = RowMat::Zero(nt, nb);
  for (int e = 0; e < basis.size(); ++e)
    if (coeffs[e] != 0) dir += coeffs[e] * bank.traces[static_cast<std::size_t>(e)];
  const Eigen::Map<const RowMat> c(coeffs.data(), basis.spec.boundary, basis.spec.time);
  const RowMat neu = basis.time * c.transpose() * basis.space.transpose();
  forward::BoundaryTraceSet t;
  t.dt = basis.dt;
  for (auto v : mesh.boundary_nodes) {
    t.receivers.push_back(mesh.nodes[v]);
    t.normals.push_back((1.0 / norm(mesh.nodes[v])) * mesh.nodes[v]);
  }
  t.sources = {0};
  t.samples = {static_cast<std::size_t>(nt)};
  t.p0 = {std::vector<double>(dir.data(), dir.data() + dir.size())};
  t.p1 = {std::vector<double>(neu.data(), neu.data() + neu.size())};
  return t;
}

double bilinear_from_boundary(const forward::BoundaryTraceSet& f, const forward::BoundaryTraceSet& g,
                              const Eigen::MatrixXd& boundary_mass, double horizon) {
  require(!f.samples.empty() && !g.samples.empty() && !f.p1.empty() && !g.p1.empty(),
          "bilinear form: traces need Dirichlet and Neumann records");
  if (std::abs(f.dt - g.dt) > 1e-12 * f.dt) fail(ErrorKind::kInvalidArgument, "bilinear form: time steps differ");
  if (f.receiver_count() != g.receiver_count() ||
      static_cast<Eigen::Index>(f.receiver_count()) != boundary_mass.rows())
    fail(ErrorKind::kInvalidArgument, "bilinear form: boundary node sets differ");
  const double dt = f.dt;
  const auto n = static_cast<std::size_t>(std::llround(horizon / dt));
  if (std::abs(static_cast<double>(n) * dt - horizon) > 1e-9 * horizon)
    fail(ErrorKind::kInvalidArgument, "bilinear form: T is not a multiple of dt");
  if (f.samples[0] < 2 * n + 1 || g.samples[0] < 2 * n + 1)
    fail(ErrorKind::kInvalidArgument, "bilinear form: traces must cover [0, 2T]");
  const auto nb = static_cast<Eigen::Index>(f.receiver_count());
  const Eigen::Map<const RowMat> uf(f.p0[0].data(), static_cast<Eigen::Index>(f.samples[0]), nb);
  const Eigen::Map<const RowMat> ff(f.p1[0].data(), static_cast<Eigen::Index>(f.samples[0]), nb);
  const Eigen::Map<const RowMat> ug(g.p0[0].data(), static_cast<Eigen::Index>(g.samples[0]), nb);
  const Eigen::Map<const RowMat> gg(g.p1[0].data(), static_cast<Eigen::Index>(g.samples[0]), nb);
  const auto rows = static_cast<Eigen::Index>(n + 1), cols = static_cast<Eigen::Index>(2 * n + 1);
  // S(n, m) = f_n . B v_m - u_n . B g_m
  const Eigen::MatrixXd s = ff.topRows(rows) * boundary_mass * ug.topRows(cols).transpose() -
                            uf.topRows(rows) * boundary_mass * gg.topRows(cols).transpose();
  // W(0, m) = 0, W(1, m) = dt^2/2 F_0 . V_m, W(n, 0) = 0
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(rows, cols + 1);
  const double dt2 = dt * dt;
  if (n == 0) return 0.0;
  for (Eigen::Index m = 0; m < cols; ++m) w(1, m) = 0.5 * dt2 * (ff.row(0) * boundary_mass * ug.row(m).transpose())(0);
  w(1, 0) = 0;
  for (Eigen::Index k = 1; k + 1 < rows; ++k)
    for (Eigen::Index m = 1; m + 1 < cols - (k - 1); ++m)
      w(k + 1, m) = w(k, m + 1) + w(k, m - 1) - w(k - 1, m) + dt2 * s(k, m);
  return w(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
}

double bilinear_interior(const forward::FemSystem& sys, const Vec& uf, const Vec& ug) { return uf.dot(sys.mass * ug); }

BcmSystem assemble_bcm_system(const HarmonicFamily& family, const std::vector<ControlSolution>& controls,
                              const Eigen::MatrixXd& bilinear, const TriMesh& mesh) {
  const int nf = family.size();
  require(static_cast<int>(controls.size()) == nf, "assemble_bcm_system: one control per harmonic required");
  require(bilinear.rows() == nf && bilinear.cols() == nf, "assemble_bcm_system: bilinear matrix has the wrong size");
  BcmSystem sys;
  for (int a = 0; a < nf; ++a) {
    if (controls[static_cast<std::size_t>(a)].coeffs.size() == 0)
      fail(ErrorKind::kAssembly, "missing control for harmonic " + family.names[static_cast<std::size_t>(a)]);
    for (const auto& w : controls[static_cast<std::size_t>(a)].warnings) sys.warnings.push_back(w);
  }
  for (int a = 0; a < nf; ++a)
    for (int b = a; b < nf; ++b) sys.pairs.push_back({a, b});
  const auto np = static_cast<Eigen::Index>(sys.pairs.size());
  const auto nt = static_cast<Eigen::Index>(mesh.triangles.size());
  sys.a.resize(np, nt);
  sys.b.resize(np);
  for (Eigen::Index k = 0; k < nt; ++k) {
    const auto& t = mesh.triangles[static_cast<std::size_t>(k)];
    const auto me = forward::element_mass(mesh.nodes[t[0]], mesh.nodes[t[1]], mesh.nodes[t[2]]);
    for (Eigen::Index r = 0; r < np; ++r) {
      const auto [a, b] = sys.pairs[static_cast<std::size_t>(r)];
      double v = 0;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) v += me[i][j] * family.values(t[i], a) * family.values(t[j], b);
      sys.a(r, k) = v;
    }
  }
  for (Eigen::Index r = 0; r < np; ++r) {
    const auto [a, b] = sys.pairs[static_cast<std::size_t>(r)];
    sys.b[r] = 0.5 * (bilinear(a, b) + bilinear(b, a));
  }
  if (!sys.a.allFinite() || !sys.b.allFinite()) fail(ErrorKind::kAssembly, "BCM system has non-finite entries");
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(sys.a);
  const auto& sv = svd.singularValues();
  const double smin = sv[sv.size() - 1];
  sys.condition = smin > 0 ? sv[0] / smin : std::numeric_limits<double>::infinity();
  return sys;
}

Eigen::SparseMatrix<double> triangle_graph_laplacian(const TriMesh& mesh) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<std::uint32_t>> edges;
  for (std::uint32_t k = 0; k < mesh.triangles.size(); ++k) {
    const auto& t = mesh.triangles[k];
    for (int e = 0; e < 3; ++e) {
      auto a = t[e], b = t[(e + 1) % 3];
      if (a > b) std::swap(a, b);
      edges[{a, b}].push_back(k);
    }
  }
  std::vector<Eigen::Triplet<double>> trip;
  for (const auto& [edge, tris] : edges) {
    if (tris.size() != 2) continue;
    const auto a = static_cast<int>(tris[0]), b = static_cast<int>(tris[1]);
    trip.emplace_back(a, a, 1.0);
    trip.emplace_back(b, b, 1.0);
    trip.emplace_back(a, b, -1.0);
    trip.emplace_back(b, a, -1.0);
  }
  const auto n = static_cast<Eigen::Index>(mesh.triangles.size());
  Eigen::SparseMatrix<double> l(n, n);
  l.setFromTriplets(trip.begin(), trip.end());
  return l;
}

BcmSolution solve_bcm(const BcmSystem& sys, const TriMesh& mesh, double gamma) {
  require(gamma > 0, "solve_bcm: gamma must be positive");
  require(sys.a.cols() == static_cast<Eigen::Index>(mesh.triangles.size()), "solve_bcm: system/mesh mismatch");
  const Eigen::MatrixXd l = Eigen::MatrixXd(triangle_graph_laplacian(mesh));
  const Eigen::MatrixXd normal = sys.a.transpose() * sys.a + gamma * l.transpose() * l;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(normal);
  if (ldlt.info() != Eigen::Success) fail(ErrorKind::kDivergence, "solve_bcm: normal matrix factorisation failed");
  const Vec q = ldlt.solve(sys.a.transpose() * sys.b);
  if (!q.allFinite()) fail(ErrorKind::kDivergence, "solve_bcm: non-finite solution");
  BcmSolution s;
  s.gamma = gamma;
  s.q_triangles.assign(q.data(), q.data() + q.size());
  s.residual = (sys.a * q - sys.b).norm();
  s.penalty = (l * q).norm();
  return s;
}

CoefficientField resample_to_grid(const TriMesh& mesh, const std::vector<double>& qt, const UniformGrid& grid) {
  require(qt.size() == mesh.triangles.size(), "resample: one value per triangle required");
  std::vector<double> num(mesh.node_count(), 0.0), den(mesh.node_count(), 0.0);
  for (std::size_t k = 0; k < qt.size(); ++k) {
    const double a = std::abs(mesh.signed_area(k));
    for (auto v : mesh.triangles[k]) {
      num[v] += a * qt[k];
      den[v] += a;
    }
  }
  for (std::size_t v = 0; v < num.size(); ++v) num[v] = den[v] > 0 ? num[v] / den[v] : 0.0;
  const PointLocator loc(mesh);
  CoefficientField out(grid, 0.0);
  for (int i = 0; i < grid.n; ++i)
    for (int j = 0; j < grid.n; ++j) {
      const Point p = grid.node(i, j);
      double v;
      try {
        v = loc.interpolate(loc.locate(p), num.data());
      } catch (const Error&) {
        // square corners sit on the circle, just outside the polygonal mesh
        std::size_t best = 0;
        double bd = 1e300;
        for (std::size_t n = 0; n < mesh.node_count(); ++n)
          if (dist(mesh.nodes[n], p) < bd) {
            bd = dist(mesh.nodes[n], p);
            best = n;
          }
        v = num[best];
      }
      out.values[grid.index(i, j)] = v;
    }
  return out;
}

void write_bcm(const std::string& path, const BcmSystem& sys, const BcmSolution& sol) {
  io::BinaryWriter w(path, "ATB1");
  w.put<std::uint32_t>(1);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(sys.a.rows()));
  w.put<std::uint64_t>(static_cast<std::uint64_t>(sys.a.cols()));
  for (const auto& p : sys.pairs) {
    w.put<std::int32_t>(p[0]);
    w.put<std::int32_t>(p[1]);
  }
  const RowMat a = sys.a;
  w.put_span(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())));
  w.put_span(std::span<const double>(sys.b.data(), static_cast<std::size_t>(sys.b.size())));
  w.put(sys.condition);
  w.put(sol.gamma);
  w.put(sol.residual);
  w.put(sol.penalty);
  w.put<std::uint64_t>(sol.q_triangles.size());
  w.put_span(std::span<const double>(sol.q_triangles));
  w.put<std::uint64_t>(sys.warnings.size());
  for (const auto& m : sys.warnings) w.put_string(m);
  w.commit();
}

BcmRecord read_bcm(const std::string& path) {
  io::BinaryReader r(path, "ATB1");
  if (r.get<std::uint32_t>() != 1) fail(ErrorKind::kData, path + ": unsupported ATB1 version");
  BcmRecord rec;
  const auto rows = r.get<std::uint64_t>(), cols = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < rows; ++i) {
    const int a = r.get<std::int32_t>();
    const int b = r.get<std::int32_t>();
    rec.system.pairs.push_back({a, b});
  }
  auto a = r.get_vector<double>(rows * cols);
  rec.system.a = Eigen::Map<RowMat>(a.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  auto b = r.get_vector<double>(rows);
  rec.system.b = Eigen::Map<Vec>(b.data(), static_cast<Eigen::Index>(rows));
  rec.system.condition = r.get<double>();
  rec.solution.gamma = r.get<double>();
  rec.solution.residual = r.get<double>();
  rec.solution.penalty = r.get<double>();
  rec.solution.q_triangles = r.get_vector<double>(r.get<std::uint64_t>());
  const auto nw = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < nw; ++i) rec.system.warnings.push_back(r.get_string());
  return rec;
}

}  // namespace atomo::bcm
