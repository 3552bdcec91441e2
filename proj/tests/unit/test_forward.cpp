#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "atomo/error.hpp"
#include "atomo/forward.hpp"

using namespace atomo;
using namespace atomo::forward;

namespace {

std::shared_ptr<const TriMesh> disk(double h, double r = 1.0, DiskMeshOptions o = {}) {
  return std::make_shared<const TriMesh>(triangulate_disk(r, h, o));
}

FemSystem constant_system(std::shared_ptr<const TriMesh> m, double q) {
  return assemble_fem(m, std::vector<double>(m->triangles.size(), q));
}

double simpson(const std::function<double(double)>& f, double a, double b, int n) {
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int k = 1; k < n; ++k) s += (k % 2 ? 4 : 2) * f(a + k * h);
  return s * h / 3;
}

}  // namespace

TEST_CASE("element matrices on the unit right triangle") {
  const auto m = element_mass({0, 0}, {1, 0}, {0, 1});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(m[i][j] == doctest::Approx(i == j ? 0.5 / 6 : 0.5 / 12).epsilon(1e-15));
  const auto k = element_stiffness({0, 0}, {1, 0}, {0, 1});
  CHECK(k[0][0] == doctest::Approx(1.0));
  CHECK(k[1][1] == doctest::Approx(0.5));
  CHECK(k[0][1] == doctest::Approx(-0.5));
  CHECK(k[1][2] == doctest::Approx(0.0));
}

TEST_CASE("assembly: linearity in q, constants in the stiffness kernel, symmetry") {
  auto m = disk(0.3);
  auto s1 = constant_system(m, 1.0);
  auto s2 = constant_system(m, 2.0);
  CHECK((s2.mass - 2 * s1.mass).norm() <= 1e-14 * s1.mass.norm());
  CHECK((s2.stiffness - s1.stiffness).norm() == 0.0);
  const Vec ones = Vec::Ones(s1.stiffness.rows());
  CHECK((s1.stiffness * ones).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((SpMat(s1.mass.transpose()) - s1.mass).norm() == 0.0);
  CHECK(s1.lumped.minCoeff() > 0);
  CHECK(s1.area_lumped.sum() == doctest::Approx(m->total_area()).epsilon(1e-12));
  CHECK(s1.boundary_lumped.sum() == doctest::Approx(2 * std::numbers::pi).epsilon(0.02));
}

TEST_CASE("assembly rejects degenerate triangles and inadmissible q") {
  auto m = std::make_shared<TriMesh>(triangulate_disk(1.0, 0.5));
  auto bad = std::make_shared<TriMesh>(*m);
  bad->nodes[bad->triangles[3][2]] = bad->nodes[bad->triangles[3][0]];
  CHECK_THROWS_AS(assemble_fem(bad, std::vector<double>(bad->triangles.size(), 1.0)), Error);
  try {
    assemble_fem(bad, std::vector<double>(bad->triangles.size(), 1.0));
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kAssembly);
    CHECK(std::string(e.what()).find("triangle") != std::string::npos);
  }
  CHECK_THROWS_AS(assemble_fem(m, std::vector<double>(m->triangles.size(), 0.5)), Error);
}

TEST_CASE("ricker and cap normalisation") {
  CHECK(ricker(1.5 / 3.0, 3.0) == doctest::Approx(1.0));
  const double f0 = 3.0;
  CHECK(std::abs(simpson([&](double t) { return ricker(t, f0); }, 0, 3 / f0, 4000)) <= 1e-6);
  const double eps = 0.07;
  const double mass = simpson([&](double r) { return cap_delta(r, eps) * 2 * std::numbers::pi * r; }, 0, eps, 20000);
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(cap_delta(eps, eps) == 0.0);
  auto m = disk(0.1);
  CHECK(cap_load(*m, {0.1, 0.2}, 0.2).sum() == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("one-sided normal derivative stencils") {
  auto m = std::make_shared<const TriMesh>(triangulate_cauchy_disk(1.0, 1.25, 0.1, 16, 0.0));
  const int ring = m->find_ring(1.0);
  auto rec = ring_receivers(*m, ring, static_cast<int>(m->ring_size(ring) / 16));
  CHECK(rec.size() == 16);
  CHECK(rec.warnings.empty());
  Vec lin(m->nodes.size()), r2(m->nodes.size()), one = Vec::Ones(m->nodes.size());
  for (std::size_t i = 0; i < m->nodes.size(); ++i) {
    lin[i] = 0.3 * m->nodes[i].x - 1.1 * m->nodes[i].y;
    r2[i] = dot(m->nodes[i], m->nodes[i]);
  }
  for (std::size_t k = 0; k < rec.size(); ++k) {
    const Point nu = rec.normals[k];
    CHECK(rec.flux[k].apply(lin) == doctest::Approx(0.3 * nu.x - 1.1 * nu.y).epsilon(1e-12));
    CHECK(rec.flux[k].apply(r2) == doctest::Approx(2.0).epsilon(1e-10));
    CHECK(std::abs(rec.flux[k].apply(one)) < 1e-12);
  }
  // unaligned mesh falls back to interpolated points; still exact on linears
  auto plain = disk(0.1);
  auto rp = ring_receivers(*plain, static_cast<int>(plain->ring_count() - 1));
  Vec lin2(plain->nodes.size());
  for (std::size_t i = 0; i < plain->nodes.size(); ++i) lin2[i] = plain->nodes[i].x + 2 * plain->nodes[i].y;
  CHECK(rp.flux[3].apply(lin2) == doctest::Approx(rp.normals[3].x + 2 * rp.normals[3].y).epsilon(1e-10));
  auto first = ring_receivers(*plain, 1);
  CHECK(!first.warnings.empty());
}

TEST_CASE("zero control gives zero traces") {
  auto m = disk(0.25);
  auto s = constant_system(m, 1.0);
  ControlWaveform zero;
  zero.kind = ControlWaveform::Kind::kTabulated;
  auto r = solve_neumann_ibvp(s, zero, 1.0, 0.02);
  for (double v : r.traces.p0[0]) CHECK(v == 0.0);
  CHECK(r.final_state.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("CFL violation is a stability error") {
  auto m = disk(0.25);
  auto s = constant_system(m, 1.0);
  auto c = ControlWaveform::ricker_at(m->boundary_nodes[0], 2.0);
  try {
    solve_neumann_ibvp(s, c, 1.0, 0.3);
    FAIL("expected stability error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kStability);
  }
  // the step actually used respects both the configured rule and the
  // spectral bound, for either mass
  const double rule = 0.9 * s.h_min * std::sqrt(s.q_min);
  for (auto mk : {MassKind::kLumped, MassKind::kConsistent}) {
    const double lim = cfl_limit(s, 0.9, mk);
    CHECK(lim <= rule);
    CHECK(lim < 2 / std::sqrt(max_frequency_squared(s, mk)));
    IbvpOptions o;
    o.mass = mk;
    CHECK_NOTHROW(solve_neumann_ibvp(s, c, 0.5, lim, o));
  }
  CHECK(max_frequency_squared(s, MassKind::kConsistent) > max_frequency_squared(s, MassKind::kLumped));
}

TEST_CASE("discrete energy is conserved once the control is off") {
  auto m = disk(0.1);
  auto s = constant_system(m, 1.0);
  const double f0 = 3.0, dt = 0.5 * cfl_limit(s);
  auto ctrl = ControlWaveform::ricker_at(m->boundary_nodes[0], f0);
  Leapfrog lf(s, dt, MassKind::kLumped);
  std::vector<double> fb;
  Vec f = Vec::Zero(s.stiffness.rows()), nodal = Vec::Zero(s.stiffness.rows());
  auto load = [&](double t) {
    ctrl.nodal_values(t, *m, fb);
    nodal.setZero();
    for (std::size_t i = 0; i < fb.size(); ++i) nodal[m->boundary_nodes[i]] = fb[i];
    return Vec(s.boundary_mass * nodal);
  };
  const Vec zero = Vec::Zero(s.stiffness.rows());
  lf.start(zero, zero, load(0));
  std::size_t k = 1;
  while (ctrl.active_after(k * dt)) lf.step(load(k++ * dt));
  lf.step(zero);
  const double e0 = lf.discrete_energy();
  CHECK(e0 > 0);
  for (int i = 0; i < 1000; ++i) lf.step(zero);
  CHECK(std::abs(lf.discrete_energy() - e0) <= 1e-6 * e0);
}

TEST_CASE("manufactured solution converges at second order") {
  const double q = 2.0, pi = std::numbers::pi, T = 0.5;
  auto exact = [&](Point x, double t) { return std::sin(pi * x.x) * std::sin(pi * x.y) * t * t; };
  auto err_at = [&](double h) {
    auto m = disk(h);
    auto s = constant_system(m, q);
    const double dt0 = 0.2 * cfl_limit(s);
    const auto steps = static_cast<std::size_t>(std::ceil(T / dt0));
    const double dt = T / steps;
    const auto n = s.stiffness.rows();
    // unit-q consistent mass for the volume load
    auto s1 = constant_system(m, 1.0);
    auto load = [&](double t) {
      Vec src(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const Point x = m->nodes[i];
        src[i] = (2 * q + 2 * pi * pi * t * t) * std::sin(pi * x.x) * std::sin(pi * x.y);
      }
      Vec f = s1.mass * src;
      // flux of the exact solution through the polygonal boundary, 2-point Gauss
      const auto& bn = m->boundary_nodes;
      for (std::size_t e = 0; e < bn.size(); ++e) {
        const auto a = bn[e], b = bn[(e + 1) % bn.size()];
        const Point pa = m->nodes[a], pb = m->nodes[b];
        const double len = dist(pa, pb);
        const Point nu{(pb.y - pa.y) / len, -(pb.x - pa.x) / len};
        for (double g : {0.5 - 0.5 / std::sqrt(3.0), 0.5 + 0.5 / std::sqrt(3.0)}) {
          const Point x = (1 - g) * pa + g * pb;
          const double dx = pi * std::cos(pi * x.x) * std::sin(pi * x.y) * t * t;
          const double dy = pi * std::sin(pi * x.x) * std::cos(pi * x.y) * t * t;
          const double flux = dx * nu.x + dy * nu.y;
          f[a] += 0.5 * len * flux * (1 - g);
          f[b] += 0.5 * len * flux * g;
        }
      }
      return f;
    };
    Leapfrog lf(s, dt, MassKind::kLumped);
    const Vec zero = Vec::Zero(n);
    lf.start(zero, zero, load(0));
    for (std::size_t k = 1; k < steps; ++k) lf.step(load(k * dt));
    double e2 = 0, u2 = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double ue = exact(m->nodes[i], T);
      e2 += s1.lumped[i] * (lf.u()[i] - ue) * (lf.u()[i] - ue);
      u2 += s1.lumped[i] * ue * ue;
    }
    return std::sqrt(e2 / u2);
  };
  const double e1 = err_at(0.1), e2 = err_at(0.05);
  MESSAGE("manufactured errors " << e1 << " " << e2 << " order " << std::log2(e1 / e2));
  CHECK(std::log2(e1 / e2) >= 1.8);
}

TEST_CASE("pulse reaches the antipode after diameter*sqrt(q)") {
  const double q = 1.0, f0 = 4.0;
  auto m = disk(0.02);
  auto s = constant_system(m, q);
  const auto src = m->boundary_nodes[0];
  const std::size_t anti = m->boundary_nodes.size() / 2;
  auto ctrl = ControlWaveform::ricker_at(src, f0);
  auto r = solve_neumann_ibvp(s, ctrl, 2.0 * std::sqrt(q) + 3 / f0, 0.5 * cfl_limit(s));
  auto u = r.traces.series(0, anti);
  double peak = 0;
  for (double v : u) peak = std::max(peak, std::abs(v));
  std::size_t k = 0;
  while (std::abs(u[k]) < 0.1 * peak) ++k;
  double ts = 0;
  while (std::abs(ricker(ts, f0)) < 0.1) ts += 1e-4;
  const double travel = k * r.traces.dt - ts;
  const double expected = dist(m->nodes[src], m->nodes[m->boundary_nodes[anti]]) * std::sqrt(q);
  MESSAGE("travel " << travel << " expected " << expected);
  CHECK(std::abs(travel - expected) <= 0.1 * expected);
}

TEST_CASE("causality: traces vanish before 0.5*d*sqrt(q_min)") {
  const double q = 4.0, f0 = 2.0;
  auto m = disk(0.05);
  auto s = constant_system(m, q);
  const auto src = m->boundary_nodes[0];
  auto r = solve_neumann_ibvp(s, ControlWaveform::ricker_at(src, f0), 6.0, 0.5 * cfl_limit(s));
  double peak = 0;
  for (double v : r.traces.p0[0]) peak = std::max(peak, std::abs(v));
  const std::size_t nb = m->boundary_nodes.size();
  for (std::size_t b = 0; b < nb; ++b) {
    const double d = dist(m->nodes[src], m->nodes[m->boundary_nodes[b]]);
    const double tq = 0.5 * d * std::sqrt(s.q_min);
    for (std::size_t k = 0; k * r.traces.dt < tq; ++k) CHECK(std::abs(r.traces.p0[0][k * nb + b]) <= 1e-8 * peak);
  }
}

TEST_CASE("traces are invariant under rotating the mesh by one transducer spacing") {
  const int M = 16;
  auto q_of = [](const TriMesh& m) {
    std::vector<double> q(m.triangles.size());
    for (std::size_t k = 0; k < q.size(); ++k) {
      const auto& t = m.triangles[k];
      const Point c = (1.0 / 3.0) * (m.nodes[t[0]] + m.nodes[t[1]] + m.nodes[t[2]]);
      q[k] = 4.0 + 0.4 * std::exp(-dot(c, c) / 0.1);
    }
    return q;
  };
  auto run = [&](double offset, int source) {
    auto m = std::make_shared<const TriMesh>(triangulate_cauchy_disk(1.0, 1.25, 0.08, M, offset));
    auto s = assemble_fem(m, q_of(*m));
    const int ring = m->find_ring(1.0);
    const int stride = static_cast<int>(m->ring_size(ring)) / M;
    auto rec = ring_receivers(*m, ring, stride);
    return solve_cauchy_absorbing(s, rec.positions[source], rec, 4.0, 0.5 * cfl_limit(s));
  };
  // the rotated problem with the rotated source must reproduce the traces
  // receiver by receiver
  auto a = run(0.0, 3);
  auto b = run(2 * std::numbers::pi / M, 3);
  REQUIRE(a.samples[0] == b.samples[0]);
  double diff = 0, ref = 0;
  for (std::size_t k = 0; k < a.samples[0]; ++k)
    for (int r = 0; r < M; ++r) {
      const double ua = a.p0[0][k * M + r], ub = b.p0[0][k * M + r];
      diff += (ua - ub) * (ua - ub);
      ref += ua * ua;
    }
  CHECK(std::sqrt(diff / ref) <= 1e-6);
}

TEST_CASE("reciprocity of the Cauchy traces") {
  const int M = 16;
  auto m = std::make_shared<const TriMesh>(triangulate_cauchy_disk(1.0, 1.25, 0.02, M, 0.0));
  std::vector<double> q(m->triangles.size());
  for (std::size_t k = 0; k < q.size(); ++k) {
    const auto& t = m->triangles[k];
    const Point c = (1.0 / 3.0) * (m->nodes[t[0]] + m->nodes[t[1]] + m->nodes[t[2]]);
    q[k] = 4.0 + 0.5 * std::exp(-dist(c, {0.2, -0.1}) * dist(c, {0.2, -0.1}) / 0.05);
  }
  auto s = assemble_fem(m, q);
  const int ring = m->find_ring(1.0);
  auto rec = ring_receivers(*m, ring, static_cast<int>(m->ring_size(ring)) / M);
  const double dt = 0.5 * cfl_limit(s);
  CauchyOptions o;
  o.stop_norm = 0;
  auto a = solve_cauchy_absorbing(s, rec.positions[2], rec, 5.0, dt, o);
  auto b = solve_cauchy_absorbing(s, rec.positions[9], rec, 5.0, dt, o);
  const auto ab = a.series(0, 9), ba = b.series(0, 2);
  REQUIRE(ab.size() == ba.size());
  double diff = 0, ref = 0;
  for (std::size_t k = 0; k < ab.size(); ++k) {
    diff += (ab[k] - ba[k]) * (ab[k] - ba[k]);
    ref += ab[k] * ab[k];
  }
  MESSAGE("reciprocity mismatch " << std::sqrt(diff / ref));
  CHECK(std::sqrt(diff / ref) <= 0.05);
}

TEST_CASE("absorbing boundary reflects at most 5% at normal incidence") {
  // The inner part of the big mesh coincides with the small one, so the
  // difference at a receiver is what the artificial boundary sends back.
  // The returning wave is read between its arrival and the time a second
  // bounce could arrive; the pulse is resolved (cap width 5h).
  const double h = 0.05, q = 4.0, rs = 1.25, r = 1.0, eps = 0.25;
  auto small = disk(h, rs);
  auto big = disk(h, 3.5);
  const auto rnode = small->ring_start[small->find_ring(r)];
  REQUIRE(dist(small->nodes[rnode], big->nodes[rnode]) < 1e-12);
  auto probe = [&](const TriMesh& m) {
    ReceiverSet rec;
    rec.positions = {m.nodes[rnode]};
    rec.normals = {{1, 0}};
    rec.value = {Probe{{rnode}, {1.0}}};
    rec.flux = {Probe{}};
    return rec;
  };
  auto ss = constant_system(small, q), sb = constant_system(big, q);
  const double dt = 0.5 * std::min(cfl_limit(ss), cfl_limit(sb));
  CauchyOptions o;
  o.stop_norm = 0;
  o.eps = eps;
  auto us = solve_cauchy_absorbing(ss, {0, 0}, probe(*small), 10.0, dt, o);
  o.absorbing = false;  // reflections from r = 3.5 arrive after t = 12
  auto ub = solve_cauchy_absorbing(sb, {0, 0}, probe(*big), 10.0, dt, o);
  const double c = std::sqrt(q);
  const double t_ret = (2 * rs - r) * c, t_second = t_ret + 2 * rs * c;
  double outgoing = 0, returning = 0, late = 0;
  for (std::size_t k = 0; k < std::min(us.samples[0], ub.samples[0]); ++k) {
    const double t = k * dt, d = std::abs(us.p0[0][k] - ub.p0[0][k]);
    outgoing = std::max(outgoing, std::abs(ub.p0[0][k]));
    if (t >= t_ret - eps * c && t < t_second) returning = std::max(returning, d);
    late = std::max(late, d);
  }
  MESSAGE("returning/outgoing " << returning / outgoing << ", late-time wake mismatch " << late / outgoing);
  CHECK(returning / outgoing <= 0.05);
}

TEST_CASE("trace container round trip") {
  BoundaryTraceSet t;
  t.dt = 0.1;
  t.receivers = {{1, 0}, {0, 1}};
  t.normals = {{1, 0}, {0, 1}};
  t.sources = {3};
  t.samples = {3};
  t.p0 = {{1, 2, 3, 4, 5, 6}};
  t.p1 = {{}};
  t.warnings = {"w"};
  const auto path = (std::filesystem::temp_directory_path() / "atomo_traces_test.att").string();
  write_traces(path, t);
  auto r = read_traces(path);
  CHECK(r.p0 == t.p0);
  CHECK(r.sources == t.sources);
  CHECK(r.warnings == t.warnings);
  CHECK(r.series(0, 1) == std::vector<double>{2, 4, 6});
  std::filesystem::remove(path);
}
