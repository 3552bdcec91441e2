#include "atomo/forward.hpp"

#include <Eigen/SparseCholesky>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "atomo/error.hpp"
#include "atomo/io.hpp"

namespace atomo::forward {

namespace {
constexpr double kPi = std::numbers::pi;

// degree-4 symmetric rule on the reference triangle (barycentric, weights sum to 1)
struct QuadPoint {
  double l0, l1, l2, w;
};
constexpr double kA = 0.445948490915965, kB = 0.091576213509771;
constexpr double kWa = 0.223381589678011, kWb = 0.109951743655322;
constexpr QuadPoint kRule[6] = {
    {kA, kA, 1 - 2 * kA, kWa}, {kA, 1 - 2 * kA, kA, kWa}, {1 - 2 * kA, kA, kA, kWa},
    {kB, kB, 1 - 2 * kB, kWb}, {kB, 1 - 2 * kB, kB, kWb}, {1 - 2 * kB, kB, kB, kWb},
};
}  // namespace

double sample_bilinear(const CoefficientField& f, Point p, double outside) {
  const auto& g = f.grid;
  const double u = (p.x - g.origin.x) / g.spacing, v = (p.y - g.origin.y) / g.spacing;
  const double top = g.n - 1;
  if (!(u >= 0 && v >= 0 && u <= top && v <= top)) return outside;
  const int j = std::min(static_cast<int>(u), g.n - 2), i = std::min(static_cast<int>(v), g.n - 2);
  const double a = u - j, b = v - i;
  return (1 - a) * (1 - b) * f.at(i, j) + a * (1 - b) * f.at(i, j + 1) + (1 - a) * b * f.at(i + 1, j) +
         a * b * f.at(i + 1, j + 1);
}

std::vector<double> triangle_coefficients(const TriMesh& mesh, const CoefficientField& q, double background) {
  std::vector<double> out(mesh.triangles.size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    const auto& t = mesh.triangles[k];
    const Point c = (1.0 / 3.0) * (mesh.nodes[t[0]] + mesh.nodes[t[1]] + mesh.nodes[t[2]]);
    out[k] = sample_bilinear(q, c, background);
  }
  return out;
}

std::array<std::array<double, 3>, 3> element_mass(Point a, Point b, Point c) {
  const double area = 0.5 * cross(b - a, c - a);
  std::array<std::array<double, 3>, 3> m{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m[i][j] = area / (i == j ? 6.0 : 12.0);
  return m;
}

std::array<std::array<double, 3>, 3> element_stiffness(Point a, Point b, Point c) {
  const double area = 0.5 * cross(b - a, c - a);
  const Point p[3] = {a, b, c};
  double gb[3], gc[3];
  for (int i = 0; i < 3; ++i) {
    const Point& pj = p[(i + 1) % 3];
    const Point& pk = p[(i + 2) % 3];
    gb[i] = pj.y - pk.y;
    gc[i] = pk.x - pj.x;
  }
  std::array<std::array<double, 3>, 3> k{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) k[i][j] = (gb[i] * gb[j] + gc[i] * gc[j]) / (4 * area);
  return k;
}

FemSystem assemble_fem(std::shared_ptr<const TriMesh> mesh_ptr, std::vector<double> q) {
  const TriMesh& mesh = *mesh_ptr;
  require(q.size() == mesh.triangles.size(), "assemble_fem: one coefficient per triangle required");
  const auto n = static_cast<Eigen::Index>(mesh.nodes.size());
  std::vector<Eigen::Triplet<double>> tm, tk, ta;
  tm.reserve(9 * q.size());
  tk.reserve(9 * q.size());
  ta.reserve(9 * q.size());
  double area_scale = 0;
  for (std::size_t k = 0; k < q.size(); ++k) area_scale = std::max(area_scale, std::abs(mesh.signed_area(k)));
  for (std::size_t k = 0; k < q.size(); ++k) {
    const auto& t = mesh.triangles[k];
    const double area = mesh.signed_area(k);
    if (!(area > 1e-14 * area_scale))
      fail(ErrorKind::kAssembly, "degenerate triangle " + std::to_string(k) + " (signed area " +
                                     std::to_string(area) + ")");
    if (!(q[k] >= 1.0) || !std::isfinite(q[k]))
      fail(ErrorKind::kAssembly, "triangle " + std::to_string(k) + " has inadmissible q = " + std::to_string(q[k]));
    const auto me = element_mass(mesh.nodes[t[0]], mesh.nodes[t[1]], mesh.nodes[t[2]]);
    const auto ke = element_stiffness(mesh.nodes[t[0]], mesh.nodes[t[1]], mesh.nodes[t[2]]);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        tm.emplace_back(t[i], t[j], q[k] * me[i][j]);
        ta.emplace_back(t[i], t[j], me[i][j]);
        tk.emplace_back(t[i], t[j], ke[i][j]);
      }
  }
  FemSystem s;
  s.mesh = mesh_ptr;
  s.mass.resize(n, n);
  s.stiffness.resize(n, n);
  s.mass.setFromTriplets(tm.begin(), tm.end());
  s.stiffness.setFromTriplets(tk.begin(), tk.end());
  SpMat area_mass(n, n);
  area_mass.setFromTriplets(ta.begin(), ta.end());

  std::vector<Eigen::Triplet<double>> tb;
  const auto& bn = mesh.boundary_nodes;
  for (std::size_t e = 0; e < bn.size(); ++e) {
    const auto a = bn[e], b = bn[(e + 1) % bn.size()];
    const double len = dist(mesh.nodes[a], mesh.nodes[b]);
    tb.emplace_back(a, a, len / 3);
    tb.emplace_back(b, b, len / 3);
    tb.emplace_back(a, b, len / 6);
    tb.emplace_back(b, a, len / 6);
  }
  s.boundary_mass.resize(n, n);
  s.boundary_mass.setFromTriplets(tb.begin(), tb.end());

  const Vec ones = Vec::Ones(n);
  s.lumped = s.mass * ones;
  s.area_lumped = area_mass * ones;
  s.boundary_lumped = s.boundary_mass * ones;
  s.q = std::move(q);
  s.q_min = *std::min_element(s.q.begin(), s.q.end());
  s.q_max = *std::max_element(s.q.begin(), s.q.end());
  s.h_min = mesh.min_edge();
  return s;
}

FemSystem assemble_fem(std::shared_ptr<const TriMesh> mesh, const CoefficientField& q, double background) {
  auto qt = triangle_coefficients(*mesh, q, background);
  return assemble_fem(std::move(mesh), std::move(qt));
}

double ricker(double t, double f0) {
  const double t0 = 1.5 / f0;
  const double a = kPi * kPi * f0 * f0 * (t - t0) * (t - t0);
  return (1 - 2 * a) * std::exp(-a);
}

double cap_delta(double r, double eps) {
  if (!(r < eps)) return 0.0;
  // int_0^1 exp(-1/(1-s^2)) s ds = (e^-1 - E1(1))/2, E1(1) = -Ei(-1)
  static const double kI = 0.5 * (std::exp(-1.0) + std::expint(-1.0));
  const double c = 1.0 / (2 * kPi * eps * eps * kI);
  return c * std::exp(-eps * eps / (eps * eps - r * r));
}

Vec cap_load(const TriMesh& mesh, Point c, double eps) {
  Vec load = Vec::Zero(static_cast<Eigen::Index>(mesh.nodes.size()));
  for (std::size_t k = 0; k < mesh.triangles.size(); ++k) {
    const auto& t = mesh.triangles[k];
    const Point a = mesh.nodes[t[0]], b = mesh.nodes[t[1]], d = mesh.nodes[t[2]];
    const double rmin = std::min({dist(a, c), dist(b, c), dist(d, c)});
    if (rmin > eps + std::max({dist(a, b), dist(b, d), dist(d, a)})) continue;
    const double area = mesh.signed_area(k);
    for (const auto& qp : kRule) {
      const Point x = qp.l0 * a + qp.l1 * b + qp.l2 * d;
      const double v = cap_delta(dist(x, c), eps) * qp.w * area;
      load[t[0]] += v * qp.l0;
      load[t[1]] += v * qp.l1;
      load[t[2]] += v * qp.l2;
    }
  }
  const double s = load.sum();
  if (!(s > 0)) fail(ErrorKind::kInvalidArgument, "cap source does not overlap the mesh (eps too small?)");
  return load / s;
}

ControlWaveform ControlWaveform::ricker_at(std::uint32_t node, double f0) {
  ControlWaveform w;
  w.kind = Kind::kRicker;
  w.f0 = f0;
  w.nodes = {node};
  return w;
}

bool ControlWaveform::active_after(double t) const {
  switch (kind) {
    case Kind::kRicker:
    case Kind::kCapDelta:
      return t < 3.0 / f0;
    case Kind::kTabulated:
      return nodes.empty() ? false : t < dt_table * static_cast<double>(table.size() / nodes.size());
  }
  return false;
}

void ControlWaveform::nodal_values(double t, const TriMesh& mesh, std::vector<double>& out) const {
  const auto& bn = mesh.boundary_nodes;
  out.assign(bn.size(), 0.0);
  auto pos = [&](std::uint32_t node) -> std::size_t {
    auto it = std::find(bn.begin(), bn.end(), node);
    if (it == bn.end()) fail(ErrorKind::kInvalidArgument, "control node " + std::to_string(node) + " is not a boundary node");
    return static_cast<std::size_t>(it - bn.begin());
  };
  switch (kind) {
    case Kind::kRicker:
      for (auto nd : nodes) out[pos(nd)] = amplitude * ricker(t, f0);
      break;
    case Kind::kCapDelta: {
      require(!nodes.empty(), "cap-delta control needs a centre node");
      const Point c = mesh.nodes[nodes[0]];
      const double g = amplitude * ricker(t, f0);
      for (std::size_t i = 0; i < bn.size(); ++i) out[i] = g * cap_delta(dist(mesh.nodes[bn[i]], c), eps);
      break;
    }
    case Kind::kTabulated: {
      if (nodes.empty()) break;
      const std::size_t m = nodes.size(), rows = table.size() / m;
      if (rows == 0 || t < 0) break;
      const double u = t / dt_table;
      const auto k = static_cast<std::size_t>(std::floor(u));
      if (k + 1 >= rows && !(k + 1 == rows && u == static_cast<double>(k))) break;
      const double a = u - static_cast<double>(k);
      for (std::size_t i = 0; i < m; ++i) {
        const double v0 = table[k * m + i];
        const double v1 = (k + 1 < rows) ? table[(k + 1) * m + i] : 0.0;
        out[pos(nodes[i])] += amplitude * ((1 - a) * v0 + a * v1);
      }
      break;
    }
  }
}

std::array<double, 3> one_sided_weights(double a, double b) {
  return {1 / a + 1 / (a + b), -(a + b) / (a * b), a / (b * (a + b))};
}

namespace {

Probe interpolation_probe(const PointLocator& loc, const TriMesh& mesh, Point p) {
  const auto hit = loc.locate(p);
  Probe pr;
  for (int i = 0; i < 3; ++i) {
    pr.idx.push_back(mesh.triangles[hit.triangle][i]);
    pr.w.push_back(hit.bary[i]);
  }
  return pr;
}

Probe combine(const std::vector<std::pair<double, Probe>>& parts) {
  Probe out;
  for (const auto& [c, p] : parts)
    for (std::size_t i = 0; i < p.idx.size(); ++i) {
      out.idx.push_back(p.idx[i]);
      out.w.push_back(c * p.w[i]);
    }
  return out;
}

bool rings_aligned(const TriMesh& m, int r0, int r1) {
  if (m.ring_size(r0) != m.ring_size(r1)) return false;
  for (std::size_t i = 0; i < m.ring_size(r0); ++i) {
    const Point a = m.nodes[m.ring_start[r0] + i], b = m.nodes[m.ring_start[r1] + i];
    if (std::abs(cross(a, b)) > 1e-12 * norm(a) * norm(b) || dot(a, b) <= 0) return false;
  }
  return true;
}

}  // namespace

ReceiverSet ring_receivers(const TriMesh& mesh, int ring, int stride) {
  require(ring >= 1 && ring < static_cast<int>(mesh.ring_count()), "ring_receivers: ring index out of range");
  require(stride >= 1 && mesh.ring_size(ring) % stride == 0, "ring_receivers: stride must divide the ring size");
  ReceiverSet rs;
  std::unique_ptr<PointLocator> loc;
  const double r0 = mesh.ring_radius[ring];
  const bool aligned = ring >= 2 && rings_aligned(mesh, ring, ring - 1) && rings_aligned(mesh, ring, ring - 2);
  if (!aligned) {
    loc = std::make_unique<PointLocator>(mesh);
    if (ring < 2) rs.warnings.push_back("normal derivative: fewer than two interior rings, first-order difference");
  }
  for (std::size_t i = 0; i < mesh.ring_size(ring); i += stride) {
    const auto node = static_cast<std::uint32_t>(mesh.ring_start[ring] + i);
    const Point x = mesh.nodes[node];
    const Point nu = (1.0 / norm(x)) * x;
    rs.positions.push_back(x);
    rs.normals.push_back(nu);
    rs.value.push_back(Probe{{node}, {1.0}});
    const double a = r0 - mesh.ring_radius[ring - 1];
    if (aligned) {
      const double b = mesh.ring_radius[ring - 1] - mesh.ring_radius[ring - 2];
      const auto w = one_sided_weights(a, b);
      rs.flux.push_back(Probe{{node, static_cast<std::uint32_t>(mesh.ring_start[ring - 1] + i),
                               static_cast<std::uint32_t>(mesh.ring_start[ring - 2] + i)},
                              {w[0], w[1], w[2]}});
    } else if (ring >= 2) {
      const double b = mesh.ring_radius[ring - 1] - mesh.ring_radius[ring - 2];
      const auto w = one_sided_weights(a, b);
      rs.flux.push_back(combine({{w[0], Probe{{node}, {1.0}}},
                                 {w[1], interpolation_probe(*loc, mesh, x - a * nu)},
                                 {w[2], interpolation_probe(*loc, mesh, x - (a + b) * nu)}}));
    } else {
      rs.flux.push_back(combine({{1 / a, Probe{{node}, {1.0}}}, {-1 / a, interpolation_probe(*loc, mesh, x - a * nu)}}));
    }
  }
  return rs;
}

ReceiverSet point_receivers(const TriMesh& mesh, const std::vector<Point>& pts, const std::vector<Point>& normals,
                            double delta) {
  require(pts.size() == normals.size(), "point_receivers: one normal per point");
  require(delta > 0, "point_receivers: delta must be positive");
  PointLocator loc(mesh);
  ReceiverSet rs;
  const auto w = one_sided_weights(delta, delta);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    rs.positions.push_back(pts[i]);
    rs.normals.push_back(normals[i]);
    const Probe p0 = interpolation_probe(loc, mesh, pts[i]);
    rs.value.push_back(p0);
    rs.flux.push_back(combine({{w[0], p0},
                               {w[1], interpolation_probe(loc, mesh, pts[i] - delta * normals[i])},
                               {w[2], interpolation_probe(loc, mesh, pts[i] - 2 * delta * normals[i])}}));
  }
  return rs;
}

std::vector<double> BoundaryTraceSet::series(std::size_t b, std::size_t r, bool flux) const {
  const auto& blk = flux ? p1.at(b) : p0.at(b);
  require(!blk.empty(), "trace block has no data");
  const std::size_t nr = receivers.size();
  std::vector<double> s(samples[b]);
  for (std::size_t k = 0; k < s.size(); ++k) s[k] = blk[k * nr + r];
  return s;
}

void BoundaryTraceSet::append(const BoundaryTraceSet& o) {
  if (receivers.empty()) {
    dt = o.dt;
    receivers = o.receivers;
    normals = o.normals;
  }
  require(o.dt == dt && o.receivers.size() == receivers.size(), "trace sets have mismatched time axes or receivers");
  sources.insert(sources.end(), o.sources.begin(), o.sources.end());
  samples.insert(samples.end(), o.samples.begin(), o.samples.end());
  p0.insert(p0.end(), o.p0.begin(), o.p0.end());
  p1.insert(p1.end(), o.p1.begin(), o.p1.end());
  warnings.insert(warnings.end(), o.warnings.begin(), o.warnings.end());
}

void write_traces(const std::string& path, const BoundaryTraceSet& t) {
  io::BinaryWriter w(path, "ATT1");
  w.put<std::uint32_t>(1);
  w.put<double>(t.dt);
  w.put<std::uint64_t>(t.receivers.size());
  for (std::size_t i = 0; i < t.receivers.size(); ++i) {
    w.put(t.receivers[i].x);
    w.put(t.receivers[i].y);
    w.put(t.normals[i].x);
    w.put(t.normals[i].y);
  }
  w.put<std::uint64_t>(t.sources.size());
  for (std::size_t b = 0; b < t.sources.size(); ++b) {
    w.put<std::int64_t>(t.sources[b]);
    w.put<std::uint64_t>(t.samples[b]);
    const bool has_p1 = b < t.p1.size() && !t.p1[b].empty();
    w.put<std::uint8_t>(has_p1 ? 1 : 0);
    w.put_span<double>(t.p0[b]);
    if (has_p1) w.put_span<double>(t.p1[b]);
  }
  w.put<std::uint64_t>(t.warnings.size());
  for (const auto& s : t.warnings) w.put_string(s);
  w.commit();
}

BoundaryTraceSet read_traces(const std::string& path) {
  io::BinaryReader r(path, "ATT1");
  if (r.get<std::uint32_t>() != 1) fail(ErrorKind::kData, path + ": unsupported ATT1 version");
  BoundaryTraceSet t;
  t.dt = r.get<double>();
  const auto nr = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < nr; ++i) {
    Point p{r.get<double>(), r.get<double>()};
    Point n{r.get<double>(), r.get<double>()};
    t.receivers.push_back(p);
    t.normals.push_back(n);
  }
  const auto nb = r.get<std::uint64_t>();
  for (std::uint64_t b = 0; b < nb; ++b) {
    t.sources.push_back(r.get<std::int64_t>());
    t.samples.push_back(r.get<std::uint64_t>());
    const bool has_p1 = r.get<std::uint8_t>() != 0;
    t.p0.push_back(r.get_vector<double>(t.samples.back() * nr));
    t.p1.push_back(has_p1 ? r.get_vector<double>(t.samples.back() * nr) : std::vector<double>{});
  }
  const auto nw = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < nw; ++i) t.warnings.push_back(r.get_string());
  return t;
}

void write_traces_csv(const std::string& path, const BoundaryTraceSet& t, std::size_t b) {
  require(b < t.sources.size(), "trace block index out of range");
  std::ostringstream ss;
  ss.precision(12);
  ss << "t";
  for (std::size_t r = 0; r < t.receivers.size(); ++r) ss << ",p0_" << r;
  const bool flux = b < t.p1.size() && !t.p1[b].empty();
  if (flux)
    for (std::size_t r = 0; r < t.receivers.size(); ++r) ss << ",p1_" << r;
  ss << '\n';
  const std::size_t nr = t.receivers.size();
  for (std::size_t k = 0; k < t.samples[b]; ++k) {
    ss << t.dt * static_cast<double>(k);
    for (std::size_t r = 0; r < nr; ++r) ss << ',' << t.p0[b][k * nr + r];
    if (flux)
      for (std::size_t r = 0; r < nr; ++r) ss << ',' << t.p1[b][k * nr + r];
    ss << '\n';
  }
  io::write_text(path, ss.str());
}

// ---------------------------------------------------------------- time stepping

struct Leapfrog::Factor {
  Eigen::SimplicialLDLT<SpMat> ldlt;
};

Leapfrog::Leapfrog(const FemSystem& sys, double dt, MassKind mass, Vec damping, SpMat extra)
    : sys_(&sys), dt_(dt), mass_(mass), c_(std::move(damping)), k_(sys.stiffness) {
  require(dt > 0, "time step must be positive");
  const auto n = sys.stiffness.rows();
  if (c_.size() == 0) c_ = Vec::Zero(n);
  if (extra.nonZeros() > 0) k_ += extra;
  if (mass_ == MassKind::kConsistent) {
    factor_ = std::make_shared<Factor>();
    SpMat a = sys.mass / (dt * dt);
    for (Eigen::Index i = 0; i < n; ++i) a.coeffRef(i, i) += c_[i] / (2 * dt);
    factor_->ldlt.compute(a);
    if (factor_->ldlt.info() != Eigen::Success) fail(ErrorKind::kAssembly, "mass matrix factorisation failed");
  }
  u_ = Vec::Zero(n);
  u_prev_ = Vec::Zero(n);
}

Vec Leapfrog::apply_mass(const Vec& v) const {
  return mass_ == MassKind::kLumped ? Vec(sys_->lumped.cwiseProduct(v)) : Vec(sys_->mass * v);
}

Vec Leapfrog::solve_mass(const Vec& r) const {
  if (mass_ == MassKind::kLumped) return r.cwiseQuotient(sys_->lumped);
  Eigen::SimplicialLDLT<SpMat> s(sys_->mass);
  return s.solve(r);
}

void Leapfrog::start(const Vec& u0, const Vec& v0, const Vec& f0) {
  const Vec a0 = solve_mass(f0 - k_ * u0 - c_.cwiseProduct(v0));
  u_prev_ = u0;
  u_ = u0 + dt_ * v0 + 0.5 * dt_ * dt_ * a0;
  n_ = 1;
}

void Leapfrog::step(const Vec& f) {
  const double dt2 = dt_ * dt_;
  Vec rhs = f - k_ * u_ + apply_mass(2 * u_ - u_prev_) / dt2 + c_.cwiseProduct(u_prev_) / (2 * dt_);
  Vec next;
  if (mass_ == MassKind::kLumped)
    next = rhs.cwiseQuotient(sys_->lumped / dt2 + c_ / (2 * dt_));
  else
    next = factor_->ldlt.solve(rhs);
  u_prev_ = std::move(u_);
  u_ = std::move(next);
  ++n_;
}

double Leapfrog::discrete_energy() const {
  const Vec v = (u_ - u_prev_) / dt_;
  return 0.5 * v.dot(apply_mass(v)) + 0.5 * u_.dot(k_ * u_prev_);
}

// Power iteration on M^-1 K.  The lumped mass dominates the consistent one
// (element-wise M_L - M_c = A/12 (3I - 11^T) >= 0), so the consistent
// spectrum is the larger of the two and needs its own estimate.
double max_frequency_squared(const FemSystem& sys, MassKind mass) {
  double& cache = mass == MassKind::kLumped ? sys.lambda_lumped : sys.lambda_consistent;
  if (cache >= 0) return cache;
  const auto n = sys.stiffness.rows();
  Eigen::SimplicialLDLT<SpMat> ldlt;
  if (mass == MassKind::kConsistent) {
    ldlt.compute(sys.mass);
    if (ldlt.info() != Eigen::Success) fail(ErrorKind::kAssembly, "mass matrix factorisation failed");
  }
  auto apply_m = [&](const Vec& v) { return mass == MassKind::kLumped ? Vec(sys.lumped.cwiseProduct(v)) : Vec(sys.mass * v); };
  auto solve_m = [&](const Vec& v) { return mass == MassKind::kLumped ? Vec(v.cwiseQuotient(sys.lumped)) : Vec(ldlt.solve(v)); };
  Vec x(n);
  for (Eigen::Index i = 0; i < n; ++i) x[i] = (i % 2 ? 1.0 : -1.0) * (1.0 + 0.01 * static_cast<double>(i % 7));
  x /= std::sqrt(x.dot(apply_m(x)));
  double lambda = 0;
  for (int it = 0; it < 2000; ++it) {
    const Vec kx = sys.stiffness * x;
    const double l = x.dot(kx);  // x is M-normalised
    Vec y = solve_m(kx);
    const double nrm = std::sqrt(y.dot(apply_m(y)));
    if (nrm == 0) return cache = 0;
    x = y / nrm;
    if (std::abs(l - lambda) <= 1e-9 * l) {
      lambda = l;
      break;
    }
    lambda = l;
  }
  return cache = lambda;
}

// the configured rule, capped by the spectral bound (the rule alone is not
// sufficient for P1 leapfrog on these meshes)
double cfl_limit(const FemSystem& sys, double cfl_const, MassKind mass) {
  const double rule = cfl_const * sys.h_min * std::sqrt(sys.q_min);
  const double lam = max_frequency_squared(sys, mass);
  return lam > 0 ? std::min(rule, kSpectralMargin * 2 / std::sqrt(lam)) : rule;
}

namespace {

void check_dt(const FemSystem& sys, double dt, double cfl_const, MassKind mass) {
  const double rule = cfl_const * sys.h_min * std::sqrt(sys.q_min);
  if (dt > rule * (1 + 1e-12)) {
    std::ostringstream ss;
    ss << "dt = " << dt << " exceeds " << cfl_const << "*h_min*sqrt(q_min) = " << rule;
    fail(ErrorKind::kStability, ss.str());
  }
  const double lam = max_frequency_squared(sys, mass);
  if (lam > 0 && dt > kSpectralMargin * 2 / std::sqrt(lam) * (1 + 1e-12)) {
    std::ostringstream ss;
    ss << "dt = " << dt << " exceeds the leapfrog spectral bound 2/sqrt(lambda_max) = " << 2 / std::sqrt(lam);
    fail(ErrorKind::kStability, ss.str());
  }
}

void check_finite(const Vec& u, std::size_t step) {
  if (!u.allFinite()) fail(ErrorKind::kDivergence, "non-finite solution at step " + std::to_string(step));
}

}  // namespace

IbvpResult solve_neumann_ibvp(const FemSystem& sys, const BoundaryData& data, double horizon, double dt,
                              const IbvpOptions& opts) {
  require(horizon > 0 && dt > 0, "solve_neumann_ibvp: horizon and dt must be positive");
  const auto steps = static_cast<std::size_t>(std::ceil(horizon / dt - 1e-9));
  dt = horizon / static_cast<double>(steps);
  if (opts.check_cfl) check_dt(sys, dt, opts.cfl_const, opts.mass);

  const TriMesh& mesh = *sys.mesh;
  const auto& bn = mesh.boundary_nodes;
  const std::size_t nb = bn.size();
  const auto n = sys.stiffness.rows();

  IbvpResult res;
  auto& tr = res.traces;
  tr.dt = dt;
  for (auto v : bn) {
    tr.receivers.push_back(mesh.nodes[v]);
    tr.normals.push_back((1.0 / norm(mesh.nodes[v])) * mesh.nodes[v]);
  }
  tr.sources = {0};
  tr.samples = {steps + 1};
  tr.p0.assign(1, std::vector<double>((steps + 1) * nb, 0.0));
  tr.p1.assign(1, std::vector<double>((steps + 1) * nb, 0.0));

  std::vector<std::size_t> snap_steps;
  for (double ts : opts.snapshot_times) {
    require(ts >= 0 && ts <= horizon * (1 + 1e-12), "snapshot time outside [0, horizon]");
    snap_steps.push_back(static_cast<std::size_t>(std::llround(ts / dt)));
  }
  res.snapshots.assign(snap_steps.size(), Vec::Zero(n));

  std::vector<double> fb(nb);
  Vec fnodal = Vec::Zero(n);
  auto load = [&](std::size_t k) -> Vec {
    data(k, dt * static_cast<double>(k), fb);
    fnodal.setZero();
    for (std::size_t i = 0; i < nb; ++i) {
      fnodal[bn[i]] = fb[i];
      tr.p1[0][k * nb + i] = fb[i];
    }
    return sys.boundary_mass * fnodal;
  };
  auto record = [&](std::size_t k, const Vec& u) {
    for (std::size_t i = 0; i < nb; ++i) tr.p0[0][k * nb + i] = u[bn[i]];
    for (std::size_t s = 0; s < snap_steps.size(); ++s)
      if (snap_steps[s] == k) res.snapshots[s] = u;
  };

  Leapfrog lf(sys, dt, opts.mass);
  const Vec zero = Vec::Zero(n);
  record(0, zero);
  lf.start(zero, zero, load(0));
  record(1, lf.u());
  for (std::size_t k = 1; k < steps; ++k) {
    lf.step(load(k));
    record(k + 1, lf.u());
    if (k % 64 == 0) check_finite(lf.u(), k + 1);
  }
  load(steps);  // flux record at the final time
  check_finite(lf.u(), steps);
  res.final_state = lf.u();
  return res;
}

IbvpResult solve_neumann_ibvp(const FemSystem& sys, const ControlWaveform& control, double horizon, double dt,
                              const IbvpOptions& opts) {
  const TriMesh& mesh = *sys.mesh;
  std::vector<double> buf;
  return solve_neumann_ibvp(
      sys,
      [&](std::size_t, double t, std::vector<double>& f) {
        control.nodal_values(t, mesh, buf);
        f = buf;
      },
      horizon, dt, opts);
}

BoundaryTraceSet solve_cauchy_absorbing(const FemSystem& sys, Point source, const ReceiverSet& rec, double horizon,
                                        double dt, const CauchyOptions& opts) {
  require(horizon > 0 && dt > 0, "solve_cauchy_absorbing: horizon and dt must be positive");
  const TriMesh& mesh = *sys.mesh;
  const auto steps = static_cast<std::size_t>(std::ceil(horizon / dt - 1e-9));
  dt = horizon / static_cast<double>(steps);
  check_dt(sys, dt, opts.cfl_const, MassKind::kLumped);
  const auto n = sys.stiffness.rows();

  // q-hat: mean of q over S
  double qa = 0, area = 0;
  for (std::size_t k = 0; k < sys.q.size(); ++k) {
    qa += sys.q[k] * mesh.signed_area(k);
    area += mesh.signed_area(k);
  }
  const double qhat = qa / area;
  Vec damping = Vec::Zero(n);
  SpMat robin(n, n);
  if (opts.absorbing) {
    damping = std::sqrt(qhat) * sys.boundary_lumped;
    std::vector<Eigen::Triplet<double>> tr;
    for (auto v : mesh.boundary_nodes) tr.emplace_back(v, v, sys.boundary_lumped[v] / (2 * mesh.radius));
    robin.setFromTriplets(tr.begin(), tr.end());
  }

  const double eps = opts.eps > 0 ? opts.eps : 2 * mesh.max_edge();
  const Vec v0 = cap_load(mesh, source, eps).cwiseQuotient(sys.lumped);

  BoundaryTraceSet out;
  out.dt = dt;
  out.receivers = rec.positions;
  out.normals = rec.normals;
  const std::size_t nr = rec.size();
  std::vector<double> p0, p1;
  p0.reserve((steps + 1) * nr);
  p1.reserve((steps + 1) * nr);
  auto record = [&](const Vec& u) {
    for (std::size_t r = 0; r < nr; ++r) {
      p0.push_back(rec.value[r].apply(u));
      p1.push_back(rec.flux[r].apply(u));
    }
  };

  Leapfrog lf(sys, dt, MassKind::kLumped, damping, robin);
  const Vec zero = Vec::Zero(n);
  record(zero);
  lf.start(zero, v0, zero);
  record(lf.u());
  const double t_min = 2 * mesh.radius * std::sqrt(sys.q_max);
  std::size_t k = 1;
  double l2 = 0;
  bool decayed = false;
  for (; k < steps; ++k) {
    lf.step(zero);
    record(lf.u());
    if ((k + 1) % opts.check_every == 0) {
      check_finite(lf.u(), k + 1);
      if (dt * static_cast<double>(k + 1) >= t_min) {
        l2 = std::sqrt(lf.u().cwiseAbs2().dot(sys.area_lumped));
        if (l2 <= opts.stop_norm) {
          decayed = true;
          ++k;
          break;
        }
      }
    }
  }
  check_finite(lf.u(), k);
  if (!decayed) {
    l2 = std::sqrt(lf.u().cwiseAbs2().dot(sys.area_lumped));
    std::ostringstream ss;
    ss << "non-decay-warning: horizon " << horizon << " reached with ||v||_2 = " << l2;
    out.warnings.push_back(ss.str());
  }
  out.sources = {0};
  out.samples = {p0.size() / nr};
  out.p0 = {std::move(p0)};
  out.p1 = {std::move(p1)};
  out.warnings.insert(out.warnings.end(), rec.warnings.begin(), rec.warnings.end());
  return out;
}

}  // namespace atomo::forward
