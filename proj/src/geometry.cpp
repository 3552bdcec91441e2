#include "atomo/geometry.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "atomo/error.hpp"
#include "atomo/io.hpp"

namespace atomo {

namespace {
constexpr double kPi = std::numbers::pi;
}

Disk::Disk(Point c, double r) : center(c), radius(r) {
  require(r > 0, "disk radius must be positive");
}

std::array<Point, 4> Square::corners() const {
  const double a = side / 2;
  return {Point{center.x - a, center.y - a}, Point{center.x + a, center.y - a},
          Point{center.x + a, center.y + a}, Point{center.x - a, center.y + a}};
}

Point Square::at(double s, double t) const {
  return {center.x + side * s - side / 2, center.y + side * t - side / 2};
}

Square inscribed_square(double radius) {
  require(radius > 0, "inscribed_square: radius must be positive");
  return Square{{0.0, 0.0}, radius * std::numbers::sqrt2};
}

UniformGrid build_uniform_grid(double side, int n) {
  require(n >= 2, "build_uniform_grid: n must be >= 2");
  require(side > 0, "build_uniform_grid: side must be positive");
  UniformGrid g;
  g.n = n;
  g.spacing = side / (n - 1);
  g.origin = {-side / 2, -side / 2};
  return g;
}

UniformGrid inscribed_grid(double radius, int n) {
  return build_uniform_grid(inscribed_square(radius).side, n);
}

GridBoundary grid_boundary(const UniformGrid& g) {
  GridBoundary b;
  const int n = g.n;
  auto push = [&](int i, int j, Point nu) {
    b.nodes.push_back(g.index(i, j));
    b.normals.push_back(nu);
    b.ij.push_back({i, j});
  };
  // bottom row (corners excluded), right column, top row, left column
  push(0, 0, {-1, 0});
  for (int j = 1; j < n - 1; ++j) push(0, j, {0, -1});
  for (int i = 0; i < n; ++i) push(i, n - 1, {1, 0});
  for (int j = n - 2; j >= 1; --j) push(n - 1, j, {0, 1});
  for (int i = n - 1; i >= 1; --i) push(i, 0, {-1, 0});
  return b;
}

TransducerRing::TransducerRing(Disk c, int n, double t0) : circle(c), count(n), theta0(t0) {
  require(n >= 3, "transducer ring needs at least 3 transducers");
}

TransducerRing TransducerRing::staggered(Disk c, int n) { return TransducerRing(c, n, kPi / n); }

Point TransducerRing::position(int j) const {
  const double a = angle(j);
  return {circle.center.x + circle.radius * std::cos(a), circle.center.y + circle.radius * std::sin(a)};
}
Point TransducerRing::normal(int j) const {
  const double a = angle(j);
  return {std::cos(a), std::sin(a)};
}
Point TransducerRing::tangent(int j) const {
  const double a = angle(j);
  return {-std::sin(a), std::cos(a)};
}

double TriMesh::signed_area(std::size_t k) const {
  const auto& t = triangles[k];
  return 0.5 * cross(nodes[t[1]] - nodes[t[0]], nodes[t[2]] - nodes[t[0]]);
}

double TriMesh::total_area() const {
  double a = 0;
  for (std::size_t k = 0; k < triangles.size(); ++k) a += signed_area(k);
  return a;
}

double TriMesh::min_edge() const {
  double m = std::numeric_limits<double>::infinity();
  for (const auto& t : triangles)
    for (int e = 0; e < 3; ++e) m = std::min(m, dist(nodes[t[e]], nodes[t[(e + 1) % 3]]));
  return m;
}

double TriMesh::max_edge() const {
  double m = 0;
  for (const auto& t : triangles)
    for (int e = 0; e < 3; ++e) m = std::max(m, dist(nodes[t[e]], nodes[t[(e + 1) % 3]]));
  return m;
}

int TriMesh::find_ring(double r) const {
  for (std::size_t k = 0; k < ring_radius.size(); ++k)
    if (std::abs(ring_radius[k] - r) <= 1e-12 * std::max(1.0, r)) return static_cast<int>(k);
  return -1;
}

namespace {

void add_triangle(TriMesh& m, std::uint32_t a, std::uint32_t b, std::uint32_t c) {
  std::array<std::uint32_t, 3> t{a, b, c};
  if (cross(m.nodes[b] - m.nodes[a], m.nodes[c] - m.nodes[a]) < 0) std::swap(t[1], t[2]);
  m.triangles.push_back(t);
}

// Zip two concentric rings into triangles, always advancing the ring whose
// next node has the smaller unwrapped angle.
void stitch(TriMesh& m, std::size_t inner, std::size_t outer, const std::vector<double>& angle0) {
  const std::uint32_t si = m.ring_start[inner], so = m.ring_start[outer];
  const std::size_t a = m.ring_size(inner), b = m.ring_size(outer);
  const double da = 2 * kPi / a, db = 2 * kPi / b;
  // first outer node at or before the first inner node, in angle
  const double rel = angle0[inner] - angle0[outer];
  auto j0 = static_cast<long>(std::floor(rel / db + 1e-9));
  double alpha = angle0[inner];
  double beta = angle0[outer] + j0 * db;
  auto jmod = [b](long j) { return static_cast<std::uint32_t>(((j % static_cast<long>(b)) + b) % b); };
  std::size_t i = 0, j = 0;
  while (i < a || j < b) {
    const double na = alpha + da, nb = beta + db;
    const bool take_inner = j == b || (i < a && na <= nb + 1e-12);
    const std::uint32_t ci = si + static_cast<std::uint32_t>(i % a);
    const std::uint32_t co = so + jmod(j0 + static_cast<long>(j));
    if (take_inner) {
      add_triangle(m, ci, si + static_cast<std::uint32_t>((i + 1) % a), co);
      alpha = na;
      ++i;
    } else {
      add_triangle(m, ci, co, so + jmod(j0 + static_cast<long>(j) + 1));
      beta = nb;
      ++j;
    }
  }
}

}  // namespace

TriMesh triangulate_disk(double radius, double target_h, const DiskMeshOptions& opts) {
  require(radius > 0, "triangulate_disk: radius must be positive");
  require(target_h > 0 && target_h < radius, "triangulate_disk: need 0 < target_h < radius");

  std::vector<double> breaks{0.0, radius};
  for (double r : opts.required_radii) {
    require(r > 0 && r <= radius, "triangulate_disk: required radius outside the disk");
    breaks.push_back(r);
  }
  std::sort(breaks.begin(), breaks.end());
  breaks.erase(std::unique(breaks.begin(), breaks.end()), breaks.end());

  TriMesh m;
  m.radius = radius;
  m.ring_radius.push_back(0.0);
  for (std::size_t s = 0; s + 1 < breaks.size(); ++s) {
    const double a = breaks[s], b = breaks[s + 1];
    const int k = std::max(1, static_cast<int>(std::ceil((b - a) / target_h - 1e-9)));
    for (int q = 1; q <= k; ++q) m.ring_radius.push_back(q == k ? b : a + (b - a) * q / k);
  }

  std::vector<double> angle0;
  m.ring_start.push_back(0);
  m.nodes.push_back({0.0, 0.0});
  angle0.push_back(0.0);
  for (std::size_t r = 1; r < m.ring_radius.size(); ++r) {
    m.ring_start.push_back(static_cast<std::uint32_t>(m.nodes.size()));
    const double rr = m.ring_radius[r];
    int cnt = std::max(6, static_cast<int>(std::ceil(2 * kPi * rr / (0.95 * target_h) - 1e-9)));
    if (opts.aligned_count > 0 && rr >= opts.aligned_from - 1e-12) cnt = opts.aligned_count;
    angle0.push_back(opts.angle_offset);
    for (int i = 0; i < cnt; ++i) {
      const double th = opts.angle_offset + 2 * kPi * i / cnt;
      m.nodes.push_back({rr * std::cos(th), rr * std::sin(th)});
    }
  }
  m.ring_start.push_back(static_cast<std::uint32_t>(m.nodes.size()));

  // centre fan
  const std::size_t n1 = m.ring_size(1);
  for (std::size_t i = 0; i < n1; ++i)
    add_triangle(m, 0, m.ring_start[1] + static_cast<std::uint32_t>(i),
                 m.ring_start[1] + static_cast<std::uint32_t>((i + 1) % n1));
  for (std::size_t r = 1; r + 1 < m.ring_radius.size(); ++r) stitch(m, r, r + 1, angle0);

  const std::size_t last = m.ring_radius.size() - 1;
  for (std::uint32_t v = m.ring_start[last]; v < m.ring_start[last + 1]; ++v) m.boundary_nodes.push_back(v);
  for (std::size_t k = 0; k < m.triangles.size(); ++k)
    if (!(m.signed_area(k) > 0)) fail(ErrorKind::kAssembly, "mesh generator produced degenerate triangle " + std::to_string(k));
  return m;
}

TriMesh triangulate_cauchy_disk(double r_inner, double r_outer, double target_h, int transducers,
                                double angle_offset) {
  require(r_outer > r_inner && r_inner > 0, "cauchy mesh: need 0 < R < R_S");
  require(transducers >= 3, "cauchy mesh: need at least 3 transducers");
  const int k_in = std::max(3, static_cast<int>(std::ceil(r_inner / target_h - 1e-9)));
  const double dr = r_inner / k_in;
  DiskMeshOptions o;
  o.angle_offset = angle_offset + kPi / transducers;
  o.required_radii = {r_inner};
  const int per = std::max(1, static_cast<int>(std::ceil(2 * kPi * r_outer / (target_h * transducers) - 1e-9)));
  o.aligned_count = per * transducers;
  o.aligned_from = r_inner - 2 * dr;
  return triangulate_disk(r_outer, dr, o);
}

PointLocator::PointLocator(const TriMesh& mesh) : mesh_(&mesh) {
  double r = mesh.radius;
  lo_ = {-r, -r};
  nx_ = std::max(1, static_cast<int>(std::sqrt(static_cast<double>(mesh.triangles.size())) / 2));
  cell_ = 2 * r / nx_;
  buckets_.assign(static_cast<std::size_t>(nx_) * nx_, {});
  auto clampi = [this](double v) { return std::clamp(static_cast<int>(std::floor(v)), 0, nx_ - 1); };
  for (std::uint32_t k = 0; k < mesh.triangles.size(); ++k) {
    const auto& t = mesh.triangles[k];
    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    for (auto v : t) {
      x0 = std::min(x0, mesh.nodes[v].x);
      x1 = std::max(x1, mesh.nodes[v].x);
      y0 = std::min(y0, mesh.nodes[v].y);
      y1 = std::max(y1, mesh.nodes[v].y);
    }
    for (int i = clampi((y0 - lo_.y) / cell_); i <= clampi((y1 - lo_.y) / cell_); ++i)
      for (int j = clampi((x0 - lo_.x) / cell_); j <= clampi((x1 - lo_.x) / cell_); ++j)
        buckets_[static_cast<std::size_t>(i) * nx_ + j].push_back(k);
  }
}

PointLocator::Hit PointLocator::locate(Point p) const {
  const int i = static_cast<int>(std::floor((p.y - lo_.y) / cell_));
  const int j = static_cast<int>(std::floor((p.x - lo_.x) / cell_));
  if (i >= 0 && j >= 0 && i < nx_ && j < nx_) {
    Hit best;
    double best_min = -1e300;
    for (auto k : buckets_[static_cast<std::size_t>(i) * nx_ + j]) {
      const auto& t = mesh_->triangles[k];
      const Point a = mesh_->nodes[t[0]], b = mesh_->nodes[t[1]], c = mesh_->nodes[t[2]];
      const double area = cross(b - a, c - a);
      std::array<double, 3> l{cross(b - p, c - p) / area, cross(c - p, a - p) / area, 0.0};
      l[2] = 1.0 - l[0] - l[1];
      const double mn = std::min({l[0], l[1], l[2]});
      if (mn > best_min) {
        best_min = mn;
        best = {k, l};
      }
    }
    if (best_min >= -1e-10) return best;
  }
  fail(ErrorKind::kInvalidArgument,
       "point (" + std::to_string(p.x) + ", " + std::to_string(p.y) + ") lies outside the mesh");
}

double PointLocator::interpolate(const Hit& hit, const double* values) const {
  const auto& t = mesh_->triangles[hit.triangle];
  return hit.bary[0] * values[t[0]] + hit.bary[1] * values[t[1]] + hit.bary[2] * values[t[2]];
}

void write_mesh(const std::string& path, const TriMesh& m) {
  io::BinaryWriter w(path, "ATM1");
  w.put<std::uint32_t>(1);
  w.put<double>(m.radius);
  w.put<std::uint64_t>(m.nodes.size());
  for (const auto& p : m.nodes) {
    w.put(p.x);
    w.put(p.y);
  }
  w.put<std::uint64_t>(m.triangles.size());
  for (const auto& t : m.triangles)
    for (auto v : t) w.put(v);
  w.put<std::uint64_t>(m.boundary_nodes.size());
  w.put_span<std::uint32_t>(m.boundary_nodes);
  w.put<std::uint64_t>(m.ring_radius.size());
  w.put_span<double>(m.ring_radius);
  w.put_span<std::uint32_t>(m.ring_start);
  w.commit();
}

TriMesh read_mesh(const std::string& path) {
  io::BinaryReader r(path, "ATM1");
  if (r.get<std::uint32_t>() != 1) fail(ErrorKind::kData, path + ": unsupported ATM1 version");
  TriMesh m;
  m.radius = r.get<double>();
  m.nodes.resize(r.get<std::uint64_t>());
  for (auto& p : m.nodes) {
    p.x = r.get<double>();
    p.y = r.get<double>();
  }
  m.triangles.resize(r.get<std::uint64_t>());
  for (auto& t : m.triangles)
    for (auto& v : t) {
      v = r.get<std::uint32_t>();
      if (v >= m.nodes.size()) fail(ErrorKind::kData, path + ": triangle index out of range");
    }
  m.boundary_nodes = r.get_vector<std::uint32_t>(r.get<std::uint64_t>());
  const auto rings = r.get<std::uint64_t>();
  m.ring_radius = r.get_vector<double>(rings);
  m.ring_start = r.get_vector<std::uint32_t>(rings + 1);
  return m;
}

void write_mesh_csv(const std::string& prefix, const TriMesh& m) {
  std::ostringstream nodes, tris;
  nodes.precision(17);
  nodes << "index,x,y,boundary\n";
  std::vector<char> on(m.nodes.size(), 0);
  for (auto v : m.boundary_nodes) on[v] = 1;
  for (std::size_t i = 0; i < m.nodes.size(); ++i)
    nodes << i << ',' << m.nodes[i].x << ',' << m.nodes[i].y << ',' << int(on[i]) << '\n';
  tris << "index,a,b,c\n";
  for (std::size_t k = 0; k < m.triangles.size(); ++k)
    tris << k << ',' << m.triangles[k][0] << ',' << m.triangles[k][1] << ',' << m.triangles[k][2] << '\n';
  io::write_text(prefix + "_nodes.csv", nodes.str());
  io::write_text(prefix + "_triangles.csv", tris.str());
}

}  // namespace atomo
