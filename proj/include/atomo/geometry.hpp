#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <numbers>
#include <string>
#include <vector>

namespace atomo {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

inline Point operator+(Point a, Point b) { return {a.x + b.x, a.y + b.y}; }
inline Point operator-(Point a, Point b) { return {a.x - b.x, a.y - b.y}; }
inline Point operator*(double s, Point a) { return {s * a.x, s * a.y}; }
inline double dot(Point a, Point b) { return a.x * b.x + a.y * b.y; }
inline double cross(Point a, Point b) { return a.x * b.y - a.y * b.x; }
inline double norm(Point a) { return std::hypot(a.x, a.y); }
inline double dist(Point a, Point b) { return norm(a - b); }

struct Disk {
  Point center{};
  double radius = 1.0;

  Disk() = default;
  Disk(Point c, double r);
};

// Axis-aligned square centred at `center`.
struct Square {
  Point center{};
  double side = 0.0;

  Point lower_left() const { return {center.x - side / 2, center.y - side / 2}; }
  std::array<Point, 4> corners() const;
  // (s,t) in [0,1]^2 -> x, with x1 = side*s - side/2 about the centre
  Point at(double s, double t) const;
};

Square inscribed_square(double radius);

// Tensor grid over a square, row-major: node(i,j) = origin + spacing*(j,i),
// index = i*n + j, i = row (x2 direction), j = column (x1 direction).
struct UniformGrid {
  Point origin{};
  double spacing = 1.0;
  int n = 2;

  std::size_t size() const { return static_cast<std::size_t>(n) * n; }
  std::size_t index(int i, int j) const { return static_cast<std::size_t>(i) * n + j; }
  Point node(int i, int j) const { return {origin.x + spacing * j, origin.y + spacing * i}; }
  double side() const { return spacing * (n - 1); }
  bool on_boundary(int i, int j) const { return i == 0 || j == 0 || i == n - 1 || j == n - 1; }
  bool operator==(const UniformGrid& o) const {
    return origin.x == o.origin.x && origin.y == o.origin.y && spacing == o.spacing && n == o.n;
  }
};

UniformGrid build_uniform_grid(double side, int n);
// grid covering the square inscribed in a circle of `radius` centred at the origin
UniformGrid inscribed_grid(double radius, int n);

// Boundary nodes of a grid, counterclockwise from the lower-left corner, with
// outward unit normals.  Corners take the normal of their vertical side.
struct GridBoundary {
  std::vector<std::size_t> nodes;
  std::vector<Point> normals;
  std::vector<std::array<int, 2>> ij;
};
GridBoundary grid_boundary(const UniformGrid& grid);

struct TransducerRing {
  Disk circle{};
  int count = 64;
  double theta0 = 0.0;  // angle of transducer 0

  TransducerRing() = default;
  TransducerRing(Disk c, int count, double theta0);
  // default layout: half a spacing off the axes so no transducer sits on a
  // corner of the inscribed square
  static TransducerRing staggered(Disk c, int count);

  double spacing() const { return 2.0 * std::numbers::pi / count; }
  double angle(int j) const { return theta0 + spacing() * j; }
  Point position(int j) const;
  Point normal(int j) const;  // outward
  Point tangent(int j) const; // counterclockwise
};

struct TriMesh {
  std::vector<Point> nodes;
  std::vector<std::array<std::uint32_t, 3>> triangles;
  std::vector<std::uint32_t> boundary_nodes;  // counterclockwise
  double radius = 0.0;

  // Polar structure: ring r holds nodes ring_start[r] .. ring_start[r+1]-1 at
  // radius ring_radius[r]; ring 0 is the centre node.
  std::vector<double> ring_radius;
  std::vector<std::uint32_t> ring_start;

  std::size_t node_count() const { return nodes.size(); }
  std::size_t ring_count() const { return ring_radius.size(); }
  std::size_t ring_size(std::size_t r) const { return ring_start[r + 1] - ring_start[r]; }
  double signed_area(std::size_t k) const;
  double total_area() const;
  double min_edge() const;
  double max_edge() const;
  // ring index whose radius equals r (to 1e-12 relative); -1 if none
  int find_ring(double r) const;
};

struct DiskMeshOptions {
  double angle_offset = 0.0;      // rigid rotation of every ring
  std::vector<double> required_radii;  // radii that must carry a ring
  int aligned_count = 0;           // node count on all rings with r >= aligned_from
  double aligned_from = -1.0;
};

TriMesh triangulate_disk(double radius, double target_h, const DiskMeshOptions& opts = {});

// Mesh for the Cauchy problem on S: rings at C_R with `count` nodes (a
// multiple of the transducer count), radially aligned from two layers inside
// C_R out to C_S so that normal derivatives on C_R are one-sided differences.
TriMesh triangulate_cauchy_disk(double r_inner, double r_outer, double target_h, int transducers,
                                double angle_offset);

// Locates points in a polar TriMesh; barycentric interpolation of nodal data.
class PointLocator {
 public:
  explicit PointLocator(const TriMesh& mesh);
  struct Hit {
    std::uint32_t triangle = 0;
    std::array<double, 3> bary{};
  };
  // throws invalid-argument when p is outside the mesh
  Hit locate(Point p) const;
  double interpolate(const Hit& hit, const double* values) const;

 private:
  const TriMesh* mesh_;
  Point lo_{};
  double cell_ = 1.0;
  int nx_ = 1;
  std::vector<std::vector<std::uint32_t>> buckets_;
};

void write_mesh(const std::string& path, const TriMesh& mesh);
TriMesh read_mesh(const std::string& path);
void write_mesh_csv(const std::string& prefix, const TriMesh& mesh);

}  // namespace atomo
