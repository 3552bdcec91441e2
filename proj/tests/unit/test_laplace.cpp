#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "atomo/error.hpp"
#include "atomo/laplace.hpp"

using namespace atomo;
using namespace atomo::laplace;

namespace {

std::vector<double> sample(double dt, std::size_t n, double (*f)(double)) {
  std::vector<double> s(n);
  for (std::size_t k = 0; k < n; ++k) s[k] = f(dt * static_cast<double>(k));
  return s;
}

}  // namespace

TEST_CASE("truncated Laplace transform") {
  const double dt = 1e-3;
  const auto e = sample(dt, 40001, [](double t) { return std::exp(-t); });
  CHECK(std::abs(truncated_laplace(e, dt, 0.0, 1.0) - (1 - std::exp(-80.0)) / 2) <= 1e-8);
  CHECK(std::abs(truncated_laplace(e, dt, 1.0, 1.0) - (std::exp(-2.0) - std::exp(-80.0)) / 2) <= 1e-8);
  CHECK(truncated_laplace(std::vector<double>(50, 0.0), dt, 0.0, 0.3) == 0.0);

  // linearity
  const auto g = sample(dt, 40001, [](double t) { return std::sin(3 * t); });
  std::vector<double> comb(e.size());
  for (std::size_t k = 0; k < e.size(); ++k) comb[k] = 2.5 * e[k] - 0.75 * g[k];
  const double lhs = truncated_laplace(comb, dt, 0.0, 0.2);
  const double rhs = 2.5 * truncated_laplace(e, dt, 0.0, 0.2) - 0.75 * truncated_laplace(g, dt, 0.0, 0.2);
  CHECK(std::abs(lhs - rhs) <= 1e-14 * std::max(1.0, std::abs(lhs)));

  // both closing rules integrate cubics exactly (p = 0)
  for (std::size_t n : {11u, 12u}) {
    const auto c = sample(0.1, n, [](double t) { return t * t * t - t; });
    const double big_t = 0.1 * static_cast<double>(n - 1);
    CHECK(truncated_laplace(c, 0.1, 0.0, 0.0) == doctest::Approx(std::pow(big_t, 4) / 4 - big_t * big_t / 2).epsilon(1e-12));
  }
  CHECK_THROWS_AS(truncated_laplace(std::vector<double>{1.0, 2.0}, dt, 0.0, 1.0), Error);
}

TEST_CASE("g0 kernel as printed") {
  const double p = 0.05, lp = std::log(p), gam = kEulerGamma;
  // |x - x0| = 1 kills the log terms
  const double unit = -(1 / std::numbers::pi) * (1 + gam / lp + p * p) + (gam - 1) * p * p / lp;
  CHECK(g0_kernel({0.2, 0.0}, {1.2, 0.0}, p) == doctest::Approx(unit).epsilon(1e-15));
  // independent 30-digit evaluation
  CHECK(g0_kernel({0.3, -0.2}, {0.6, 0.8}, p) == doctest::Approx(-0.252921784131664680152).epsilon(1e-14));
  // finite as p approaches e^-gamma
  CHECK(std::isfinite(g0_kernel({0.0, 0.0}, {0.5, 0.5}, std::exp(-gam) * (1 - 1e-12))));
  try {
    g0_kernel({0.1, 0.1}, {0.1, 0.1}, p);
    FAIL("expected singular-pair error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kSingularPair);
  }
  // radial derivative against central differences
  const double r = 0.7, dr = 1e-6;
  const double fd = (g0_kernel({0, 0}, {r + dr, 0}, p) - g0_kernel({0, 0}, {r - dr, 0}, p)) / (2 * dr);
  CHECK(g0_kernel_dr(r, p) == doctest::Approx(fd).epsilon(1e-7));
}

TEST_CASE("h from v") {
  CHECK(h_from_v(0.4, 0.4, 0.1) == 0.0);
  CHECK(h_from_v(0.8, 0.2, 0.1) == doctest::Approx(2 * h_from_v(0.5, 0.2, 0.1)).epsilon(1e-14));
  CHECK(h_from_v(0.3, -0.2, 0.1) == doctest::Approx(-1526.79677095798386490547).epsilon(1e-14));
  CHECK_THROWS_AS(h_from_v(1.0, 0.0, 0.7), Error);
}

TEST_CASE("limit extraction") {
  const auto grid = PGrid::standard();
  auto synth = [](const PGrid& g, double a, double b, double c) {
    std::vector<double> h;
    for (double p : g.p) {
      const double w = 1 / (std::log(p) + kEulerGamma);
      h.push_back(a + b * w + c * w * w);
    }
    return h;
  };
  const PGrid three{{0.3, 0.1, 0.02}};
  for (const auto* g : {&grid, &three}) {
    auto f = extract_limits(*g, synth(*g, 2, 3, 5));
    CHECK(std::abs(f.h0 - 2) <= 1e-10);
    CHECK(std::abs(f.h1 - 3) <= 1e-10);
    CHECK(std::abs(f.psi - 5) <= 1e-10);
  }
  auto flat = extract_limits(grid, std::vector<double>(grid.size(), 7.0));
  CHECK(flat.h0 == doctest::Approx(7.0));
  CHECK(std::abs(flat.h1) <= 1e-10);
  CHECK(std::abs(flat.psi) <= 1e-10);

  // on the same six noisy samples the six-point fit has the smaller residual
  const PGrid six = PGrid::log_spaced(0.01, 0.3, 6);
  auto noisy = synth(six, 2, 3, 5);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  for (auto& v : noisy) v += 0.05 * n01(rng);
  const auto f6 = extract_limits(six, noisy);
  const PGrid sub{{six.p[0], six.p[2], six.p[5]}};
  const auto f3 = extract_limits(sub, std::vector<double>{noisy[0], noisy[2], noisy[5]});
  double r3 = 0;
  for (std::size_t k = 0; k < six.size(); ++k) {
    const double w = 1 / (std::log(six.p[k]) + kEulerGamma);
    r3 += std::pow(f3.h0 + f3.h1 * w + f3.psi * w * w - noisy[k], 2);
  }
  CHECK(f6.residual <= std::sqrt(r3));

  try {
    extract_limits(PGrid{{0.1, 0.1 * (1 - 1e-7), 0.1 * (1 - 2e-7)}}, std::vector<double>{1, 2, 3});
    FAIL("expected fit error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kFit);
  }
  CHECK_THROWS_AS(PGrid::log_spaced(0.01, 0.6, 5), Error);
  CHECK_THROWS_AS((PGrid{{0.1, 0.2, 0.05}}.validate()), Error);
  CHECK_THROWS_AS((PGrid{{0.2, 0.1}}.validate()), Error);
}

TEST_CASE("log-scale rescaling of the limits") {
  // limits of the Born expansion: H0 = -A, H1 = -B, psi = -C with
  // A = int xi, B = int (a+b) xi, C = int ab xi
  const double a = 0.7, b = -1.3, c = 0.4, rho = 2.5, l = std::log(rho);
  LimitFit f;
  f.h0 = -a;
  f.h1 = -b;
  f.psi = -c;
  CHECK(rescale_log_scale(f, 1.0) == f.psi);
  CHECK(rescale_log_scale(f, rho) == doctest::Approx(-(c - l * b + l * l * a)).epsilon(1e-14));
}

TEST_CASE("exterior Neumann completion") {
  const int m = 64;
  const double pi = std::numbers::pi, theta0 = pi / m;
  auto ring = [&](auto f) {
    std::vector<double> v(m);
    for (int j = 0; j < m; ++j) v[j] = f(theta0 + 2 * pi * j / m);
    return v;
  };
  auto c1 = exterior_neumann_completion(ring([](double t) { return std::cos(t); }), 1.0, 2.5);
  auto c2 = exterior_neumann_completion(ring([](double t) { return std::cos(2 * t); }), 1.0, 2.5);
  auto c3 = exterior_neumann_completion(ring([](double t) { return std::sin(3 * t); }), 2.0, 2.5);
  for (int j = 0; j < m; ++j) {
    const double t = theta0 + 2 * pi * j / m;
    CHECK(c1[j] == doctest::Approx(-std::cos(t)).epsilon(1e-12));
    CHECK(c2[j] == doctest::Approx(-2 * std::cos(2 * t)).epsilon(1e-12));
    CHECK(c3[j] == doctest::Approx(-1.5 * std::sin(3 * t)).epsilon(1e-12));
  }
  for (double v : exterior_neumann_completion(std::vector<double>(m, 0.0), 1.0, 2.5)) CHECK(v == 0.0);
  // mean mode: b ln(r/rho) scaled to 1 on the circle
  for (double v : exterior_neumann_completion(std::vector<double>(m, 1.0), 1.0, 2.5))
    CHECK(v == doctest::Approx(1 / std::log(1 / 2.5)).epsilon(1e-12));
  // linearity
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01;
  std::vector<double> x(m), y(m), z(m);
  for (int j = 0; j < m; ++j) {
    x[j] = n01(rng);
    y[j] = n01(rng);
    z[j] = 1.5 * x[j] - 0.5 * y[j];
  }
  auto cx = exterior_neumann_completion(x, 1.0, 2.5), cy = exterior_neumann_completion(y, 1.0, 2.5);
  auto cz = exterior_neumann_completion(z, 1.0, 2.5);
  for (int j = 0; j < m; ++j) CHECK(std::abs(cz[j] - (1.5 * cx[j] - 0.5 * cy[j])) <= 1e-12);
}

TEST_CASE("boundary data for v = u / ell") {
  auto z = assemble_boundary_data(0, 0, {0.3, 0.1}, {1, 0}, {1, 0}, 1.0);
  CHECK(z.s0 == 0.0);
  CHECK(z.s1 == 0.0);
  CHECK(!z.excluded);
  auto anti = assemble_boundary_data(0.8, 0.0, {-1, 0}, {1, 0}, {-1, 0}, 1.0);
  CHECK(anti.s0 == doctest::Approx(0.8 / std::log(2.0)).epsilon(1e-15));
  auto gold = assemble_boundary_data(1.0, 0.5, {1, 0}, {0, 1}, {1, 0}, 1.0);
  CHECK(gold.s0 == doctest::Approx(2.885390081777926814719).epsilon(1e-14));
  CHECK(gold.s1 == doctest::Approx(-2.720042921122252188379).epsilon(1e-14));
  // s1 is the normal derivative of s0 along nu
  const double rho = 2.5, eps = 1e-6;
  auto u = [](Point x) { return x.x * x.x - 0.3 * x.y; };
  const Point x{0.4, -0.2}, x0{std::cos(2.0), std::sin(2.0)}, nu{0.6, 0.8};
  auto v = [&](Point y) { return u(y) / (0.5 * std::log(dot(y - x0, y - x0)) - std::log(rho)); };
  const double fd = (v(x + eps * nu) - v(x - eps * nu)) / (2 * eps);
  auto bv = assemble_boundary_data(u(x), 2 * x.x * nu.x - 0.3 * nu.y, x, x0, nu, rho);
  CHECK(bv.s1 == doctest::Approx(fd).epsilon(1e-7));
  CHECK(assemble_boundary_data(1, 1, {0.5, 0}, {0.5, 0}, {1, 0}, 1.0).excluded);
  CHECK(assemble_boundary_data(1, 1, {0, 0}, {1.02, 0}, {1, 0}, 1.0).excluded);
}

TEST_CASE("spectral data from traces: background removal and container") {
  using forward::BoundaryTraceSet;
  const double dt = 0.01;
  const std::size_t n = 4001;
  BoundaryTraceSet meas, ref;
  for (auto* t : {&meas, &ref}) {
    t->dt = dt;
    t->receivers = {{1, 0}, {0, 1}, {-1, 0}};
    t->normals = {{1, 0}, {0, 1}, {-1, 0}};
    t->sources = {0, 1};
    t->samples = {n, n};
    t->p0.assign(2, std::vector<double>(n * 3, 0.0));
    t->p1.assign(2, std::vector<double>(n * 3, 0.0));
  }
  // measured = reference + 0.1 e^{-t} at receiver 2 of source 0
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t r = 0; r < 3; ++r) ref.p0[0][k * 3 + r] = ref.p0[1][k * 3 + r] = std::sin(0.01 * k + r);
    meas.p0 = ref.p0;
  }
  for (std::size_t k = 0; k < n; ++k) meas.p0[0][k * 3 + 2] += 0.1 * std::exp(-dt * k);
  const std::vector<Point> sources{{1, 0}, {0, 1}};
  auto d = spectral_from_traces(meas, &ref, sources, {});
  CHECK(d.excluded[d.pair(0, 0)] == 1);
  CHECK(d.excluded[d.pair(1, 1)] == 1);
  CHECK(d.value[d.pair(1, 2)].psi == 0.0);
  std::vector<double> h;
  for (double p : d.pgrid.p) h.push_back(h_from_v(0.1 * (1 - std::exp(-(1 + p) * 40.0)) / (1 + p) / std::log(p), 0, p));
  const auto expect = extract_limits(d.pgrid, h);
  CHECK(d.value[d.pair(0, 2)].psi == doctest::Approx(expect.psi).epsilon(1e-6));
  CHECK(d.value[d.pair(0, 2)].h0 == doctest::Approx(expect.h0).epsilon(1e-6));

  CHECK_THROWS_AS(spectral_from_traces(meas, nullptr, sources, {}), Error);

  const auto path = (std::filesystem::temp_directory_path() / "atomo_spectral_test.ats").string();
  write_spectral(path, d);
  auto r = read_spectral(path);
  CHECK(r.pgrid.p == d.pgrid.p);
  CHECK(r.h == d.h);
  CHECK(r.excluded == d.excluded);
  CHECK(r.value[d.pair(0, 2)].psi == d.value[d.pair(0, 2)].psi);
  std::filesystem::remove(path);
}
