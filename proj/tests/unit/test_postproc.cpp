#include <doctest.h>

#include <cmath>
#include <random>

#include "atomo/error.hpp"
#include "atomo/postproc.hpp"

using namespace atomo;
using namespace atomo::postproc;

namespace {

double l2(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double spread(const CoefficientField& f) {
  double m = 0;
  for (double v : f.values) m += v;
  m /= static_cast<double>(f.values.size());
  double s = 0;
  for (double v : f.values) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(f.values.size() - 1));
}

CoefficientField noisy_constant(const UniformGrid& g, double c, double delta, std::uint64_t seed) {
  CoefficientField f(g, c);
  f.values = add_noise(f.values, {delta, seed});
  return f;
}

}  // namespace

TEST_CASE("add_noise has the exact relative norm") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2, 5);
  std::vector<double> data(1000);
  for (auto& d : data) d = u(rng);
  for (double delta : {0.005, 0.01, 0.05, 0.3}) {
    const auto noisy = add_noise(data, {delta, 11});
    std::vector<double> diff(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) diff[i] = noisy[i] - data[i];
    CHECK(std::abs(l2(diff) / l2(data) - delta) <= 1e-14);
  }
  CHECK(add_noise(data, {0.0, 1}) == data);
  CHECK(add_noise(data, {0.02, 9}) == add_noise(data, {0.02, 9}));
  CHECK(add_noise(data, {0.02, 9}) != add_noise(data, {0.02, 10}));
  CHECK_THROWS_AS(add_noise(data, {-0.1, 1}), Error);
  CHECK_THROWS_AS(add_noise(std::vector<double>(5, 0.0), {0.1, 1}), Error);
}

TEST_CASE("robust sigma estimate") {
  const auto g = build_uniform_grid(1.0, 64);
  CHECK(robust_sigma(CoefficientField(g, 3.0)) == 0.0);
  // iid N(0, s^2) per node -> estimate close to s
  CoefficientField f(g, 0.0);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01;
  for (auto& v : f.values) v = 0.2 * n01(rng);
  CHECK(robust_sigma(f) == doctest::Approx(0.2).epsilon(0.08));
}

TEST_CASE("sigma filter") {
  const auto g = build_uniform_grid(1.0, 32);
  SUBCASE("constant image is returned bit for bit") {
    for (double c : {4.0, 0.1 + 0.2, 1.0 / 3.0}) {
      const CoefficientField f(g, c);
      CHECK(sigma_filter(f, {}).values == f.values);
    }
  }
  SUBCASE("clean step edge is preserved exactly") {
    CoefficientField f(g, 4.0);
    for (int i = 0; i < g.n; ++i)
      for (int j = 16; j < g.n; ++j) f.values[g.index(i, j)] = 4.0 + 3 * 0.05;
    CHECK(sigma_filter(f, {}).values == f.values);
    CoefficientField h(g, 1.0);
    for (int i = 10; i < g.n; ++i)
      for (int j = 0; j < g.n; ++j) h.values[g.index(i, j)] = 2.5;
    CHECK(sigma_filter(h, {}).values == h.values);
  }
  SUBCASE("noise on a constant is cut at least in half") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const auto f = noisy_constant(g, 4.0, 0.05, seed);
      const auto out = sigma_filter(f, {});
      CHECK(spread(out) * 2 <= spread(f));
    }
  }
  SUBCASE("spec validation") {
    const CoefficientField f(g, 1.0);
    CHECK_THROWS_AS(sigma_filter(f, {4, 2.0, 4}), Error);
    CHECK_THROWS_AS(sigma_filter(f, {5, 0.0, 4}), Error);
    CHECK_THROWS_AS(sigma_filter(f, {5, 2.0, 0}), Error);
    CHECK_THROWS_AS(sigma_filter(CoefficientField(build_uniform_grid(1.0, 3), 1.0), {}), Error);
  }
}

TEST_CASE("isolated outlier falls back to the 4-neighbour mean") {
  const auto g = build_uniform_grid(1.0, 9);
  CoefficientField f(g, 2.0);
  f.values[g.index(4, 4)] = 9.0;
  const auto out = sigma_filter(f, {});
  CHECK(out.at(4, 4) == 2.0);
  CHECK(out.at(0, 0) == 2.0);
}

TEST_CASE("monte carlo statistics") {
  const auto g = build_uniform_grid(1.0, 24);
  const Reconstruction pipe = [&](std::uint64_t seed) { return noisy_constant(g, 4.0, 0.05, seed); };
  const auto one = monte_carlo(pipe, 1, 7);
  CHECK(one.runs == 1);
  for (double s : one.std.values) CHECK(s == 0.0);

  // seed order does not matter
  const auto a = monte_carlo(pipe, std::vector<std::uint64_t>{5, 1, 9, 3});
  const auto b = monte_carlo(pipe, std::vector<std::uint64_t>{9, 3, 1, 5});
  CHECK(a.mean.values == b.mean.values);
  CHECK(a.std.values == b.std.values);

  // per-node sample standard deviation
  const auto two = monte_carlo(pipe, std::vector<std::uint64_t>{1, 2});
  const auto f1 = pipe(1), f2 = pipe(2);
  CHECK(two.std.values[17] == doctest::Approx(std::abs(f1.values[17] - f2.values[17]) / std::sqrt(2.0)).epsilon(1e-12));

  // the 20-run mean scatters less than the 5-run mean
  double e5 = 0, e20 = 0;
  for (std::uint64_t rep = 0; rep < 4; ++rep) {
    const auto m5 = monte_carlo(pipe, 5, 1000 * rep);
    const auto m20 = monte_carlo(pipe, 20, 1000 * rep + 500);
    e5 += spread(m5.mean);
    e20 += spread(m20.mean);
  }
  CHECK(e20 < e5);

  const Reconstruction bad = [&](std::uint64_t seed) {
    if (seed == 3) fail(ErrorKind::kDivergence, "boom");
    return pipe(seed);
  };
  try {
    monte_carlo(bad, 5, 0);
    FAIL("expected failure");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kDivergence);
    CHECK(std::string(e.what()).find("seed 3") != std::string::npos);
  }
}

TEST_CASE("error metrics") {
  const auto g = build_uniform_grid(1.0, 8);
  CoefficientField t(g, 0.0), r(g, 0.0);
  t.values[g.index(2, 3)] = 1.0;
  r.values[g.index(4, 4)] = 1.0;
  CHECK(rel_l2_error(t, t) == 0.0);
  CHECK(rel_l2_error(r, t) == doctest::Approx(std::sqrt(2.0)));
  CHECK(peak_location_error(r, t) == 2);
  CHECK_THROWS_AS(rel_l2_error(t, CoefficientField(g, 0.0)), Error);
  try {
    rel_l2_error(t, CoefficientField(build_uniform_grid(1.0, 9), 1.0));
    FAIL("expected grid mismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInvalidArgument);
  }
}
