#include "atomo/laplace.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <numbers>
#include <sstream>

#include "atomo/error.hpp"
#include "atomo/io.hpp"
#include "atomo/parallel.hpp"

namespace atomo::laplace {

namespace {
constexpr double kPi = std::numbers::pi;
}

PGrid PGrid::log_spaced(double lo, double hi, int count) {
  require(count >= 3, "p-grid needs at least 3 points");
  require(lo > 0 && hi > lo, "p-grid needs 0 < lo < hi");
  PGrid g;
  for (int k = 0; k < count; ++k) g.p.push_back(hi * std::pow(lo / hi, static_cast<double>(k) / (count - 1)));
  g.validate();
  return g;
}

void PGrid::validate() const {
  if (p.size() < 3) fail(ErrorKind::kConfig, "p-grid needs at least 3 points (the limit fit has 3 unknowns)");
  const double top = std::exp(-kEulerGamma);
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (!(p[k] > 0 && p[k] < top))
      fail(ErrorKind::kConfig, "p-grid values must lie in (0, e^-gamma) = (0, 0.5615)");
    if (k > 0 && !(p[k] < p[k - 1])) fail(ErrorKind::kConfig, "p-grid must be strictly decreasing");
  }
}

double truncated_laplace(std::span<const double> series, double dt, double tau, double p) {
  require(series.size() >= 3, "truncated_laplace: need at least 3 samples");
  require(dt > 0, "truncated_laplace: dt must be positive");
  const double horizon = dt * static_cast<double>(series.size() - 1);
  require(tau >= 0 && tau < horizon, "truncated_laplace: need 0 <= tau < T");
  const auto k0 = static_cast<std::size_t>(std::ceil(tau / dt - 1e-9));
  const std::size_t last = series.size() - 1;
  require(last >= k0 + 2, "truncated_laplace: fewer than 3 samples in [tau, T]");
  auto f = [&](std::size_t k) { return std::exp(-p * dt * static_cast<double>(k)) * series[k]; };
  std::size_t n = last - k0;
  double sum = 0;
  std::size_t end = last;
  if (n % 2 == 1) {
    // 3/8 rule on the last three intervals
    sum += 3 * dt / 8 * (f(last - 3) + 3 * f(last - 2) + 3 * f(last - 1) + f(last));
    end = last - 3;
    n -= 3;
  }
  if (n > 0) {
    // Neumaier-compensated: long series otherwise lose linearity to rounding
    double s = f(k0) + f(end), comp = 0;
    for (std::size_t k = k0 + 1; k < end; ++k) {
      const double term = ((k - k0) % 2 ? 4.0 : 2.0) * f(k);
      const double t = s + term;
      comp += std::abs(s) >= std::abs(term) ? (s - t) + term : (term - t) + s;
      s = t;
    }
    sum += (s + comp) * dt / 3;
  }
  return sum;
}

double g0_kernel(Point x, Point x0, double p) {
  const double r = dist(x, x0);
  if (r == 0) fail(ErrorKind::kSingularPair, "g0_kernel: x coincides with x0");
  const double lp = std::log(p), lr = std::log(r), r2p2 = r * r * p * p;
  return -(1 / kPi) * (1 + kEulerGamma / lp + lr / lp + r2p2) + (r2p2 / lp * lr + (kEulerGamma - 1) * r2p2 / lp);
}

double g0_kernel_dr(double r, double p) {
  if (r == 0) fail(ErrorKind::kSingularPair, "g0_kernel: x coincides with x0");
  const double lp = std::log(p), p2 = p * p;
  return -(1 / kPi) * (1 / (lp * r) + 2 * r * p2) + p2 / lp * (2 * r * std::log(r) + r) +
         (kEulerGamma - 1) * 2 * r * p2 / lp;
}

double h_from_v(double v, double g0, double p) {
  require(p > 0 && p < std::exp(-kEulerGamma), "h_from_v: p outside (0, e^-gamma)");
  const double lp = std::log(p);
  const double a = 1 + kEulerGamma / lp;
  const double den = a * a * p * p * lp;
  if (std::abs(den) < 1e-300) fail(ErrorKind::kUnderflow, "h_from_v: denominator underflow");
  return 4 * kPi * kPi * (v - g0) / den;
}

LimitFit extract_limits(const PGrid& grid, std::span<const double> h) {
  require(grid.size() >= 3, "extract_limits: need at least 3 p-samples");
  require(h.size() == grid.size(), "extract_limits: sample count differs from the p-grid");
  const auto k = static_cast<Eigen::Index>(grid.size());
  Eigen::MatrixXd a(k, 3);
  Eigen::VectorXd b(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const double w = 1 / (std::log(grid.p[i]) + kEulerGamma);
    a(i, 0) = 1;
    a(i, 1) = w;
    a(i, 2) = w * w;
    b[i] = h[i];
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  const double cond = sv[2] > 0 ? sv[0] / sv[2] : INFINITY;
  if (!(cond <= 1e12)) {
    std::ostringstream ss;
    ss << "extract_limits: Vandermonde condition " << cond << " > 1e12; use a wider spread of p values";
    fail(ErrorKind::kFit, ss.str());
  }
  const Eigen::Vector3d c = svd.solve(b);
  LimitFit f;
  f.h0 = c[0];
  f.h1 = c[1];
  f.psi = c[2];
  f.residual = (a * c - b).norm();
  f.condition = cond;
  return f;
}

double rescale_log_scale(const LimitFit& f, double rho) {
  require(rho > 0, "log scale must be positive");
  const double l = std::log(rho);
  return f.psi - f.h1 * l + f.h0 * l * l;
}

std::vector<double> exterior_neumann_completion(std::span<const double> psi, double radius, double rho) {
  require(psi.size() >= 3, "exterior completion: need at least 3 ring samples");
  require(radius > 0 && rho > 0, "exterior completion: radius and log scale must be positive");
  const auto m = static_cast<long>(psi.size());
  const double mean_factor = std::abs(std::log(radius / rho)) > 1e-12 ? 1 / (radius * std::log(radius / rho))
                                                                       : -1 / (radius * std::log(100.0));
  std::vector<std::complex<double>> c(m);
  for (long k = 0; k < m; ++k) {
    std::complex<double> s = 0;
    for (long j = 0; j < m; ++j) s += psi[j] * std::polar(1.0, -2 * kPi * static_cast<double>(j * k % m) / m);
    c[k] = s / static_cast<double>(m);
  }
  std::vector<double> out(m);
  for (long j = 0; j < m; ++j) {
    std::complex<double> s = 0;
    for (long k = 0; k < m; ++k) {
      const long signed_k = k <= m / 2 ? k : k - m;
      const double factor = k == 0 ? mean_factor : -std::abs(static_cast<double>(signed_k)) / radius;
      s += factor * c[k] * std::polar(1.0, 2 * kPi * static_cast<double>(j * k % m) / m);
    }
    out[j] = s.real();
  }
  return out;
}

BoundaryValue assemble_boundary_data(double u, double u_nu, Point x, Point x0, Point nu, double rho) {
  const Point d = x - x0;
  const double r2 = dot(d, d);
  BoundaryValue b;
  if (r2 == 0) {
    b.excluded = true;
    return b;
  }
  const double ell = 0.5 * std::log(r2) - std::log(rho);
  if (std::abs(ell) < kLogGuard) {
    b.excluded = true;
    return b;
  }
  const double dn_ell = dot(d, nu) / r2;
  b.s0 = u / ell;
  b.s1 = u_nu / ell - u * dn_ell / (ell * ell);
  return b;
}

// ---------------------------------------------------------------- trace data

namespace {

std::vector<double> padded_difference(const std::vector<double>& a, const std::vector<double>* b) {
  std::vector<double> out(std::max(a.size(), b ? b->size() : 0), 0.0);
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k];
  if (b)
    for (std::size_t k = 0; k < b->size(); ++k) out[k] -= (*b)[k];
  return out;
}

}  // namespace

SpectralBoundaryData spectral_from_traces(const forward::BoundaryTraceSet& traces,
                                          const forward::BoundaryTraceSet* reference,
                                          const std::vector<Point>& sources, const SpectralOptions& opts) {
  opts.pgrid.validate();
  if (traces.sources.size() != sources.size())
    fail(ErrorKind::kData, "trace set has " + std::to_string(traces.sources.size()) + " source blocks, expected " +
                               std::to_string(sources.size()));
  const bool use_ref = opts.background == Background::kReference;
  if (use_ref) {
    if (!reference) fail(ErrorKind::kData, "reference-background spectral data need reference traces");
    if (reference->sources.size() != sources.size() || reference->receivers.size() != traces.receivers.size() ||
        std::abs(reference->dt - traces.dt) > 1e-12 * traces.dt)
      fail(ErrorKind::kData, "reference traces do not match the measured trace layout");
  }

  SpectralBoundaryData d;
  d.pgrid = opts.pgrid;
  d.tau = opts.tau;
  d.background = opts.background;
  d.sources = sources;
  d.receivers = traces.receivers;
  d.normals = traces.normals;
  const std::size_t nr = d.receivers.size(), np = d.pair_count(), kp = d.pgrid.size();
  d.u_tilde.assign(np * kp, 0.0);
  d.h.assign(np * kp, 0.0);
  d.value.assign(np, {});
  d.flux.assign(np, {});
  d.excluded.assign(np, 0);
  d.warnings = traces.warnings;
  bool no_flux = false;
  for (std::size_t s = 0; s < sources.size(); ++s)
    if (traces.p1.size() <= s || traces.p1[s].empty()) no_flux = true;
  if (no_flux) d.warnings.push_back("no flux traces: normal-derivative limits left at zero");

  parallel_for(sources.size(), [&](std::size_t s) {
    std::vector<double> hv(kp), hf(kp);
    for (std::size_t r = 0; r < nr; ++r) {
      const std::size_t pi = d.pair(s, r);
      const Point x = d.receivers[r], x0 = sources[s];
      if (dist(x, x0) < 1e-9) {
        d.excluded[pi] = 1;
        continue;
      }
      const auto meas = traces.series(s, r);
      std::vector<double> ref;
      if (use_ref) ref = reference->series(s, r);
      const auto diff = padded_difference(meas, use_ref ? &ref : nullptr);
      for (std::size_t k = 0; k < kp; ++k) {
        const double p = d.pgrid.p[k];
        const double ut = truncated_laplace(diff, traces.dt, opts.tau, p);
        const double g0 = use_ref ? 0.0 : g0_kernel(x, x0, p);
        d.u_tilde[pi * kp + k] = ut - (use_ref ? 0.0 : std::log(p) * g0);
        hv[k] = h_from_v(ut / std::log(p), g0, p);
        d.h[pi * kp + k] = hv[k];
      }
      d.value[pi] = extract_limits(d.pgrid, hv);
      if (no_flux) continue;
      const auto fmeas = traces.series(s, r, true);
      std::vector<double> fref;
      if (use_ref) fref = reference->series(s, r, true);
      const auto fdiff = padded_difference(fmeas, use_ref ? &fref : nullptr);
      const double rr = dist(x, x0);
      const double dr_dnu = dot(x - x0, d.normals[r]) / rr;
      for (std::size_t k = 0; k < kp; ++k) {
        const double p = d.pgrid.p[k];
        const double ut = truncated_laplace(fdiff, traces.dt, opts.tau, p);
        const double g0n = use_ref ? 0.0 : g0_kernel_dr(rr, p) * dr_dnu;
        hf[k] = h_from_v(ut / std::log(p), g0n, p);
      }
      d.flux[pi] = extract_limits(d.pgrid, hf);
    }
  });
  return d;
}

namespace {

void put_fit(io::BinaryWriter& w, const LimitFit& f) {
  w.put(f.h0);
  w.put(f.h1);
  w.put(f.psi);
  w.put(f.residual);
  w.put(f.condition);
}

LimitFit get_fit(io::BinaryReader& r) {
  LimitFit f;
  f.h0 = r.get<double>();
  f.h1 = r.get<double>();
  f.psi = r.get<double>();
  f.residual = r.get<double>();
  f.condition = r.get<double>();
  return f;
}

}  // namespace

void write_spectral(const std::string& path, const SpectralBoundaryData& d) {
  io::BinaryWriter w(path, "ATS1");
  w.put<std::uint32_t>(1);
  w.put<std::uint64_t>(d.pgrid.size());
  for (double p : d.pgrid.p) w.put(p);
  w.put(d.tau);
  w.put<std::uint8_t>(d.background == Background::kReference ? 0 : 1);
  w.put<std::uint64_t>(d.sources.size());
  for (auto s : d.sources) {
    w.put(s.x);
    w.put(s.y);
  }
  w.put<std::uint64_t>(d.receivers.size());
  for (std::size_t r = 0; r < d.receivers.size(); ++r) {
    w.put(d.receivers[r].x);
    w.put(d.receivers[r].y);
    w.put(d.normals[r].x);
    w.put(d.normals[r].y);
  }
  const std::size_t kp = d.pgrid.size();
  for (std::size_t i = 0; i < d.pair_count(); ++i) {
    w.put<std::uint8_t>(d.excluded[i]);
    put_fit(w, d.value[i]);
    put_fit(w, d.flux[i]);
    w.put_span(std::span<const double>(d.u_tilde.data() + i * kp, kp));
    w.put_span(std::span<const double>(d.h.data() + i * kp, kp));
  }
  w.put<std::uint64_t>(d.warnings.size());
  for (const auto& s : d.warnings) w.put_string(s);
  w.commit();
}

SpectralBoundaryData read_spectral(const std::string& path) {
  io::BinaryReader r(path, "ATS1");
  if (r.get<std::uint32_t>() != 1) fail(ErrorKind::kData, path + ": unsupported ATS1 version");
  SpectralBoundaryData d;
  d.pgrid.p = r.get_vector<double>(r.get<std::uint64_t>());
  d.tau = r.get<double>();
  d.background = r.get<std::uint8_t>() == 0 ? Background::kReference : Background::kG0;
  const auto ns = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < ns; ++i) {
    const double x = r.get<double>();
    d.sources.push_back({x, r.get<double>()});
  }
  const auto nr = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < nr; ++i) {
    const double x = r.get<double>(), y = r.get<double>();
    const double nx = r.get<double>(), ny = r.get<double>();
    d.receivers.push_back({x, y});
    d.normals.push_back({nx, ny});
  }
  const std::size_t kp = d.pgrid.size();
  for (std::size_t i = 0; i < d.pair_count(); ++i) {
    d.excluded.push_back(r.get<std::uint8_t>());
    d.value.push_back(get_fit(r));
    d.flux.push_back(get_fit(r));
    auto u = r.get_vector<double>(kp);
    auto h = r.get_vector<double>(kp);
    d.u_tilde.insert(d.u_tilde.end(), u.begin(), u.end());
    d.h.insert(d.h.end(), h.begin(), h.end());
  }
  const auto nw = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < nw; ++i) d.warnings.push_back(r.get_string());
  return d;
}

void write_spectral_csv(const std::string& prefix, const SpectralBoundaryData& d, double rho) {
  std::ostringstream a, b;
  a.precision(12);
  b.precision(12);
  for (std::size_t s = 0; s < d.sources.size(); ++s) {
    for (std::size_t r = 0; r < d.receivers.size(); ++r) {
      const std::size_t i = d.pair(s, r);
      const char* sep = r ? "," : "";
      if (d.excluded[i]) {
        a << sep << "nan";
        b << sep << "nan";
      } else {
        a << sep << rescale_log_scale(d.value[i], rho);
        b << sep << rescale_log_scale(d.flux[i], rho);
      }
    }
    a << '\n';
    b << '\n';
  }
  io::write_text(prefix + "_psi.csv", a.str());
  io::write_text(prefix + "_psi1.csv", b.str());
}

}  // namespace atomo::laplace
