#include "atomo/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>

#include "atomo/error.hpp"
#include "atomo/forward.hpp"
#include "atomo/io.hpp"
#include "atomo/laplace.hpp"
#include "atomo/parallel.hpp"
#include "atomo/postproc.hpp"

namespace atomo::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr double kLavrentievBackground = 4.0;

class Timer {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

void say(const Context& ctx, const std::string& line) {
  if (ctx.log) ctx.log(line);
}

// Re-throws module errors as "<module>: <message>" keeping the kind.
template <class F>
decltype(auto) stage(const char* module, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.message().rfind(std::string(module) + ":", 0) == 0) throw;
    fail(e.kind(), std::string(module) + ": " + e.message());
  }
}

// Files written by one command; removed again if the command fails.
class Outputs {
 public:
  explicit Outputs(std::string dir) : dir_(std::move(dir)) {}
  std::string operator()(const std::string& name) {
    const auto p = (fs::path(dir_) / name).string();
    files_.push_back(p);
    return p;
  }
  std::string pgm(const std::string& name) {
    (*this)(name + ".window");
    return (*this)(name);
  }
  void discard() noexcept {
    std::error_code ec;
    for (const auto& f : files_) fs::remove(f, ec);
  }
  const std::vector<std::string>& files() const { return files_; }

 private:
  std::string dir_;
  std::vector<std::string> files_;
};

// Stamps the config hash into everything written during one command.
class ProvenanceScope {
 public:
  explicit ProvenanceScope(const std::string& tag) : saved_(io::provenance()) { io::set_provenance(tag); }
  ~ProvenanceScope() { io::set_provenance(saved_); }

 private:
  std::string saved_;
};

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finaliser
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string in_dir(const Context& ctx, const std::string& name) { return (fs::path(ctx.out) / name).string(); }

json read_manifest(const std::string& path) {
  try {
    return json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    fail(ErrorKind::kData, path + ": malformed manifest (" + e.what() + ")");
  }
}

void write_manifest(const Context& ctx, const std::string& command, const Report& rep, json extra = json::object()) {
  json m;
  m["command"] = command;
  m["atomo_version"] = kVersion;
  m["name"] = ctx.cfg.name;
  m["config_hash"] = ctx.cfg.hash();
  m["data_hash"] = ctx.cfg.data_hash();
  m["seed"] = ctx.cfg.noise.seed;
  m["runs"] = ctx.cfg.noise.runs;
  m["deltas"] = ctx.cfg.noise.deltas;
  m["workers"] = worker_count();
  m["seconds"] = rep.seconds;
  json files = json::array();
  for (const auto& f : rep.files) files.push_back(fs::path(f).filename().string());
  m["files"] = files;
  m["warnings"] = rep.warnings;
  for (auto& [k, v] : extra.items()) m[k] = v;
  io::write_text(in_dir(ctx, "manifest_" + command + ".json"), m.dump(2) + "\n");
}

// simulate's manifest must exist and match the data-shaping part of the config
void require_simulation(const Context& ctx) {
  const auto path = in_dir(ctx, "manifest_simulate.json");
  if (!fs::exists(path))
    fail(ErrorKind::kData, "missing simulation artifacts: expected " + path + " (run `atomo simulate` with this config first)");
  const auto m = read_manifest(path);
  const auto want = ctx.cfg.data_hash();
  const auto got = m.value("data_hash", std::string());
  if (got != want)
    fail(ErrorKind::kData, "simulation artifacts in " + ctx.out + " were produced with a different configuration (data hash " +
                               got + ", expected " + want + "); rerun `atomo simulate`");
}

void require_file(const std::string& path) {
  if (!fs::exists(path)) fail(ErrorKind::kData, "missing artifact: expected " + path + " (run `atomo simulate` first)");
}

std::pair<double, double> window_of(const CoefficientField& truth) {
  double lo = truth.min(), hi = truth.max();
  if (hi - lo < 1e-12) {
    lo -= 0.1;
    hi += 0.1;
  }
  return {lo, hi};
}

void write_field_set(Outputs& out, const std::string& stem, const CoefficientField& f, std::pair<double, double> window,
                     bool csv = true) {
  write_field(out(stem + ".atf"), f);
  write_field_pgm(out.pgm(stem + ".pgm"), f, window.first, window.second);
  if (csv) write_field_csv(out(stem + ".csv"), f);
}

CoefficientField minus(const CoefficientField& f, double c) {
  auto g = f;
  for (auto& v : g.values) v -= c;
  return g;
}

bool all_zero(const CoefficientField& f) {
  return std::all_of(f.values.begin(), f.values.end(), [](double v) { return v == 0.0; });
}

double max_abs_diff(const CoefficientField& a, const CoefficientField& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) m = std::max(m, std::abs(a.values[i] - b.values[i]));
  return m;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<std::uint64_t> seeds_for(const RunConfig& c, double delta) {
  // noiseless data are deterministic: one run
  const int runs = delta > 0 ? c.noise.runs : 1;
  std::vector<std::uint64_t> s(static_cast<std::size_t>(runs));
  std::iota(s.begin(), s.end(), c.noise.seed);
  return s;
}

postproc::SigmaFilterSpec filter_spec(const RunConfig& c) { return {c.noise.window, c.noise.sigma_mult, c.noise.min_count}; }

// Mean / std / metrics over per-seed reconstructions, unfiltered and
// sigma-filtered (each run filtered, then averaged).
std::vector<MetricsRow> summarize(const Context& ctx, Outputs& out, Method method, double delta, double reg,
                                  const std::vector<std::uint64_t>& seeds, const std::vector<CoefficientField>& fields,
                                  const CoefficientField& truth, double runtime) {
  const double bg = background_of(ctx.cfg);
  const auto xi_true = minus(truth, bg);
  const bool has_xi = !all_zero(xi_true);
  const auto window = window_of(truth);
  const auto spec = filter_spec(ctx.cfg);
  std::vector<CoefficientField> filtered(fields.size());
  parallel_for(fields.size(), [&](std::size_t r) { filtered[r] = postproc::sigma_filter(fields[r], spec); });

  std::vector<MetricsRow> rows;
  for (bool filt : {false, true}) {
    if (filt && !ctx.cfg.noise.filter) continue;
    const auto& set = filt ? filtered : fields;
    std::map<std::uint64_t, std::size_t> slot;
    for (std::size_t r = 0; r < seeds.size(); ++r) slot[seeds[r]] = r;
    const auto mc = postproc::monte_carlo([&](std::uint64_t s) { return set[slot.at(s)]; }, seeds);
    MetricsRow row;
    row.method = method_name(method);
    row.delta = delta;
    row.regularization = reg;
    row.filtered = filt;
    row.runs = static_cast<int>(seeds.size());
    row.rel_l2_q = postproc::rel_l2_error(mc.mean, truth);
    row.rel_l2_xi = has_xi ? postproc::rel_l2_error(minus(mc.mean, bg), xi_true) : std::numeric_limits<double>::quiet_NaN();
    std::vector<double> per;
    for (const auto& f : set)
      per.push_back(has_xi ? postproc::rel_l2_error(minus(f, bg), xi_true) : postproc::rel_l2_error(f, truth));
    row.median_rel_l2 = median(per);
    row.max_abs_error = max_abs_diff(mc.mean, truth);
    row.peak_error = postproc::peak_location_error(mc.mean, truth);
    row.runtime = runtime;
    rows.push_back(row);

    const std::string stem = std::string(method_name(method)) + "_d" + delta_tag(delta) + (filt ? "_filtered" : "");
    write_field_set(out, stem, mc.mean, window);
    if (seeds.size() > 1) write_field(out(stem + "_std.atf"), mc.std);
  }
  return rows;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream ss;
  ss.precision(10);
  ss << "method,delta,regularization,filtered,runs,rel_l2_xi,rel_l2_q,median_rel_l2,max_abs_error,peak_err,runtime_s\n";
  for (const auto& r : rows)
    ss << r.method << ',' << r.delta << ',' << r.regularization << ',' << (r.filtered ? 1 : 0) << ',' << r.runs << ','
       << (std::isnan(r.rel_l2_xi) ? std::string() : std::to_string(r.rel_l2_xi)) << ',' << r.rel_l2_q << ','
       << r.median_rel_l2 << ',' << r.max_abs_error << ',' << r.peak_error << ',' << r.runtime << '\n';
  return ss.str();
}

json rows_json(const std::vector<MetricsRow>& rows) {
  json a = json::array();
  for (const auto& r : rows)
    a.push_back({{"method", r.method},
                 {"delta", r.delta},
                 {"regularization", r.regularization},
                 {"filtered", r.filtered},
                 {"runs", r.runs},
                 {"rel_l2_xi", std::isnan(r.rel_l2_xi) ? json() : json(r.rel_l2_xi)},
                 {"rel_l2_q", r.rel_l2_q},
                 {"median_rel_l2", r.median_rel_l2},
                 {"max_abs_error", r.max_abs_error},
                 {"peak_err", r.peak_error},
                 {"runtime_s", r.runtime}});
  return a;
}

// ---------------------------------------------------------------- wave model

std::shared_ptr<const TriMesh> wave_mesh(const RunConfig& c) {
  const auto ring = ring_of(c);
  return std::make_shared<const TriMesh>(triangulate_cauchy_disk(c.geometry.radius, c.geometry.outer_radius,
                                                                 c.geometry.mesh_h, c.geometry.transducers, ring.theta0));
}

std::vector<Point> grid_boundary_points(const UniformGrid& g) {
  const auto bd = grid_boundary(g);
  std::vector<Point> pts;
  for (const auto& ij : bd.ij) pts.push_back(g.node(ij[0], ij[1]));
  return pts;
}

double checked_dt(const RunConfig& c, const forward::FemSystem& a, const forward::FemSystem& b,
                  forward::MassKind mass) {
  const double limit = std::min(forward::cfl_limit(a, c.forward.cfl, mass), forward::cfl_limit(b, c.forward.cfl, mass));
  if (c.forward.dt == 0) return 0.5 * limit;
  if (c.forward.dt > limit)
    fail(ErrorKind::kConfig, "forward.dt = " + std::to_string(c.forward.dt) + " exceeds the stability limit " +
                                 std::to_string(limit) + " of this mesh");
  return c.forward.dt;
}

// every stride-th sample
forward::BoundaryTraceSet decimate(const forward::BoundaryTraceSet& t, std::size_t stride) {
  if (stride == 1) return t;
  auto d = t;
  const std::size_t nr = t.receiver_count();
  d.dt = t.dt * static_cast<double>(stride);
  for (std::size_t b = 0; b < t.samples.size(); ++b) {
    const std::size_t n = (t.samples[b] - 1) / stride + 1;
    d.samples[b] = n;
    auto thin = [&](const std::vector<double>& src) {
      std::vector<double> out(n * nr);
      for (std::size_t k = 0; k < n; ++k)
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(k * stride * nr), nr, out.begin() + static_cast<std::ptrdiff_t>(k * nr));
      return out;
    };
    d.p0[b] = thin(t.p0[b]);
    if (b < t.p1.size() && !t.p1[b].empty()) d.p1[b] = thin(t.p1[b]);
  }
  return d;
}

// pairs are source-major, so one-source results concatenate
void merge_sources(laplace::SpectralBoundaryData& into, const laplace::SpectralBoundaryData& more) {
  auto cat = [](auto& a, const auto& b) { a.insert(a.end(), b.begin(), b.end()); };
  cat(into.sources, more.sources);
  cat(into.u_tilde, more.u_tilde);
  cat(into.h, more.h);
  cat(into.value, more.value);
  cat(into.flux, more.flux);
  cat(into.excluded, more.excluded);
  cat(into.warnings, more.warnings);
}

qrm::CauchyData qrm_clean_data(const Context& ctx, const CoefficientField& truth) {
  const auto& c = ctx.cfg;
  const auto grid = grid_of(c);
  const auto ring = ring_of(c);
  if (c.qrm.data == "oracle") {
    return stage("qrm", [&] {
      const qrm::LavrentievOracle orc(minus(truth, kLavrentievBackground), c.qrm.oracle_refine, c.qrm.rho);
      return orc.cauchy_data(grid, ring);
    });
  }
  const auto path = in_dir(ctx, "spectral.ats");
  require_file(path);
  const auto spec = laplace::read_spectral(path);
  return stage("qrm", [&] { return qrm::cauchy_data_from_spectral(spec, grid, ring, c.qrm.rho); });
}

qrm::CauchyData with_noise(const qrm::CauchyData& d, double delta, std::uint64_t seed) {
  if (delta == 0) return d;
  auto n = d;
  n.u = postproc::add_noise(d.u, {delta, mix(seed, 0)});
  n.u_nu = postproc::add_noise(d.u_nu, {delta, mix(seed, 1)});
  return n;
}

double alpha_for(const RunConfig& c, double delta) {
  return c.qrm.alpha_rule == "delta2" && delta > 0 ? delta * delta : c.qrm.alpha;
}

double gamma_for(const RunConfig& c, double delta) {
  return c.bcm.gamma_rule == "delta2" ? std::max(c.bcm.gamma, c.bcm.gamma_scale * delta * delta) : c.bcm.gamma;
}

qrm::QrmOptions qrm_options(const RunConfig& c) {
  qrm::QrmOptions o;
  o.n_basis = c.qrm.n_basis;
  o.rho = c.qrm.rho;
  o.alpha = c.qrm.alpha;
  o.solver = c.qrm.solver == "ldlt" ? qrm::Solver::kLdlt : qrm::Solver::kCg;
  return o;
}

// ---------------------------------------------------------------- BCM model

struct BcmSetup {
  std::shared_ptr<const TriMesh> mesh;
  forward::FemSystem sys;
  bcm::ResponseBank bank;
  bcm::H1Norm norm;
  Eigen::MatrixXd bmass;
  double horizon = 0;
};

double bcm_horizon(const RunConfig& c, const CoefficientField& truth) {
  if (c.bcm.horizon > 0) return c.bcm.horizon;
  const double qmax = std::max(truth.max(), background_of(c));
  return 1.1 * 2 * c.geometry.radius * std::sqrt(qmax);
}

BcmSetup bcm_setup(const RunConfig& c, const CoefficientField& truth) {
  BcmSetup s;
  s.mesh = std::make_shared<const TriMesh>(triangulate_disk(c.geometry.radius, c.bcm.mesh_h));
  s.sys = forward::assemble_fem(s.mesh, truth, background_of(c));
  s.horizon = bcm_horizon(c, truth);
  const double dt_max = forward::cfl_limit(s.sys, c.forward.cfl, forward::MassKind::kConsistent);
  const auto basis = bcm::make_control_basis(*s.mesh, {c.bcm.boundary, c.bcm.time}, s.horizon, dt_max);
  s.bank = bcm::simulate_responses(s.sys, basis);
  s.norm = bcm::h1_norm(*s.mesh);
  s.bmass = bcm::boundary_mass_block(s.sys);
  return s;
}

forward::BoundaryTraceSet bank_to_traces(const BcmSetup& s) {
  forward::BoundaryTraceSet t;
  t.dt = s.bank.basis.dt;
  for (auto v : s.mesh->boundary_nodes) {
    const Point p = s.mesh->nodes[v];
    t.receivers.push_back(p);
    t.normals.push_back((1.0 / norm(p)) * p);
  }
  const std::size_t nr = t.receivers.size();
  for (std::size_t e = 0; e < s.bank.traces.size(); ++e) {
    const auto& m = s.bank.traces[e];
    t.sources.push_back(static_cast<std::int64_t>(e));
    t.samples.push_back(static_cast<std::size_t>(m.rows()));
    std::vector<double> p0(static_cast<std::size_t>(m.rows()) * nr);
    for (Eigen::Index k = 0; k < m.rows(); ++k)
      for (std::size_t r = 0; r < nr; ++r) p0[static_cast<std::size_t>(k) * nr + r] = m(k, static_cast<Eigen::Index>(r));
    t.p0.push_back(std::move(p0));
  }
  return t;
}

void load_bank_traces(BcmSetup& s, const forward::BoundaryTraceSet& t, const std::string& path) {
  const std::size_t nr = s.mesh->boundary_nodes.size();
  if (t.sources.size() != s.bank.traces.size() || t.receiver_count() != nr || std::abs(t.dt - s.bank.basis.dt) > 1e-12 * t.dt)
    fail(ErrorKind::kData, path + " does not match the configured BCM mesh / control basis; rerun `atomo simulate`");
  for (std::size_t e = 0; e < t.sources.size(); ++e) {
    auto& m = s.bank.traces[e];
    if (t.samples[e] != static_cast<std::size_t>(m.rows())) fail(ErrorKind::kData, path + ": trace length mismatch");
    for (Eigen::Index k = 0; k < m.rows(); ++k)
      for (std::size_t r = 0; r < nr; ++r) m(k, static_cast<Eigen::Index>(r)) = t.p0[e][static_cast<std::size_t>(k) * nr + r];
  }
}

bcm::ResponseBank noisy_bank(const bcm::ResponseBank& bank, double delta, std::uint64_t seed) {
  if (delta == 0) return bank;
  auto b = bank;
  for (std::size_t e = 0; e < b.traces.size(); ++e) {
    auto& m = b.traces[e];
    const std::vector<double> flat(m.data(), m.data() + m.size());
    const auto noisy = postproc::add_noise(flat, {delta, mix(seed, e)});
    std::copy(noisy.begin(), noisy.end(), m.data());
  }
  return b;
}

struct BcmRun {
  bcm::BcmSystem system;
  bcm::BcmSolution solution;
  CoefficientField q;
};

BcmRun bcm_reconstruct(const BcmSetup& s, const bcm::HarmonicFamily& fam, const std::vector<bcm::ControlSolution>& controls,
                       const bcm::ResponseBank& data, double gamma, const UniformGrid& grid) {
  const auto n = static_cast<std::size_t>(fam.size());
  std::vector<forward::BoundaryTraceSet> tr(n);
  for (std::size_t a = 0; a < n; ++a) tr[a] = bcm::control_traces(data, controls[a].coeffs, *s.mesh);
  Eigen::MatrixXd bil(fam.size(), fam.size());
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a; b < n; ++b)
      bil(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = bil(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) =
          bcm::bilinear_from_boundary(tr[a], tr[b], s.bmass, s.horizon);
  BcmRun r;
  r.system = bcm::assemble_bcm_system(fam, controls, bil, *s.mesh);
  r.solution = bcm::solve_bcm(r.system, *s.mesh, gamma);
  r.q = bcm::resample_to_grid(*s.mesh, r.solution.q_triangles, grid);
  return r;
}

struct BcmPrepared {
  BcmSetup setup;
  bcm::HarmonicFamily family;
  std::vector<bcm::ControlSolution> controls;
  std::vector<std::string> warnings;
};

BcmPrepared bcm_prepare(const Context& ctx, const CoefficientField& truth) {
  const auto& c = ctx.cfg;
  BcmPrepared p;
  p.setup = stage("bcm", [&] { return bcm_setup(c, truth); });
  const auto path = in_dir(ctx, "control_traces.att");
  require_file(path);
  load_bank_traces(p.setup, forward::read_traces(path), path);
  stage("bcm", [&] {
    p.family = bcm::harmonic_family(c.bcm.k, *p.setup.mesh);
    p.controls.resize(static_cast<std::size_t>(p.family.size()));
    parallel_for(p.controls.size(), [&](std::size_t a) {
      p.controls[a] = bcm::control_for_target(p.family.values.col(static_cast<Eigen::Index>(a)), p.setup.bank, p.setup.norm,
                                              c.bcm.reg, c.bcm.ceiling, p.family.names[a]);
    });
  });
  for (const auto& cs : p.controls)
    p.warnings.insert(p.warnings.end(), cs.warnings.begin(), cs.warnings.end());
  return p;
}

// ---------------------------------------------------------------- invert

InvertReport invert_qrm(const Context& ctx, Outputs& out, const CoefficientField& truth) {
  const auto& c = ctx.cfg;
  InvertReport rep;
  const auto clean = qrm_clean_data(ctx, truth);
  const auto opts = qrm_options(c);
  say(ctx, "qrm: assembling the projected system (N = " + std::to_string(c.qrm.n_basis) + ")");
  const auto base = stage("qrm", [&] { return qrm::prepare(clean, opts); });
  rep.warnings = base.projected.warnings;
  std::map<double, std::shared_ptr<const qrm::TikhonovFactor>> factors;
  for (double delta : c.noise.deltas) {
    Timer t;
    const double alpha = alpha_for(c, delta);
    if (opts.solver == qrm::Solver::kLdlt && !factors.count(alpha))
      factors[alpha] = stage("qrm", [&] { return std::make_shared<const qrm::TikhonovFactor>(base.system, alpha); });
    const auto seeds = seeds_for(c, delta);
    say(ctx, "qrm: delta " + delta_tag(delta) + ", alpha " + std::to_string(alpha) + ", " + std::to_string(seeds.size()) + " run(s)");
    std::vector<CoefficientField> fields(seeds.size());
    std::vector<qrm::QrmSolution> first(1);
    stage("qrm", [&] {
      parallel_for(seeds.size(), [&](std::size_t r) {
        const auto p = qrm::with_data(base, with_noise(clean, delta, seeds[r]));
        auto sol = opts.solver == qrm::Solver::kLdlt ? qrm::solve(p, *factors.at(alpha)) : qrm::solve(p, alpha);
        fields[r] = sol.q;
        if (r == 0) first[0] = std::move(sol);
      });
    });
    for (const auto& w : first[0].warnings)
      if (std::find(rep.warnings.begin(), rep.warnings.end(), w) == rep.warnings.end()) rep.warnings.push_back(w);
    if (delta == 0) qrm::write_solution(out("qrm_d0.atq"), first[0]);
    const auto rows = summarize(ctx, out, Method::kQrm, delta, alpha, seeds, fields, truth, t.seconds());
    rep.rows.insert(rep.rows.end(), rows.begin(), rows.end());
  }
  return rep;
}

InvertReport invert_bcm(const Context& ctx, Outputs& out, const CoefficientField& truth) {
  const auto& c = ctx.cfg;
  InvertReport rep;
  say(ctx, "bcm: responses and controls (K = " + std::to_string(c.bcm.k) + ")");
  const auto prep = bcm_prepare(ctx, truth);
  rep.warnings = prep.warnings;
  const auto grid = grid_of(c);
  for (double delta : c.noise.deltas) {
    Timer t;
    const auto seeds = seeds_for(c, delta);
    const double gamma = gamma_for(c, delta);
    say(ctx, "bcm: delta " + delta_tag(delta) + ", gamma " + std::to_string(gamma) + ", " + std::to_string(seeds.size()) + " run(s)");
    std::vector<CoefficientField> fields(seeds.size());
    std::vector<BcmRun> first(1);
    stage("bcm", [&] {
      parallel_for(seeds.size(), [&](std::size_t r) {
        auto run = bcm_reconstruct(prep.setup, prep.family, prep.controls, noisy_bank(prep.setup.bank, delta, seeds[r]),
                                   gamma, grid);
        fields[r] = run.q;
        if (r == 0) first[0] = std::move(run);
      });
    });
    if (delta == 0) {
      bcm::write_bcm(out("bcm_d0.atb"), first[0].system, first[0].solution);
      rep.bcm_condition = first[0].system.condition;
    }
    if (rep.bcm_condition == 0) rep.bcm_condition = first[0].system.condition;
    for (const auto& w : first[0].system.warnings)
      if (std::find(rep.warnings.begin(), rep.warnings.end(), w) == rep.warnings.end()) rep.warnings.push_back(w);
    const auto rows = summarize(ctx, out, Method::kBcm, delta, gamma, seeds, fields, truth, t.seconds());
    rep.rows.insert(rep.rows.end(), rows.begin(), rows.end());
  }
  return rep;
}

// One line per warning kind ("<kind>: ...") once a kind repeats.
std::vector<std::string> collapse(const std::vector<std::string>& in) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::string>> by_kind;
  for (const auto& w : in) {
    const auto kind = w.substr(0, w.find(':'));
    auto& g = by_kind[kind];
    if (g.empty()) order.push_back(kind);
    if (std::find(g.begin(), g.end(), w) == g.end()) g.push_back(w);
  }
  std::vector<std::string> out;
  for (const auto& k : order) {
    const auto& g = by_kind[k];
    if (g.size() <= 2)
      out.insert(out.end(), g.begin(), g.end());
    else
      out.push_back(g.front() + " (and " + std::to_string(g.size() - 1) + " more like it)");
  }
  return out;
}

template <class R, class F>
R run_command(const Context& ctx, const std::string& command, F&& body) {
  say(ctx, command + ": output " + ctx.out);
  config::validate(ctx.cfg);
  ProvenanceScope tag(ctx.cfg.hash());
  Outputs out(ctx.out);
  Timer t;
  try {
    R rep = body(out);
    rep.seconds = t.seconds();
    rep.warnings = collapse(rep.warnings);
    if (rep.skipped) return rep;
    rep.files = out.files();
    return rep;
  } catch (...) {
    out.discard();
    throw;
  }
}

}  // namespace

// ---------------------------------------------------------------- public

std::string resolve_output(const std::optional<std::string>& flag, const RunConfig& cfg) {
  if (flag && !flag->empty()) return *flag;
  if (const char* env = std::getenv("ATOMO_OUT"); env && *env) return env;
  return cfg.output;
}

UniformGrid grid_of(const RunConfig& c) { return inscribed_grid(c.geometry.radius, c.geometry.grid); }

TransducerRing ring_of(const RunConfig& c) {
  return TransducerRing::staggered({{0, 0}, c.geometry.radius}, c.geometry.transducers);
}

CoefficientField truth_field(const RunConfig& c) {
  const auto grid = grid_of(c);
  const auto& p = c.phantom;
  return stage("phantom", [&] {
    CoefficientField f;
    if (p.kind == "smooth") {
      f = phantom::smooth_field(grid, phantom::calibrate_constants(p.lo, p.hi, p.mollifier), p.mollifier);
    } else if (p.kind == "raster") {
      if (p.raster.empty()) {
        io::Gray8 img{256, 256, phantom::synthetic_raster_pixels(256, 256)};
        f = phantom::raster_to_field(img, p.lo, p.hi, grid);
      } else {
        f = phantom::load_raster(p.raster, p.lo, p.hi, grid);
      }
    } else if (p.kind == "bump") {
      f = phantom::gaussian_bump(grid, p.bump_amplitude, p.bump_x, p.bump_y, p.bump_sigma);
      for (auto& v : f.values) v += kLavrentievBackground;
    } else {
      f = CoefficientField(grid, p.value);
    }
    f.check_admissible();
    return f;
  });
}

double background_of(const RunConfig& c) { return c.phantom.kind == "constant" ? c.phantom.value : kLavrentievBackground; }

std::string delta_tag(double delta) {
  std::ostringstream ss;
  ss << delta;
  return ss.str();
}

const char* method_name(Method m) { return m == Method::kQrm ? "qrm" : "bcm"; }

Report simulate(const Context& ctx) {
  auto rep = run_command<Report>(ctx, "simulate", [&](Outputs& out) {
    const auto& c = ctx.cfg;
    Report rep;
    const auto manifest = in_dir(ctx, "manifest_simulate.json");
    if (!ctx.force && fs::exists(manifest)) {
      const auto m = read_manifest(manifest);
      bool complete = m.value("config_hash", std::string()) == c.hash();
      for (const auto& f : m.value("files", json::array())) complete = complete && fs::exists(in_dir(ctx, f.get<std::string>()));
      if (complete) {
        say(ctx, "simulate: artifacts in " + ctx.out + " are up to date (config " + c.hash() + ")");
        rep.skipped = true;
        return rep;
      }
    }
    fs::create_directories(ctx.out);
    io::write_text(out("config.ini"), c.to_ini());

    say(ctx, "simulate: phantom '" + c.phantom.kind + "' on a " + std::to_string(c.geometry.grid) + "^2 grid");
    const auto truth = truth_field(c);
    write_field_set(out, "truth", truth, window_of(truth));
    const auto grid = grid_of(c);
    const auto ring = ring_of(c);

    // wave model: Cauchy problem on the outer disk, one source per transducer
    const auto mesh = stage("geometry", [&] { return wave_mesh(c); });
    write_mesh(out("wave_mesh.atm"), *mesh);
    // Each source is reduced to its Laplace-domain data at full time
    // resolution right away; only a decimated copy of the measured traces is
    // kept (the full record of every source does not fit in memory at 64^2).
    forward::BoundaryTraceSet meas;
    laplace::SpectralBoundaryData spec;
    stage("forward", [&] {
      const auto sys = forward::assemble_fem(mesh, truth, background_of(c));
      const auto ref_sys = forward::assemble_fem(mesh, std::vector<double>(mesh->triangles.size(), kLavrentievBackground));
      const double dt = checked_dt(c, sys, ref_sys, forward::MassKind::kLumped);
      const auto stride = static_cast<std::size_t>(std::max(1.0, std::floor(c.forward.record_dt / dt)));
      const auto rec = forward::point_receivers(*mesh, grid_boundary_points(grid), grid_boundary(grid).normals, grid.spacing);
      for (const auto& w : rec.warnings) rep.warnings.push_back(w);
      forward::CauchyOptions o;
      o.eps = c.forward.eps;
      o.stop_norm = c.forward.stop_norm;
      o.cfl_const = c.forward.cfl;
      laplace::SpectralOptions so;
      so.pgrid = laplace::PGrid::log_spaced(c.laplace.p_lo, c.laplace.p_hi, c.laplace.p_count);
      so.tau = c.laplace.tau;
      so.background = c.laplace.background == "g0" ? laplace::Background::kG0 : laplace::Background::kReference;
      const bool need_ref = so.background == laplace::Background::kReference;
      const auto m = static_cast<std::size_t>(ring.count);
      say(ctx, "simulate: wave model, " + std::to_string(mesh->node_count()) + " nodes, dt " + std::to_string(dt) + ", " +
                   std::to_string(m) + " sources" + (need_ref ? " x 2 media" : "") + ", horizon " +
                   std::to_string(c.forward.horizon));
      std::vector<forward::BoundaryTraceSet> kept(m);
      std::vector<laplace::SpectralBoundaryData> parts(m);
      parallel_for(m, [&](std::size_t j) {
        const Point src = ring.position(static_cast<int>(j));
        auto a = forward::solve_cauchy_absorbing(sys, src, rec, c.forward.horizon, dt, o);
        forward::BoundaryTraceSet b;
        if (need_ref) b = forward::solve_cauchy_absorbing(ref_sys, src, rec, c.forward.horizon, dt, o);
        parts[j] = stage("laplace", [&] { return laplace::spectral_from_traces(a, need_ref ? &b : nullptr, {src}, so); });
        a.sources = {static_cast<std::int64_t>(j)};
        kept[j] = decimate(a, stride);
      });
      meas = kept[0];
      spec = parts[0];
      for (std::size_t j = 1; j < m; ++j) {
        meas.append(kept[j]);
        merge_sources(spec, parts[j]);
      }
    });
    forward::write_traces(out("cauchy_traces.att"), meas);
    for (const auto& w : spec.warnings) rep.warnings.push_back(w);
    laplace::write_spectral(out("spectral.ats"), spec);

    // BCM model: Neumann responses of the control basis on the disk
    const auto bset = stage("bcm", [&] { return bcm_setup(c, truth); });
    write_mesh(out("bcm_mesh.atm"), *bset.mesh);
    say(ctx, "simulate: BCM model, " + std::to_string(bset.mesh->node_count()) + " nodes, " +
                 std::to_string(bset.bank.basis.size()) + " control responses over [0, " + std::to_string(2 * bset.horizon) + "]");
    forward::write_traces(out("control_traces.att"), bank_to_traces(bset));
    return rep;
  });
  if (!rep.skipped) write_manifest(ctx, "simulate", rep);
  return rep;
}

InvertReport invert(const Context& ctx, Method method) {
  const auto command = std::string("invert_") + method_name(method);
  auto rep = run_command<InvertReport>(ctx, command, [&](Outputs& out) {
    require_simulation(ctx);
    const auto truth_path = in_dir(ctx, "truth.atf");
    require_file(truth_path);
    const auto truth = read_field(truth_path);
    if (!(truth.grid == grid_of(ctx.cfg))) fail(ErrorKind::kData, truth_path + " is on a different grid; rerun `atomo simulate`");
    auto r = method == Method::kQrm ? invert_qrm(ctx, out, truth) : invert_bcm(ctx, out, truth);
    io::write_text(out(std::string("metrics_") + method_name(method) + ".csv"), metrics_csv(r.rows));
    return r;
  });
  json extra{{"metrics", rows_json(rep.rows)}};
  if (method == Method::kBcm) extra["bcm_condition"] = rep.bcm_condition;
  write_manifest(ctx, command, rep, extra);
  return rep;
}

io::Gray8 triptych(const CoefficientField& truth, const CoefficientField& qrm, const CoefficientField& bcm) {
  if (!(truth.grid == qrm.grid) || !(truth.grid == bcm.grid))
    fail(ErrorKind::kInvalidArgument, "compare: fields are on different grids");
  const int n = truth.grid.n, gap = 2;
  io::Gray8 img{3 * n + 2 * gap, 2 * n + gap, {}};
  img.pixels.assign(static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height), 255);
  const auto [lo, hi] = window_of(truth);
  const std::array<const CoefficientField*, 3> panels{&truth, &qrm, &bcm};
  double dmax = 0;
  for (const auto* f : panels) dmax = std::max(dmax, max_abs_diff(*f, truth));
  const double dspan = dmax > 0 ? dmax : 1.0;
  auto put = [&](int row0, int col0, int i, int j, double g) {
    const int y = row0 + (n - 1 - i), x = col0 + j;
    img.pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(img.width) + static_cast<std::size_t>(x)] =
        static_cast<std::uint8_t>(std::lround(255 * std::clamp(g, 0.0, 1.0)));
  };
  for (int p = 0; p < 3; ++p)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const double v = panels[static_cast<std::size_t>(p)]->at(i, j);
        put(0, p * (n + gap), i, j, (v - lo) / (hi - lo));
        put(n + gap, p * (n + gap), i, j, 0.5 + 0.5 * (v - truth.at(i, j)) / dspan);
      }
  return img;
}

CompareReport compare(const Context& ctx) {
  auto rep = run_command<CompareReport>(ctx, "compare", [&](Outputs& out) {
    CompareReport r;
    const auto truth_path = in_dir(ctx, "truth.atf");
    require_file(truth_path);
    const auto truth = read_field(truth_path);
    const double bg = background_of(ctx.cfg);
    const auto xi_true = minus(truth, bg);
    const bool has_xi = !all_zero(xi_true);
    std::map<std::string, std::vector<std::string>> hashes;
    std::ostringstream csv;
    csv.precision(10);
    csv << "delta,method,filtered,rel_l2_xi,rel_l2_q,peak_err\n";
    for (double delta : ctx.cfg.noise.deltas) {
      for (bool filt : {false, true}) {
        if (filt && !ctx.cfg.noise.filter) continue;
        std::map<std::string, CoefficientField> f;
        for (const char* m : {"qrm", "bcm"}) {
          const auto path = in_dir(ctx, std::string(m) + "_d" + delta_tag(delta) + (filt ? "_filtered" : "") + ".atf");
          if (!fs::exists(path))
            fail(ErrorKind::kData, "missing reconstruction " + path + " (run `atomo invert " + m + "` with this config)");
          f[m] = read_field(path);
          hashes[io::read_provenance(path)].push_back(fs::path(path).filename().string());
          CompareRow row;
          row.delta = delta;
          row.method = m;
          row.filtered = filt;
          row.rel_l2_q = postproc::rel_l2_error(f[m], truth);
          row.rel_l2_xi = has_xi ? postproc::rel_l2_error(minus(f[m], bg), xi_true) : std::numeric_limits<double>::quiet_NaN();
          row.peak_error = postproc::peak_location_error(f[m], truth);
          csv << delta << ',' << m << ',' << (filt ? 1 : 0) << ','
              << (std::isnan(row.rel_l2_xi) ? std::string() : std::to_string(row.rel_l2_xi)) << ',' << row.rel_l2_q << ','
              << row.peak_error << '\n';
          r.rows.push_back(row);
        }
        const auto stem = "compare_d" + delta_tag(delta) + (filt ? "_filtered" : "");
        const auto img = triptych(truth, f["qrm"], f["bcm"]);
        io::write_pgm(out(stem + ".pgm"), img);
        const auto [lo, hi] = window_of(truth);
        double dmax = 0;
        for (const auto& [m, fld] : f) dmax = std::max(dmax, max_abs_diff(fld, truth));
        std::ostringstream win;
        win.precision(17);
        win << "min " << lo << "\nmax " << hi << "\ndiff_min " << -dmax << "\ndiff_max " << dmax << '\n';
        io::write_text(out(stem + ".pgm.window"), win.str());
      }
    }
    if (hashes.size() > 1) {
      std::string detail;
      for (const auto& [h, files] : hashes) detail += " " + (h.empty() ? std::string("<none>") : h) + " (" + files.front() + ", ...)";
      if (!ctx.force) fail(ErrorKind::kData, "reconstructions come from different configurations:" + detail + "; pass --force to compare anyway");
      r.warnings.push_back("mixed config hashes:" + detail);
    }
    io::write_text(out("compare.csv"), csv.str());
    return r;
  });
  json rows = json::array();
  for (const auto& r : rep.rows)
    rows.push_back({{"delta", r.delta},
                    {"method", r.method},
                    {"filtered", r.filtered},
                    {"rel_l2_xi", std::isnan(r.rel_l2_xi) ? json() : json(r.rel_l2_xi)},
                    {"rel_l2_q", r.rel_l2_q},
                    {"peak_err", r.peak_error}});
  write_manifest(ctx, "compare", rep, {{"rows", rows}});
  return rep;
}

SweepReport sweep(const Context& ctx) {
  auto rep = run_command<SweepReport>(ctx, "sweep", [&](Outputs& out) {
    const auto& c = ctx.cfg;
    SweepReport r;
    require_simulation(ctx);
    const auto truth_path = in_dir(ctx, "truth.atf");
    require_file(truth_path);
    const auto truth = read_field(truth_path);
    const double bg = background_of(c);
    const auto xi_true = minus(truth, bg);
    if (all_zero(xi_true)) fail(ErrorKind::kConfig, "sweep needs a non-constant phantom (the error is relative to xi*)");

    const auto alphas = c.qrm.alphas.empty() ? qrm::default_alphas() : c.qrm.alphas;
    say(ctx, "sweep: qrm over " + std::to_string(alphas.size()) + " alphas");
    const auto clean = qrm_clean_data(ctx, truth);
    const auto opts = qrm_options(c);
    r.qrm = stage("qrm", [&] {
      const auto problem = qrm::prepare(clean, opts);
      const auto xi_q = minus(truth, kLavrentievBackground);
      return qrm::alpha_sweep(problem, alphas, &xi_q, opts.solver);
    });
    qrm::write_sweep_csv(out("sweep_qrm.csv"), r.qrm);
    const auto& best = r.qrm.solutions[r.qrm.chosen];
    write_field_set(out, "sweep_qrm_best", best.q, window_of(truth));

    r.gammas = c.bcm.gammas.empty() ? std::vector<double>{1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2} : c.bcm.gammas;
    say(ctx, "sweep: bcm over " + std::to_string(r.gammas.size()) + " gammas");
    const auto prep = bcm_prepare(ctx, truth);
    r.warnings = prep.warnings;
    const auto grid = grid_of(c);
    std::vector<CoefficientField> fields(r.gammas.size());
    stage("bcm", [&] {
      parallel_for(r.gammas.size(), [&](std::size_t k) {
        fields[k] = bcm_reconstruct(prep.setup, prep.family, prep.controls, prep.setup.bank, r.gammas[k], grid).q;
      });
    });
    std::ostringstream csv;
    csv.precision(10);
    csv << "gamma,rel_l2_xi\n";
    for (std::size_t k = 0; k < fields.size(); ++k) {
      r.bcm_errors.push_back(postproc::rel_l2_error(minus(fields[k], bg), xi_true));
      if (r.bcm_errors[k] < r.bcm_errors[r.bcm_chosen]) r.bcm_chosen = k;
      csv << r.gammas[k] << ',' << r.bcm_errors[k] << '\n';
    }
    io::write_text(out("sweep_bcm.csv"), csv.str());
    write_field_set(out, "sweep_bcm_best", fields[r.bcm_chosen], window_of(truth));
    return r;
  });
  write_manifest(ctx, "sweep", rep,
                 {{"qrm_alpha", rep.qrm.rows[rep.qrm.chosen].alpha}, {"bcm_gamma", rep.gammas[rep.bcm_chosen]}});
  return rep;
}

bool selftest(const std::function<void(const std::string&)>& log) {
  bool all = true;
  auto check = [&](const std::string& name, auto&& body) {
    std::string detail;
    bool ok = false;
    try {
      ok = body(detail);
    } catch (const std::exception& e) {
      detail = e.what();
    }
    all = all && ok;
    if (log) log(std::string(ok ? "[PASS] " : "[FAIL] ") + name + (detail.empty() ? "" : " (" + detail + ")"));
  };
  auto num = [](double x) {
    std::ostringstream ss;
    ss.precision(3);
    ss << x;
    return ss.str();
  };

  check("truncated Laplace transform of e^-t", [&](std::string& d) {
    const double dt = 1e-3;
    std::vector<double> s(40001);
    for (std::size_t k = 0; k < s.size(); ++k) s[k] = std::exp(-dt * static_cast<double>(k));
    const double err = std::abs(laplace::truncated_laplace(s, dt, 0.0, 1.0) - (1 - std::exp(-80.0)) / 2);
    d = "error " + num(err);
    return err <= 1e-8;
  });
  check("limit extraction from exact samples", [&](std::string& d) {
    const auto g = laplace::PGrid::standard();
    std::vector<double> h;
    for (double p : g.p) {
      const double w = 1 / (std::log(p) + laplace::kEulerGamma);
      h.push_back(2 + 3 * w + 5 * w * w);
    }
    const auto f = laplace::extract_limits(g, h);
    const double err = std::max({std::abs(f.h0 - 2), std::abs(f.h1 - 3), std::abs(f.psi - 5)});
    d = "error " + num(err);
    return err <= 1e-10;
  });
  check("ring basis orthonormal with unit-triangular pairing", [&](std::string& d) {
    const auto b = qrm::build_ring_basis(8, TransducerRing::staggered({{0, 0}, 1.0}, 64));
    const double gram = (b.gram() - Eigen::MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff();
    double tri = 0;
    for (int i = 0; i < 8; ++i) {
      tri = std::max(tri, std::abs(b.pairing(i, i) - 1));
      for (int j = 0; j < i; ++j) tri = std::max(tri, std::abs(b.pairing(i, j)));
    }
    d = "gram " + num(gram) + ", pairing " + num(tri);
    return gram <= 1e-10 && tri <= 1e-8;
  });
  check("noise has the exact relative norm", [&](std::string& d) {
    std::vector<double> u(500);
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = std::sin(0.1 * static_cast<double>(i)) + 2;
    const auto n = postproc::add_noise(u, {0.05, 7});
    double a = 0, b = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      a += (n[i] - u[i]) * (n[i] - u[i]);
      b += u[i] * u[i];
    }
    const double err = std::abs(std::sqrt(a / b) - 0.05);
    d = "error " + num(err);
    return err <= 1e-14;
  });
  check("sigma filter keeps a constant image", [&](std::string&) {
    const CoefficientField f(inscribed_grid(1.0, 16), 4.0);
    return postproc::sigma_filter(f, {}).values == f.values;
  });
  check("boundary bilinear form matches the interior one", [&](std::string& d) {
    auto mesh = std::make_shared<const TriMesh>(triangulate_disk(1.0, 0.3));
    const auto sys = forward::assemble_fem(mesh, std::vector<double>(mesh->triangles.size(), 4.0));
    const double T = 4.4;
    const auto basis = bcm::make_control_basis(*mesh, {8, 4}, T, forward::cfl_limit(sys, 0.9, forward::MassKind::kConsistent));
    const auto bank = bcm::simulate_responses(sys, basis);
    Eigen::VectorXd c1 = Eigen::VectorXd::LinSpaced(basis.size(), -1, 1), c2 = c1.array().sin();
    const auto t1 = bcm::control_traces(bank, c1, *mesh), t2 = bcm::control_traces(bank, c2, *mesh);
    const double b = bcm::bilinear_from_boundary(t1, t2, bcm::boundary_mass_block(sys), T);
    const double o = bcm::bilinear_interior(sys, bank.final_states * c1, bank.final_states * c2);
    const double err = std::abs(b - o) / std::abs(o);
    d = "relative error " + num(err) + ", [f,g] = " + num(o);
    return err <= 1e-3;
  });
  check("config round trip", [&](std::string&) {
    RunConfig c;
    c.noise.deltas = {0, 0.01, 0.05};
    c.qrm.alphas = {1e-6, 5e-6};
    return config::parse(c.to_ini()).hash() == c.hash();
  });
  return all;
}

}  // namespace atomo::pipeline
