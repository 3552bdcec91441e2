#include "atomo/config.hpp"

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

#include "atomo/error.hpp"
#include "atomo/io.hpp"

namespace atomo::config {

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& v, const char* what) {
  fail(ErrorKind::kConfig, key + ": cannot parse '" + v + "' as " + what);
}

double to_double(const std::string& key, const std::string& v) {
  double x = 0;
  const auto t = trim(v);
  const auto r = std::from_chars(t.data(), t.data() + t.size(), x);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size() || !std::isfinite(x)) bad_value(key, v, "a number");
  return x;
}

long long to_int(const std::string& key, const std::string& v) {
  long long x = 0;
  const auto t = trim(v);
  const auto r = std::from_chars(t.data(), t.data() + t.size(), x);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size()) bad_value(key, v, "an integer");
  return x;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  const auto t = trim(v);
  const auto r = std::from_chars(t.data(), t.data() + t.size(), x);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size()) bad_value(key, v, "an unsigned integer");
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  const auto t = trim(v);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  bad_value(key, v, "a boolean");
}

std::vector<double> to_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (trim(item).empty()) continue;
    out.push_back(to_double(key, item));
  }
  return out;
}

std::string fmt(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

std::string fmt(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
  return s;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
  bool hashed = true;
};

template <class M>
Field num(M RunConfig::*sec, double M::*f) {
  return {[=](RunConfig& c, const std::string& k, const std::string& v) { (c.*sec).*f = to_double(k, v); },
          [=](const RunConfig& c) { return fmt((c.*sec).*f); }};
}

template <class M>
Field integer(M RunConfig::*sec, int M::*f) {
  return {[=](RunConfig& c, const std::string& k, const std::string& v) {
            const auto x = to_int(k, v);
            if (x < -1000000000LL || x > 1000000000LL) bad_value(k, v, "a 32-bit integer");
            (c.*sec).*f = static_cast<int>(x);
          },
          [=](const RunConfig& c) { return std::to_string((c.*sec).*f); }};
}

template <class M>
Field choice(M RunConfig::*sec, std::string M::*f, std::initializer_list<const char*> allowed) {
  std::vector<const char*> keep(allowed);
  return {[=](RunConfig& c, const std::string& k, const std::string& v) {
            const auto t = trim(v);
            if (std::find_if(keep.begin(), keep.end(), [&](const char* a) { return t == a; }) == keep.end()) {
              std::string list;
              for (const char* a : keep) list += std::string(list.empty() ? "" : "|") + a;
              fail(ErrorKind::kConfig, k + ": '" + v + "' is not one of " + list);
            }
            (c.*sec).*f = t;
          },
          [=](const RunConfig& c) { return (c.*sec).*f; }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> m = [] {
    std::map<std::string, Field> f;
    using C = RunConfig;
    f["run.name"] = {[](C& c, const std::string&, const std::string& v) { c.name = trim(v); },
                     [](const C& c) { return c.name; }, false};
    f["paths.output"] = {[](C& c, const std::string&, const std::string& v) { c.output = trim(v); },
                         [](const C& c) { return c.output; }, false};

    f["geometry.radius"] = num(&C::geometry, &Geometry::radius);
    f["geometry.outer_radius"] = num(&C::geometry, &Geometry::outer_radius);
    f["geometry.grid"] = integer(&C::geometry, &Geometry::grid);
    f["geometry.mesh_h"] = num(&C::geometry, &Geometry::mesh_h);
    f["geometry.transducers"] = integer(&C::geometry, &Geometry::transducers);

    f["phantom.kind"] = choice(&C::phantom, &Phantom::kind, {"smooth", "raster", "bump", "constant"});
    f["phantom.lo"] = num(&C::phantom, &Phantom::lo);
    f["phantom.hi"] = num(&C::phantom, &Phantom::hi);
    f["phantom.mollifier"] = num(&C::phantom, &Phantom::mollifier);
    f["phantom.raster"] = {[](C& c, const std::string&, const std::string& v) { c.phantom.raster = trim(v); },
                           [](const C& c) { return c.phantom.raster; }};
    f["phantom.value"] = num(&C::phantom, &Phantom::value);
    f["phantom.bump_amplitude"] = num(&C::phantom, &Phantom::bump_amplitude);
    f["phantom.bump_x"] = num(&C::phantom, &Phantom::bump_x);
    f["phantom.bump_y"] = num(&C::phantom, &Phantom::bump_y);
    f["phantom.bump_sigma"] = num(&C::phantom, &Phantom::bump_sigma);

    f["forward.dt"] = num(&C::forward, &Forward::dt);
    f["forward.horizon"] = num(&C::forward, &Forward::horizon);
    f["forward.eps"] = num(&C::forward, &Forward::eps);
    f["forward.cfl"] = num(&C::forward, &Forward::cfl);
    f["forward.stop_norm"] = num(&C::forward, &Forward::stop_norm);
    f["forward.record_dt"] = num(&C::forward, &Forward::record_dt);

    f["laplace.p_lo"] = num(&C::laplace, &Laplace::p_lo);
    f["laplace.p_hi"] = num(&C::laplace, &Laplace::p_hi);
    f["laplace.p_count"] = integer(&C::laplace, &Laplace::p_count);
    f["laplace.tau"] = num(&C::laplace, &Laplace::tau);
    f["laplace.background"] = choice(&C::laplace, &Laplace::background, {"reference", "g0"});

    f["qrm.data"] = choice(&C::qrm, &Qrm::data, {"wave", "oracle"});
    f["qrm.n_basis"] = integer(&C::qrm, &Qrm::n_basis);
    f["qrm.rho"] = num(&C::qrm, &Qrm::rho);
    f["qrm.alpha"] = num(&C::qrm, &Qrm::alpha);
    f["qrm.alpha_rule"] = choice(&C::qrm, &Qrm::alpha_rule, {"fixed", "delta2"});
    f["bcm.gamma_rule"] = choice(&C::bcm, &Bcm::gamma_rule, {"fixed", "delta2"});
    f["bcm.gamma_scale"] = num(&C::bcm, &Bcm::gamma_scale);
    f["qrm.alphas"] = {[](C& c, const std::string& k, const std::string& v) { c.qrm.alphas = to_list(k, v); },
                       [](const C& c) { return fmt(c.qrm.alphas); }};
    f["qrm.solver"] = choice(&C::qrm, &Qrm::solver, {"cg", "ldlt"});
    f["qrm.oracle_refine"] = integer(&C::qrm, &Qrm::oracle_refine);

    f["bcm.k"] = integer(&C::bcm, &Bcm::k);
    f["bcm.gamma"] = num(&C::bcm, &Bcm::gamma);
    f["bcm.mesh_h"] = num(&C::bcm, &Bcm::mesh_h);
    f["bcm.boundary"] = integer(&C::bcm, &Bcm::boundary);
    f["bcm.time"] = integer(&C::bcm, &Bcm::time);
    f["bcm.reg"] = num(&C::bcm, &Bcm::reg);
    f["bcm.gammas"] = {[](C& c, const std::string& k, const std::string& v) { c.bcm.gammas = to_list(k, v); },
                       [](const C& c) { return fmt(c.bcm.gammas); }};
    f["bcm.horizon"] = num(&C::bcm, &Bcm::horizon);
    f["bcm.ceiling"] = num(&C::bcm, &Bcm::ceiling);

    f["noise.deltas"] = {[](C& c, const std::string& k, const std::string& v) { c.noise.deltas = to_list(k, v); },
                         [](const C& c) { return fmt(c.noise.deltas); }};
    f["noise.runs"] = integer(&C::noise, &Noise::runs);
    f["noise.seed"] = {[](C& c, const std::string& k, const std::string& v) { c.noise.seed = to_u64(k, v); },
                       [](const C& c) { return std::to_string(c.noise.seed); }};
    f["noise.filter"] = {[](C& c, const std::string& k, const std::string& v) { c.noise.filter = to_bool(k, v); },
                         [](const C& c) { return std::string(c.noise.filter ? "true" : "false"); }};
    f["noise.window"] = integer(&C::noise, &Noise::window);
    f["noise.sigma_mult"] = num(&C::noise, &Noise::sigma_mult);
    f["noise.min_count"] = integer(&C::noise, &Noise::min_count);
    return f;
  }();
  return m;
}

void check(bool ok, const std::string& what) {
  if (!ok) fail(ErrorKind::kConfig, what);
}

}  // namespace

void set_value(RunConfig& c, const std::string& key, const std::string& value) {
  const auto it = fields().find(trim(key));
  if (it == fields().end()) fail(ErrorKind::kConfig, "unknown key '" + key + "'");
  it->second.set(c, it->first, value);
}

std::vector<std::string> known_keys() {
  std::vector<std::string> k;
  for (const auto& [name, f] : fields()) k.push_back(name);
  return k;
}

RunConfig parse(const std::string& text, const std::vector<std::string>& overrides) {
  RunConfig c;
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    fail(ErrorKind::kConfig, std::string("malformed config: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) fail(ErrorKind::kConfig, "key '" + section + "' outside a [section]");
    for (const auto& [key, value] : body) set_value(c, section + "." + key, value.data());
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) fail(ErrorKind::kConfig, "override '" + o + "' is not section.key=value");
    set_value(c, o.substr(0, eq), o.substr(eq + 1));
  }
  return c;
}

RunConfig load(const std::string& path, const std::vector<std::string>& overrides) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const Error&) {
    fail(ErrorKind::kConfig, "cannot read config file " + path);
  }
  return parse(text, overrides);
}

std::string RunConfig::canonical() const {
  std::string s;
  for (const auto& [name, f] : fields())
    if (f.hashed) s += name + "=" + f.get(*this) + "\n";
  return s;
}

namespace {

std::string hex16(const std::string& s) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(io::fnv1a(s)));
  return buf;
}

bool shapes_data(const std::string& key) {
  for (const char* p : {"geometry.", "phantom.", "forward.", "laplace."})
    if (key.rfind(p, 0) == 0) return true;
  return key == "bcm.mesh_h" || key == "bcm.boundary" || key == "bcm.time" || key == "bcm.horizon";
}

}  // namespace

std::string RunConfig::hash() const { return hex16(canonical()); }

std::string RunConfig::data_hash() const {
  std::string s;
  for (const auto& [name, f] : fields())
    if (shapes_data(name)) s += name + "=" + f.get(*this) + "\n";
  return hex16(s);
}

std::string RunConfig::to_ini() const {
  std::string s, section;
  for (const auto& [name, f] : fields()) {
    const auto dot = name.find('.');
    const auto sec = name.substr(0, dot);
    if (sec != section) {
      s += (section.empty() ? "" : "\n") + ("[" + sec + "]\n");
      section = sec;
    }
    s += name.substr(dot + 1) + " = " + f.get(*this) + "\n";
  }
  return s;
}

void validate(const RunConfig& c) {
  const auto& g = c.geometry;
  check(g.radius > 0, "geometry.radius must be positive");
  check(g.outer_radius > g.radius, "geometry.outer_radius must exceed geometry.radius");
  check(g.grid >= 5, "geometry.grid must be at least 5 (QRM stencils)");
  check(g.mesh_h > 0 && g.mesh_h < g.radius, "geometry.mesh_h must lie in (0, radius)");
  check(g.transducers >= 3, "geometry.transducers must be at least 3");

  const auto& p = c.phantom;
  check(p.lo >= 1 && p.hi > p.lo, "phantom range needs 1 <= lo < hi");
  check(p.mollifier > 0 && p.mollifier < 0.5, "phantom.mollifier must lie in (0, 0.5)");
  check(p.value >= 1, "phantom.value must be >= 1");
  check(p.bump_sigma > 0, "phantom.bump_sigma must be positive");
  check(4 + std::min(0.0, p.bump_amplitude) >= 1, "phantom.bump_amplitude makes q < 1");

  const auto& f = c.forward;
  check(f.dt >= 0 && f.horizon > 0 && f.eps >= 0 && f.cfl > 0 && f.stop_norm >= 0 && f.record_dt > 0, "forward values must be non-negative");
  // necessary condition; the exact limit is checked on the mesh
  const double q_lo = p.kind == "constant" ? p.value : p.kind == "bump" ? 4 + std::min(0.0, p.bump_amplitude) : p.lo;
  check(f.dt <= f.cfl * g.mesh_h * std::sqrt(q_lo),
        "forward.dt violates the CFL bound cfl * mesh_h * sqrt(q_min) = " + fmt(f.cfl * g.mesh_h * std::sqrt(q_lo)));

  const auto& l = c.laplace;
  check(l.p_lo > 0 && l.p_hi > l.p_lo && l.p_hi < std::exp(-0.57721566490153286061),
        "laplace p-range must satisfy 0 < p_lo < p_hi < e^-gamma");
  check(l.p_count >= 3, "laplace.p_count must be at least 3 (three limits are fitted)");
  check(l.tau >= 0 && l.tau < f.horizon, "laplace.tau must lie in [0, forward.horizon)");

  const auto& q = c.qrm;
  check(q.n_basis >= 1, "qrm.n_basis must be >= 1");
  check(g.transducers >= 4 * q.n_basis, "geometry.transducers must be >= 4 * qrm.n_basis");
  check(q.rho > 0, "qrm.rho must be positive");
  check(q.alpha > 0, "qrm.alpha must be positive");
  for (std::size_t k = 0; k < q.alphas.size(); ++k) {
    check(q.alphas[k] > 0, "qrm.alphas must be positive");
    if (k) check(q.alphas[k] > q.alphas[k - 1], "qrm.alphas must be ascending");
  }
  check(q.oracle_refine >= 1, "qrm.oracle_refine must be >= 1");

  const auto& b = c.bcm;
  check(b.k >= 1, "bcm.k must be >= 1");
  check(b.gamma >= 0 && b.gamma_scale >= 0 && b.reg >= 0 && b.horizon >= 0 && b.ceiling > 0, "bcm values must be non-negative");
  for (std::size_t k = 0; k < b.gammas.size(); ++k) check(b.gammas[k] > 0, "bcm.gammas must be positive");
  check(b.mesh_h > 0 && b.mesh_h < g.radius, "bcm.mesh_h must lie in (0, radius)");
  check(b.boundary >= 3 && b.time >= 1, "bcm control basis needs >= 3 boundary and >= 1 time functions");

  const auto& n = c.noise;
  check(!n.deltas.empty(), "noise.deltas must not be empty");
  for (double d : n.deltas) check(d >= 0, "noise.deltas must be >= 0");
  check(n.runs >= 1, "noise.runs must be >= 1");
  check(n.window >= 3 && n.window % 2 == 1, "noise.window must be odd and >= 3");
  check(n.window <= g.grid, "noise.window does not fit in the grid");
  check(n.sigma_mult > 0, "noise.sigma_mult must be positive");
  check(n.min_count >= 1, "noise.min_count must be >= 1");
  check(!c.output.empty(), "paths.output must not be empty");
}

}  // namespace atomo::config
