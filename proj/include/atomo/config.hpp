#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace atomo::config {

struct Geometry {
  double radius = 1.0;         // R, transducer ring and BCM domain
  double outer_radius = 1.25;  // R_S, absorbing outer circle of the wave model
  int grid = 32;               // nodes per side of the inscribed square
  double mesh_h = 0.05;        // wave-model mesh
  int transducers = 32;
};

struct Phantom {
  std::string kind = "smooth";  // smooth | raster | bump | constant
  double lo = 3.43;
  double hi = 4.53;
  double mollifier = 0.1;
  std::string raster;           // P5 path; empty = synthetic stand-in
  double value = 4.0;           // constant
  double bump_amplitude = 0.5;  // bump: xi = amplitude * gaussian
  double bump_x = 0.15;
  double bump_y = -0.1;
  double bump_sigma = 0.15;
};

struct Forward {
  double dt = 0;         // 0 = half the stability limit
  double horizon = 600;  // wave-model (Cauchy problem) record length
  double eps = 0;        // source cap width, 0 = 2 h
  double cfl = 0.9;
  double stop_norm = 0;  // early stop of the Cauchy runs, 0 = record the full horizon
  double record_dt = 0.5;  // sampling of the stored traces (spectral data use every step)
};

struct Laplace {
  double p_lo = 0.01;
  double p_hi = 0.3;
  int p_count = 8;
  double tau = 0;
  std::string background = "reference";  // reference | g0
};

struct Qrm {
  std::string data = "wave";  // wave | oracle
  int n_basis = 8;
  double rho = 2.5;
  double alpha = 5e-6;
  std::string alpha_rule = "fixed";  // fixed | delta2 (alpha = delta^2 for noisy data)
  std::vector<double> alphas;        // sweep; empty = library defaults
  std::string solver = "ldlt";       // cg | ldlt
  int oracle_refine = 4;
};

struct Bcm {
  int k = 4;
  double gamma = 1e-8;
  std::string gamma_rule = "delta2";  // fixed | delta2 (gamma = max(gamma, gamma_scale * delta^2))
  double gamma_scale = 10;
  double mesh_h = 0.1;
  int boundary = 16;
  int time = 32;
  double reg = 1e-6;
  std::vector<double> gammas;  // sweep; empty = decades 1e-10 .. 1e-2
  double horizon = 0;  // 0 = 1.1 * 2R * sqrt(q_max)
  double ceiling = 0.1;
};

struct Noise {
  std::vector<double> deltas{0.0};
  int runs = 20;
  std::uint64_t seed = 1;
  bool filter = true;
  int window = 5;
  double sigma_mult = 2.0;
  int min_count = 4;
};

struct RunConfig {
  std::string name = "run";
  Geometry geometry;
  Phantom phantom;
  Forward forward;
  Laplace laplace;
  Qrm qrm;
  Bcm bcm;
  Noise noise;
  std::string output = "out";  // [paths] output; not part of the hash

  // sorted "section.key=value" lines of everything that affects results
  std::string canonical() const;
  // 16 hex digits of FNV-1a over canonical()
  std::string hash() const;
  // same over the keys that shape the simulated data (geometry, phantom,
  // forward, laplace, the BCM mesh and control basis); inversion settings
  // can change without re-simulating
  std::string data_hash() const;
  // effective configuration as a loadable file
  std::string to_ini() const;
};

// Keys are "section.key"; values parse with the key's type.  Unknown keys and
// malformed values are config errors.
RunConfig parse(const std::string& text, const std::vector<std::string>& overrides = {});
RunConfig load(const std::string& path, const std::vector<std::string>& overrides = {});
void set_value(RunConfig& c, const std::string& key, const std::string& value);
std::vector<std::string> known_keys();

// Cross-field checks that need no mesh (ranges, p-grid, filter window,
// a necessary CFL bound); config error on the first violation.
void validate(const RunConfig& c);

}  // namespace atomo::config
