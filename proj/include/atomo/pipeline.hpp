#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "atomo/bcm.hpp"
#include "atomo/config.hpp"
#include "atomo/geometry.hpp"
#include "atomo/phantom.hpp"
#include "atomo/qrm.hpp"

// The comparative study end to end: data simulation, both inversions over
// the configured noise levels, reports.  Files land in one output directory:
//
//   config.ini, truth.{atf,pgm,csv}           simulate
//   wave_mesh.atm, bcm_mesh.atm
//   cauchy_traces.att                        wave model, measured (every forward.record_dt)
//   spectral.ats                             Laplace-domain limits
//   control_traces.att                       BCM: Dirichlet trace per control basis element
//   {qrm,bcm}_d<delta>[_filtered|_std].{atf,pgm,csv}, metrics_{qrm,bcm}.csv,
//   qrm_d0.atq, bcm_d0.atb                   invert
//   compare_d<delta>[_filtered].pgm, compare.csv   compare
//   sweep_qrm.csv, sweep_bcm.csv             sweep
//   manifest_<command>.json                  every command
namespace atomo::pipeline {

using config::RunConfig;

struct Context {
  RunConfig cfg;
  std::string out;  // output directory
  std::function<void(const std::string&)> log;  // progress lines; may be empty
  bool force = false;  // simulate: recompute even if up to date; compare: accept mixed hashes
};

// Output root: --out beats ATOMO_OUT, which beats [paths] output.
std::string resolve_output(const std::optional<std::string>& flag, const RunConfig& cfg);

UniformGrid grid_of(const RunConfig& c);
TransducerRing ring_of(const RunConfig& c);
// q on the grid
CoefficientField truth_field(const RunConfig& c);
// q outside the inscribed square (disk models)
double background_of(const RunConfig& c);
// "0", "0.01", ... as used in file names
std::string delta_tag(double delta);

struct Report {
  std::vector<std::string> files;
  std::vector<std::string> warnings;
  double seconds = 0;
  bool skipped = false;  // simulate: artifacts already up to date
};

Report simulate(const Context& ctx);

enum class Method { kQrm, kBcm };
const char* method_name(Method m);

struct MetricsRow {
  std::string method;
  double delta = 0;
  double regularization = 0;  // alpha or gamma
  bool filtered = false;
  int runs = 0;
  double rel_l2_xi = 0;      // mean field, perturbation xi = q - q_background; NaN if xi* = 0
  double rel_l2_q = 0;       // mean field, q
  double median_rel_l2 = 0;  // per-run errors (xi, else q)
  double max_abs_error = 0;  // mean field, q
  int peak_error = 0;        // cells between argmax of the mean and of the truth
  double runtime = 0;
};

struct InvertReport : Report {
  std::vector<MetricsRow> rows;
  double bcm_condition = 0;
};
InvertReport invert(const Context& ctx, Method method);

struct CompareRow {
  double delta = 0;
  std::string method;
  bool filtered = false;
  double rel_l2_xi = 0;
  double rel_l2_q = 0;
  int peak_error = 0;
};
struct CompareReport : Report {
  std::vector<CompareRow> rows;
};
CompareReport compare(const Context& ctx);

struct SweepReport : Report {
  qrm::SweepResult qrm;
  std::vector<double> gammas;
  std::vector<double> bcm_errors;
  std::size_t bcm_chosen = 0;
};
// noiseless alpha sweep (QRM) and gamma sweep (BCM) against the truth
SweepReport sweep(const Context& ctx);

// Composite image: top row truth | QRM | BCM on a common window, bottom row
// the differences from the truth on a symmetric window; 2-pixel separators.
io::Gray8 triptych(const CoefficientField& truth, const CoefficientField& qrm, const CoefficientField& bcm);

// quick built-in oracle checks; one line per check through `log`
bool selftest(const std::function<void(const std::string&)>& log);

}  // namespace atomo::pipeline
