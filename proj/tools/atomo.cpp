// atomo: simulate / invert / compare / sweep / selftest
#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <new>
#include <optional>
#include <string>
#include <vector>

#include "atomo/config.hpp"
#include "atomo/error.hpp"
#include "atomo/parallel.hpp"
#include "atomo/pipeline.hpp"

namespace {

using namespace atomo;

struct Flags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  unsigned workers = 0;
  std::optional<std::string> out;
  bool force = false;
  bool quiet = false;
};

pipeline::Context context(const Flags& f) {
  auto overrides = f.sets;
  if (f.seed) overrides.push_back("noise.seed=" + std::to_string(*f.seed));
  pipeline::Context ctx;
  ctx.cfg = f.config.empty() ? config::parse("", overrides) : config::load(f.config, overrides);
  ctx.out = pipeline::resolve_output(f.out, ctx.cfg);
  ctx.force = f.force;
  if (!f.quiet) ctx.log = [](const std::string& s) { std::cerr << s << '\n'; };
  set_worker_count(f.workers);
  return ctx;
}

void print_warnings(const pipeline::Report& r) {
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
}

void print_rows(const std::vector<pipeline::MetricsRow>& rows) {
  std::cout << std::left << std::setw(5) << "meth" << std::setw(8) << "delta" << std::setw(11) << "reg" << std::setw(6)
            << "filt" << std::setw(6) << "runs" << std::setw(12) << "rel_l2_xi" << std::setw(12) << "rel_l2_q"
            << std::setw(12) << "max_abs" << "peak\n";
  for (const auto& r : rows)
    std::cout << std::setw(5) << r.method << std::setw(8) << r.delta << std::setw(11) << r.regularization << std::setw(6)
              << (r.filtered ? "yes" : "no") << std::setw(6) << r.runs << std::setw(12) << r.rel_l2_xi << std::setw(12)
              << r.rel_l2_q << std::setw(12) << r.max_abs_error << r.peak_error << '\n';
}

int run(int argc, char** argv) {
  CLI::App app{"Coefficient reconstruction for the 2D acoustic wave equation: QRM vs BCM"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "run configuration (INI)")->check(CLI::ExistingFile);
  app.add_option("--set", f.sets, "override, section.key=value (repeatable)");
  app.add_option("--seed", f.seed, "noise seed (overrides noise.seed)");
  app.add_option("--workers", f.workers, "worker threads, 0 = all cores");
  app.add_option("--out", f.out, "output directory (beats ATOMO_OUT and [paths] output)");
  app.add_flag("-q,--quiet", f.quiet, "no progress lines");

  auto* sim = app.add_subcommand("simulate", "forward data for both models");
  sim->add_flag("--force", f.force, "recompute even if the artifacts are up to date");
  auto* inv = app.add_subcommand("invert", "reconstruct q from the simulated data");
  std::string method = "both";
  inv->add_option("method", method, "qrm | bcm | both")->check(CLI::IsMember({"qrm", "bcm", "both"}));
  auto* cmp = app.add_subcommand("compare", "triptychs and error table over the noise levels");
  cmp->add_flag("--force", f.force, "accept reconstructions from different configurations");
  auto* swp = app.add_subcommand("sweep", "regularization sweeps against the truth");
  auto* st = app.add_subcommand("selftest", "built-in oracle checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (st->parsed()) {
    set_worker_count(f.workers);
    return pipeline::selftest([](const std::string& s) { std::cout << s << '\n'; }) ? 0 : 4;
  }
  const auto ctx = context(f);
  if (sim->parsed()) {
    const auto r = pipeline::simulate(ctx);
    print_warnings(r);
    std::cout << (r.skipped ? "up to date: " : "wrote ") << ctx.out << " (config " << ctx.cfg.hash() << ")\n";
  } else if (inv->parsed()) {
    std::vector<pipeline::MetricsRow> rows;
    for (auto m : {pipeline::Method::kQrm, pipeline::Method::kBcm}) {
      if (method != "both" && method != pipeline::method_name(m)) continue;
      const auto r = pipeline::invert(ctx, m);
      print_warnings(r);
      rows.insert(rows.end(), r.rows.begin(), r.rows.end());
      if (m == pipeline::Method::kBcm) std::cout << "bcm condition number " << r.bcm_condition << '\n';
    }
    print_rows(rows);
  } else if (cmp->parsed()) {
    const auto r = pipeline::compare(ctx);
    print_warnings(r);
    for (const auto& row : r.rows)
      std::cout << "delta " << row.delta << ' ' << row.method << (row.filtered ? " filtered" : "") << ": rel_l2_q "
                << row.rel_l2_q << ", peak " << row.peak_error << '\n';
  } else if (swp->parsed()) {
    const auto r = pipeline::sweep(ctx);
    print_warnings(r);
    std::cout << "qrm alpha " << r.qrm.rows[r.qrm.chosen].alpha << " (rel_l2_xi " << r.qrm.rows[r.qrm.chosen].error.value_or(-1)
              << ")\nbcm gamma " << r.gammas[r.bcm_chosen] << " (rel_l2_xi " << r.bcm_errors[r.bcm_chosen] << ")\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const atomo::Error& e) {
    std::cerr << "atomo: " << e.what() << '\n';
    return atomo::exit_code_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "atomo: io: " << e.what() << '\n';
    return 3;
  } catch (const std::bad_alloc&) {
    std::cerr << "atomo: out of memory\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "atomo: " << e.what() << '\n';
    return 4;
  }
}
