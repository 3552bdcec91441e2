#include "atomo/postproc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "atomo/error.hpp"
#include "atomo/parallel.hpp"

namespace atomo::postproc {

std::vector<double> add_noise(std::span<const double> data, const NoiseSpec& spec) {
  require(spec.delta >= 0, "noise level must be non-negative");
  std::vector<double> out(data.begin(), data.end());
  if (spec.delta == 0) return out;
  double un = 0;
  for (double v : data) un += v * v;
  un = std::sqrt(un);
  require(un > 0, "add_noise: relative noise on an all-zero vector is undefined");
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> n01;
  std::vector<double> noise(data.size());
  double nn = 0;
  for (auto& z : noise) {
    z = n01(rng);
    nn += z * z;
  }
  const double scale = spec.delta * un / std::sqrt(nn);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += scale * noise[i];
  return out;
}

void SigmaFilterSpec::validate() const {
  require(window >= 3 && window % 2 == 1, "sigma filter window must be odd and >= 3");
  require(sigma_mult > 0, "sigma filter multiplier must be positive");
  require(min_count >= 1, "sigma filter min_count must be >= 1");
}

namespace {

double median(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<long>(mid)));
  return m;
}

}  // namespace

double robust_sigma(const CoefficientField& f) {
  const int n = f.grid.n;
  std::vector<double> d;
  d.reserve(2 * static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (j + 1 < n) d.push_back(f.at(i, j + 1) - f.at(i, j));
      if (i + 1 < n) d.push_back(f.at(i + 1, j) - f.at(i, j));
    }
  const double med = median(d);
  for (auto& v : d) v = std::abs(v - med);
  return 1.4826 * median(d) / std::sqrt(2.0);
}

CoefficientField sigma_filter(const CoefficientField& f, const SigmaFilterSpec& spec) {
  spec.validate();
  const int n = f.grid.n, half = spec.window / 2;
  require(spec.window <= n, "sigma filter window larger than the grid");
  const double thr = spec.sigma_mult * robust_sigma(f);
  CoefficientField out = f;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double c = f.at(i, j);
      // mean as centre + mean offset: a constant window returns c bit for bit
      double acc = 0;
      int count = 0;
      for (int a = std::max(0, i - half); a <= std::min(n - 1, i + half); ++a)
        for (int b = std::max(0, j - half); b <= std::min(n - 1, j + half); ++b) {
          const double d = f.at(a, b) - c;
          if (std::abs(d) <= thr) {
            acc += d;
            ++count;
          }
        }
      if (count >= spec.min_count) {
        out.values[f.grid.index(i, j)] = c + acc / count;
        continue;
      }
      double s = 0;
      int m = 0;
      const int di[] = {-1, 1, 0, 0}, dj[] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const int a = i + di[k], b = j + dj[k];
        if (a < 0 || b < 0 || a >= n || b >= n) continue;
        s += f.at(a, b) - c;
        ++m;
      }
      out.values[f.grid.index(i, j)] = c + s / m;
    }
  return out;
}

MonteCarloResult monte_carlo(const Reconstruction& pipeline, int runs, std::uint64_t base_seed) {
  require(runs >= 1, "monte_carlo: need at least one run");
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(runs));
  std::iota(seeds.begin(), seeds.end(), base_seed);
  return monte_carlo(pipeline, std::move(seeds));
}

MonteCarloResult monte_carlo(const Reconstruction& pipeline, std::vector<std::uint64_t> seeds) {
  require(!seeds.empty(), "monte_carlo: need at least one run");
  std::sort(seeds.begin(), seeds.end());
  std::vector<CoefficientField> fields(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t r) {
    try {
      fields[r] = pipeline(seeds[r]);
    } catch (const Error& e) {
      fail(e.kind(), "monte-carlo run " + std::to_string(r) + " (seed " + std::to_string(seeds[r]) + "): " + e.what());
    }
  });
  const auto& grid = fields.front().grid;
  for (const auto& f : fields)
    if (!(f.grid == grid)) fail(ErrorKind::kData, "monte-carlo runs returned different grids");
  const std::size_t nn = grid.size(), runs = fields.size();
  MonteCarloResult res;
  res.runs = runs;
  res.mean = CoefficientField(grid, 0.0);
  res.std = CoefficientField(grid, 0.0);
  for (std::size_t i = 0; i < nn; ++i) {
    double s = 0;
    for (const auto& f : fields) s += f.values[i];
    const double m = s / static_cast<double>(runs);
    double v = 0;
    for (const auto& f : fields) v += (f.values[i] - m) * (f.values[i] - m);
    res.mean.values[i] = m;
    res.std.values[i] = runs > 1 ? std::sqrt(v / static_cast<double>(runs - 1)) : 0.0;
  }
  return res;
}

double rel_l2_error(const CoefficientField& recon, const CoefficientField& truth) {
  if (!(recon.grid == truth.grid)) fail(ErrorKind::kInvalidArgument, "rel_l2_error: grids differ");
  double num = 0, den = 0;
  for (std::size_t i = 0; i < truth.values.size(); ++i) {
    num += (recon.values[i] - truth.values[i]) * (recon.values[i] - truth.values[i]);
    den += truth.values[i] * truth.values[i];
  }
  require(den > 0, "rel_l2_error: truth is identically zero");
  return std::sqrt(num / den);
}

int peak_location_error(const CoefficientField& recon, const CoefficientField& truth) {
  if (!(recon.grid == truth.grid)) fail(ErrorKind::kInvalidArgument, "peak_location_error: grids differ");
  auto argmax = [](const CoefficientField& f) {
    return static_cast<std::size_t>(std::max_element(f.values.begin(), f.values.end()) - f.values.begin());
  };
  const int n = truth.grid.n;
  const auto a = argmax(recon), b = argmax(truth);
  const int ia = static_cast<int>(a) / n, ja = static_cast<int>(a) % n;
  const int ib = static_cast<int>(b) / n, jb = static_cast<int>(b) % n;
  return std::max(std::abs(ia - ib), std::abs(ja - jb));
}

}  // namespace atomo::postproc
