#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "atomo/phantom.hpp"

namespace atomo::postproc {

struct NoiseSpec {
  double delta = 0;  // relative level
  std::uint64_t seed = 0;
};
// U + delta * |U| / |N| * N, N standard normal per entry
std::vector<double> add_noise(std::span<const double> data, const NoiseSpec& spec);

struct SigmaFilterSpec {
  int window = 5;
  double sigma_mult = 2.0;
  int min_count = 4;
  void validate() const;
};
// noise std estimate: 1.4826 * MAD of the horizontal and vertical neighbour
// differences, divided by sqrt(2)
double robust_sigma(const CoefficientField& f);
CoefficientField sigma_filter(const CoefficientField& f, const SigmaFilterSpec& spec);

struct MonteCarloResult {
  CoefficientField mean;
  CoefficientField std;
  std::size_t runs = 0;
};
using Reconstruction = std::function<CoefficientField(std::uint64_t seed)>;
// seeds base_seed .. base_seed + runs - 1
MonteCarloResult monte_carlo(const Reconstruction& pipeline, int runs, std::uint64_t base_seed);
// explicit seed set; the result does not depend on the order of `seeds`
MonteCarloResult monte_carlo(const Reconstruction& pipeline, std::vector<std::uint64_t> seeds);

double rel_l2_error(const CoefficientField& recon, const CoefficientField& truth);
// Chebyshev distance (in cells) between the argmax nodes
int peak_location_error(const CoefficientField& recon, const CoefficientField& truth);

}  // namespace atomo::postproc
