#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dgm_dte/autodiff.hpp"

namespace dgm {

/// Gaussian-kernel smoothing of an empirical label distribution.
struct LabelDensity {
  double bandwidth = 1.0;
  double bin_width = 1.0;
  double grid_start = 0.0;      // center of the first bin
  std::vector<double> density;  // per-bin value, sum * bin_width == 1
  std::vector<double> labels;   // the fitted sample

  std::size_t grid_size() const noexcept { return density.size(); }
  double grid_center(std::size_t i) const { return grid_start + static_cast<double>(i) * bin_width; }
  double grid_end() const { return grid_center(density.empty() ? 0 : density.size() - 1); }
  /// Value of the bin nearest to y (clamped to the grid).
  double at_grid(double y) const;
  /// (1/n) sum_i N(y; y_i, bandwidth^2), y clamped to the grid range.
  double at(double y) const;
};

/// 1.06 * std * n^(-1/5), floored at `floor_hours`.
double silverman_bandwidth(std::span<const double> labels, double floor_hours = 0.5);

/// Kernel density of `tail_labels` on a 1-hour grid that extends
/// `pad_bandwidths` bandwidths past the observed range. Throws on an empty
/// label set; callers skip re-weighting in that case.
LabelDensity estimate_density(std::span<const double> tail_labels, double bandwidth, double pad_bandwidths = 6.0);

enum class DensityLookup { exact, grid };

struct TailWeights {
  std::vector<double> weights;
  /// Factor applied to the raw p^(-1/2) values.
  double normalizer = 1.0;
  /// Densities below 1e-12 clamped before inversion.
  std::size_t clamped = 0;
};

/// w = p(y)^(-1/2), optionally rescaled so the weights average to 1.
TailWeights compute_weights(const LabelDensity& density, std::span<const double> labels, bool normalize = true,
                            DensityLookup lookup = DensityLookup::exact);

/// Row i scaled by weights[i]; the weights are constants on the tape.
Var reweight_embeddings(const Var& e_tail, std::span<const double> weights);

}  // namespace dgm
