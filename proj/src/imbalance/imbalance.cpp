#include "dgm_dte/imbalance.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "dgm_dte/log.hpp"

namespace dgm {

namespace {

double kernel_sum(std::span<const double> labels, double y, double bw) {
  const double norm = 1.0 / (bw * std::sqrt(2.0 * std::numbers::pi));
  double s = 0.0;
  for (double yi : labels) {
    const double z = (y - yi) / bw;
    s += std::exp(-0.5 * z * z);
  }
  return s * norm / static_cast<double>(labels.size());
}

}  // namespace

double LabelDensity::at_grid(double y) const {
  if (density.empty()) throw std::logic_error("density: empty grid");
  const double pos = std::round((y - grid_start) / bin_width);
  const auto idx = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(density.size() - 1)));
  return density[idx];
}

double LabelDensity::at(double y) const {
  if (labels.empty()) throw std::logic_error("density: no fitted labels");
  return kernel_sum(labels, std::clamp(y, grid_start, grid_end()), bandwidth);
}

double silverman_bandwidth(std::span<const double> labels, double floor_hours) {
  const auto n = static_cast<double>(labels.size());
  if (labels.size() < 2) return floor_hours;
  double mean = 0.0;
  for (double y : labels) mean += y;
  mean /= n;
  double var = 0.0;
  for (double y : labels) var += (y - mean) * (y - mean);
  const double sd = std::sqrt(var / (n - 1.0));
  return std::max(floor_hours, 1.06 * sd * std::pow(n, -0.2));
}

LabelDensity estimate_density(std::span<const double> tail_labels, double bandwidth, double pad_bandwidths) {
  if (tail_labels.empty()) {
    throw std::invalid_argument("estimate_density: no tail labels; skip re-weighting for this split");
  }
  if (!(bandwidth > 0.0)) throw std::invalid_argument("estimate_density: bandwidth must be positive");
  LabelDensity d;
  d.bandwidth = bandwidth;
  d.bin_width = 1.0;
  d.labels.assign(tail_labels.begin(), tail_labels.end());
  const auto [lo, hi] = std::minmax_element(d.labels.begin(), d.labels.end());
  d.grid_start = std::floor(*lo - pad_bandwidths * bandwidth);
  const double stop = std::ceil(*hi + pad_bandwidths * bandwidth);
  const auto bins = static_cast<std::size_t>(stop - d.grid_start) + 1;
  d.density.resize(bins);
  double mass = 0.0;
  for (std::size_t i = 0; i < bins; ++i) {
    d.density[i] = kernel_sum(d.labels, d.grid_center(i), bandwidth);
    mass += d.density[i] * d.bin_width;
  }
  // Midpoint sums of narrow kernels drift from 1; renormalize the grid.
  if (mass > 0.0)
    for (auto& v : d.density) v /= mass;
  return d;
}

TailWeights compute_weights(const LabelDensity& density, std::span<const double> labels, bool normalize,
                            DensityLookup lookup) {
  constexpr double kFloor = 1e-12;
  TailWeights out;
  out.weights.reserve(labels.size());
  for (double y : labels) {
    double p = lookup == DensityLookup::exact ? density.at(y) : density.at_grid(y);
    if (p < kFloor) {
      p = kFloor;
      ++out.clamped;
    }
    out.weights.push_back(1.0 / std::sqrt(p));
  }
  if (out.clamped) log::warn("compute_weights: " + std::to_string(out.clamped) + " densities clamped to 1e-12");
  if (normalize && !out.weights.empty()) {
    double s = 0.0;
    for (double w : out.weights) s += w;
    out.normalizer = static_cast<double>(out.weights.size()) / s;
    for (auto& w : out.weights) w *= out.normalizer;
  }
  return out;
}

Var reweight_embeddings(const Var& e_tail, std::span<const double> weights) {
  if (weights.size() != e_tail.rows()) {
    throw std::invalid_argument("reweight_embeddings: " + std::to_string(weights.size()) + " weights for " +
                                std::to_string(e_tail.rows()) + " rows");
  }
  Tensor w({weights.size(), 1}, std::vector<double>(weights.begin(), weights.end()));
  return ops::scale_rows(e_tail, e_tail.tape().constant(std::move(w)));
}

}  // namespace dgm
