#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dgm_dte/imbalance.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace dgm;
using dgm::testing::random_tensor;
using dgm::testing::kernel_oracle;
using dgm::testing::TestRng;

namespace {

const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);

}  // namespace

TEST(Density, SingleLabelPeak) {
  const std::vector<double> y{100.0};
  const auto d = estimate_density(y, 1.0);
  EXPECT_NEAR(d.at(100.0), kInvSqrt2Pi, 1e-12);
  EXPECT_NEAR(d.at(100.0), 0.3989, 1e-4);
}

TEST(Density, MixedLabels) {
  const std::vector<double> y{100, 100, 100, 200};
  const auto d = estimate_density(y, 1.0);
  EXPECT_NEAR(d.at(100.0), 0.75 * kInvSqrt2Pi, 1e-12);
  EXPECT_NEAR(d.at(200.0), 0.25 * kInvSqrt2Pi, 1e-12);
}

TEST(Density, GridMassIsOne) {
  TestRng rng(3);
  std::uniform_real_distribution<double> u(96.0, 400.0);
  for (double bw : {0.7, 1.0, 5.0, 30.0}) {
    std::vector<double> y(50);
    for (auto& v : y) v = u(rng);
    const auto d = estimate_density(y, bw);
    double mass = 0.0;
    for (double p : d.density) {
      EXPECT_GE(p, 0.0);
      mass += p * d.bin_width;
    }
    EXPECT_NEAR(mass, 1.0, 1e-6);
    EXPECT_LE(d.grid_start, *std::min_element(y.begin(), y.end()) - 6.0 * bw);
    EXPECT_GE(d.grid_end(), *std::max_element(y.begin(), y.end()) + 6.0 * bw);
  }
}

TEST(Density, UnrenormalizedGridQuadratureNearOne) {
  const std::vector<double> y{120, 150, 151, 300};
  const double bw = 4.0;
  const auto d = estimate_density(y, bw);
  double mass = 0.0;
  for (std::size_t i = 0; i < d.grid_size(); ++i) mass += kernel_oracle(y, d.grid_center(i), bw);
  EXPECT_NEAR(mass, 1.0, 1e-6);
}

TEST(Density, SymmetricPair) {
  const std::vector<double> y{110.0, 170.0};
  const auto d = estimate_density(y, 9.0);
  for (double off : {0.0, 3.5, 10.0, 30.0, 55.0}) EXPECT_NEAR(d.at(140.0 - off), d.at(140.0 + off), 1e-9);
}

TEST(Density, EmptyInputThrows) {
  EXPECT_THROW(estimate_density(std::vector<double>{}, 1.0), std::invalid_argument);
  EXPECT_THROW(estimate_density(std::vector<double>{100.0}, 0.0), std::invalid_argument);
}

TEST(Density, MatchesDoubleLoopOracle) {
  TestRng rng(11);
  std::uniform_real_distribution<double> u(97.0, 700.0);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> y(40);
    for (auto& v : y) v = u(rng);
    const double bw = 2.0 + trial;
    const auto d = estimate_density(y, bw);
    for (double q : y) EXPECT_NEAR(d.at(q), kernel_oracle(y, q, bw), 1e-9);
    const auto w = compute_weights(d, y, false);
    for (std::size_t i = 0; i < y.size(); ++i)
      EXPECT_NEAR(w.weights[i], 1.0 / std::sqrt(kernel_oracle(y, y[i], bw)), 1e-9 * w.weights[i]);
  }
}

TEST(Density, SilvermanRule) {
  const std::vector<double> y{100, 110, 120, 130, 140};
  const double sd = std::sqrt(250.0);
  EXPECT_NEAR(silverman_bandwidth(y), 1.06 * sd * std::pow(5.0, -0.2), 1e-12);
  EXPECT_EQ(silverman_bandwidth(std::vector<double>{5, 5, 5}), 0.5);
  EXPECT_EQ(silverman_bandwidth(std::vector<double>{5}), 0.5);
}

TEST(Weights, DenseSparseRatio) {
  const std::vector<double> y{100, 100, 100, 200};
  const auto d = estimate_density(y, 1.0);
  const auto w = compute_weights(d, std::vector<double>{100.0, 200.0}, false);
  EXPECT_NEAR(w.weights[1] / w.weights[0], std::sqrt(3.0), 1e-12);
}

TEST(Weights, NormalizedMeanIsOne) {
  TestRng rng(5);
  std::uniform_real_distribution<double> u(100.0, 500.0);
  std::vector<double> y(64);
  for (auto& v : y) v = u(rng);
  const auto d = estimate_density(y, 8.0);
  const auto w = compute_weights(d, y);
  double s = 0.0;
  for (double v : w.weights) {
    EXPECT_GT(v, 0.0);
    EXPECT_TRUE(std::isfinite(v));
    s += v;
  }
  EXPECT_NEAR(s / static_cast<double>(y.size()), 1.0, 1e-9);
}

TEST(Weights, ConstantDensityGivesOnes) {
  const std::vector<double> y{150.0, 150.0, 150.0};
  const auto d = estimate_density(y, 2.0);
  for (double v : compute_weights(d, y).weights) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(Weights, HugeBandwidthApproachesOne) {
  const std::vector<double> y{100, 101, 130, 250, 400, 700};
  const auto d = estimate_density(y, 1e4);
  for (double v : compute_weights(d, y).weights) EXPECT_NEAR(v, 1.0, 1e-2);
  for (double v : compute_weights(d, y, true, DensityLookup::grid).weights) EXPECT_NEAR(v, 1.0, 1e-2);
}

TEST(Weights, Antitone) {
  const std::vector<double> y{100, 102, 103, 105, 150, 300};
  const auto d = estimate_density(y, 3.0);
  const auto w = compute_weights(d, y);
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j)
      if (d.at(y[i]) < d.at(y[j])) EXPECT_GT(w.weights[i], w.weights[j]);
}

TEST(Weights, ClampsVanishingDensity) {
  const LabelDensity zero{1.0, 1.0, 0.0, {0.0, 0.0}, {}};
  const auto wz = compute_weights(zero, std::vector<double>{0.0, 1.0}, false, DensityLookup::grid);
  EXPECT_EQ(wz.clamped, 2u);
  EXPECT_NEAR(wz.weights[0], 1e6, 1e-6);
}

TEST(Weights, GridLookupClampsToRange) {
  const std::vector<double> y{100.0, 120.0};
  const auto d = estimate_density(y, 2.0);
  EXPECT_EQ(d.at_grid(-50.0), d.density.front());
  EXPECT_EQ(d.at_grid(1e9), d.density.back());
  EXPECT_EQ(d.at(1e9), d.at(d.grid_end()));
}

TEST(Reweight, OnesAndSingleRow) {
  Tape tape;
  TestRng rng(2);
  const Tensor e = random_tensor({3, 4}, rng);
  Var v = tape.variable(e);
  const auto same = reweight_embeddings(v, std::vector<double>{1, 1, 1}).value();
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_EQ(same[i], e[i]);
  const auto twice = reweight_embeddings(v, std::vector<double>{1, 2, 1}).value();
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(twice(1, c), 2.0 * e(1, c));
    EXPECT_EQ(twice(0, c), e(0, c));
  }
  EXPECT_THROW(reweight_embeddings(v, std::vector<double>{1, 2}), std::invalid_argument);
}

TEST(Reweight, LoopOracleAndGradient) {
  TestRng rng(8);
  std::uniform_real_distribution<double> u(0.2, 3.0);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor e = random_tensor({6, 5}, rng);
    std::vector<double> w(6);
    for (auto& x : w) x = u(rng);
    Tape tape;
    Var v = tape.variable(e);
    Var out = reweight_embeddings(v, w);
    const Tensor got = out.value();
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(got(i, c), w[i] * e(i, c));
    tape.backward(ops::sum(out));
    const Tensor g = tape.grad(v);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(g(i, c), w[i]);
  }
}
