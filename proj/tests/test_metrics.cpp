#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "dgm_dte/metrics.hpp"
#include "oracles.hpp"

using namespace dgm;
using dgm::testing::ew_oracle;

TEST(Mae, HandExamples) {
  const std::vector<double> y{10, 20}, yh{12, 16};
  EXPECT_EQ(mae(y, yh), 3.0);
  EXPECT_EQ(mae(y, y), 0.0);
  const std::vector<double> y3{30, 60}, yh3{36, 48};
  EXPECT_DOUBLE_EQ(mae(y3, yh3), 9.0);
}

TEST(Mae, Errors) {
  EXPECT_THROW(mae(std::vector<double>{1, 2}, std::vector<double>{1}), std::invalid_argument);
  EXPECT_THROW(mae(std::vector<double>{}, std::vector<double>{}), std::invalid_argument);
}

TEST(Mape, HandExamples) {
  EXPECT_EQ(mape(std::vector<double>{100}, std::vector<double>{90}), 0.10);
  EXPECT_EQ(mape(std::vector<double>{50, 100}, std::vector<double>{60, 90}), 0.15);
  const std::vector<double> y{5, 7, 11};
  EXPECT_EQ(mape(y, y), 0.0);
}

TEST(Mape, RejectsNonpositiveLabels) {
  EXPECT_THROW(mape(std::vector<double>{10, 0}, std::vector<double>{1, 1}), std::invalid_argument);
  EXPECT_THROW(mape(std::vector<double>{-3}, std::vector<double>{1}), std::invalid_argument);
}

TEST(Mape, MatchesExtendedPrecisionSum) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(1.0, 400.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> y(1 + trial % 50), yh(y.size());
    long double ref = 0.0L;
    for (std::size_t i = 0; i < y.size(); ++i) {
      y[i] = u(rng);
      yh[i] = u(rng);
      ref += std::fabs(static_cast<long double>(y[i]) - yh[i]) / y[i];
    }
    const double expected = static_cast<double>(ref / y.size());
    EXPECT_NEAR(mape(y, yh), expected, 4e-16 * expected) << "trial " << trial;
  }
}

TEST(Ew, HandExamples) {
  std::vector<double> y(10, 0.0), yh(10);
  for (int i = 0; i < 10; ++i) yh[i] = i + 1.0;
  EXPECT_EQ(ew(y, yh, 0.9), 9.0);
  EXPECT_EQ(ew(y, yh, 1.0), 10.0);
  EXPECT_EQ(ew(y, yh, 0.1), 1.0);
  EXPECT_EQ(ew(y, yh, 0.11), 2.0);
  EXPECT_THROW(ew(y, yh, 0.0), std::invalid_argument);
  EXPECT_THROW(ew(y, yh, 1.5), std::invalid_argument);
}

TEST(Ew, ConstantErrors) {
  const std::vector<double> y{1, 2, 3, 4}, yh{3.5, 4.5, 5.5, 6.5};
  for (double p : {0.01, 0.3, 0.5, 0.9, 1.0}) EXPECT_EQ(ew(y, yh, p), 2.5);
}

TEST(Ew, FullCoverageIsMax) {
  const std::vector<double> y{4, 9, 1, 7}, yh{1, 10, 1.5, 0};
  EXPECT_EQ(ew(y, yh, 1.0), 7.0);
}

TEST(Ew, MatchesSortOracle) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> len(1, 200);
  std::exponential_distribution<double> mag(0.05);
  std::uniform_real_distribution<double> pu(0.01, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = static_cast<std::size_t>(len(rng));
    std::vector<double> y(n), yh(n), err(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = 1.0 + mag(rng);
      yh[i] = 1.0 + mag(rng);
      err[i] = std::fabs(y[i] - yh[i]);
    }
    for (double p : {0.5, 0.9, 1.0, pu(rng)}) ASSERT_EQ(ew(y, yh, p), ew_oracle(err, p)) << "trial " << trial;
  }
}

TEST(Ew, MonotoneInP) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 20.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> y(37), yh(37);
    for (std::size_t i = 0; i < y.size(); ++i) {
      y[i] = 50.0 + std::fabs(g(rng));
      yh[i] = 50.0 + g(rng);
    }
    double prev = 0.0;
    for (int k = 1; k <= 100; ++k) {
      const double w = ew(y, yh, k / 100.0);
      EXPECT_GE(w, prev);
      prev = w;
    }
    EXPECT_LE(mae(y, yh), ew(y, yh, 1.0));
  }
}

TEST(Report, SingleShotClassEqualsOverall) {
  const std::vector<double> y{10, 20, 30}, yh{11, 18, 33};
  const std::vector<Shot> s(3, Shot::high);
  const auto r = make_report(y, yh, s, "full");
  ASSERT_EQ(r.per_shot.size(), 1u);
  EXPECT_EQ(r.per_shot.at(Shot::high).mae, r.overall.mae);
  EXPECT_EQ(r.per_shot.at(Shot::high).n, 3u);
  EXPECT_EQ(r.variant, "full");
  EXPECT_EQ(r.n_orders, 3u);
}

TEST(Report, HandPerShot) {
  const std::vector<double> y{10, 20, 100, 200}, yh{12, 16, 130, 190};
  const std::vector<Shot> s{Shot::high, Shot::high, Shot::low, Shot::low};
  const auto r = make_report(y, yh, s, "x");
  EXPECT_EQ(r.per_shot.at(Shot::high).mae, 3.0);
  EXPECT_EQ(r.per_shot.at(Shot::low).mae, 20.0);
  EXPECT_EQ(r.per_shot.count(Shot::medium), 0u);
  EXPECT_EQ(r.overall.mae, 11.5);
  const auto j = to_json(r);
  EXPECT_FALSE(j["per_shot"].contains("medium"));
  EXPECT_EQ(j["per_shot"]["low"]["n"], 2);
}

TEST(Report, PartitionAndWeightedMean) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(1.0, 300.0);
  std::uniform_int_distribution<int> cls(0, 2);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> y(150), yh(150);
    std::vector<Shot> s(150);
    for (std::size_t i = 0; i < y.size(); ++i) {
      y[i] = u(rng);
      yh[i] = u(rng);
      s[i] = static_cast<Shot>(cls(rng));
    }
    const auto r = make_report(y, yh, s, "v");
    std::size_t total = 0;
    double weighted = 0.0;
    for (const auto& [shot, m] : r.per_shot) {
      total += m.n;
      weighted += m.mae * static_cast<double>(m.n);
    }
    EXPECT_EQ(total, r.n_orders);
    EXPECT_NEAR(weighted / static_cast<double>(total), r.overall.mae, 1e-9);
  }
}

TEST(Report, MisalignedShotsThrow) {
  EXPECT_THROW(make_report(std::vector<double>{1, 2}, std::vector<double>{1, 2}, std::vector<Shot>{Shot::high}, "v"),
               std::invalid_argument);
}

TEST(Report, TableMarksAbsentShots) {
  const std::vector<double> y{10, 20}, yh{12, 16};
  const std::vector<EvalReport> reps{make_report(y, yh, std::vector<Shot>{Shot::high, Shot::high}, "full")};
  const auto t = format_table(reps);
  EXPECT_NE(t.find("full"), std::string::npos);
  EXPECT_NE(t.find("3.000"), std::string::npos);
  EXPECT_NE(t.find(" -"), std::string::npos);
  EXPECT_NE(t.find("%"), std::string::npos);
}
