#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "mvpp/models.hpp"
#include "mvpp/qsd.hpp"
#include "oracles.hpp"

using namespace mvpp;

namespace {

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

oracle::Matrix to_rows(const DenseMatrix& g) {
  oracle::Matrix m(g.rows(), std::vector<double>(g.cols()));
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j) m[i][j] = g(i, j);
  return m;
}

// max_j |(nu G)_j - theta nu_j|
double fixed_point_residual(const DenseMatrix& g, const ReferenceDistribution& r) {
  double worst = 0.0;
  for (std::size_t j = 0; j < g.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < g.rows(); ++i) s += r.pmf_values[i] * g(i, j);
    worst = std::max(worst, std::abs(s - *r.eigenvalue * r.pmf_values[j]));
  }
  return worst;
}

}  // namespace

TEST(PowerIteration, PeriodicTwoState) {
  const auto r = power_iteration_qsd(DenseMatrix{{0.0, 0.9}, {0.9, 0.0}});
  ASSERT_EQ(r.pmf_values.size(), 2u);
  EXPECT_NEAR(r.pmf_values[0], 0.5, 1e-10);
  EXPECT_NEAR(r.pmf_values[1], 0.5, 1e-10);
  EXPECT_NEAR(*r.eigenvalue, 0.9, 1e-10);
  EXPECT_FALSE(r.warnings.empty());
}

TEST(PowerIteration, ReducibleWarnsAndReturnsUniform) {
  const auto r = power_iteration_qsd(DenseMatrix::identity(3).scaled(0.5));
  EXPECT_FALSE(r.warnings.empty());
  for (double p : r.pmf_values) EXPECT_NEAR(p, 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(*r.eigenvalue, 0.5, 1e-12);
}

TEST(PowerIteration, ScaleInvariant) {
  const auto g = three_state_chain();
  const auto a = power_iteration_qsd(g);
  const auto b = power_iteration_qsd(g.scaled(0.5));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.pmf_values[i], b.pmf_values[i], 1e-10);
  EXPECT_NEAR(*b.eigenvalue, 0.5 * *a.eigenvalue, 1e-10);
}

TEST(PowerIteration, FixedPointResidual) {
  const auto g = three_state_chain();
  PowerIterationOptions opt;
  const auto r = power_iteration_qsd(g, opt);
  EXPECT_LT(fixed_point_residual(g, r), 10.0 * opt.tol);
  EXPECT_NEAR(sum(r.pmf_values), 1.0, 1e-12);
}

TEST(PowerIteration, MatchesIndependentIteration) {
  const auto g = three_state_chain();
  double theta = 0.0;
  const auto want = oracle::left_perron(to_rows(g), theta);
  const auto r = power_iteration_qsd(g);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(r.pmf_values[i], want[i], 1e-9);
  EXPECT_NEAR(*r.eigenvalue, theta, 1e-9);
}

TEST(PowerIteration, RejectsBadMatrices) {
  EXPECT_THROW(power_iteration_qsd(DenseMatrix{{0.6, 0.6}, {0.1, 0.1}}), InvalidMatrix);
  EXPECT_THROW(power_iteration_qsd(DenseMatrix{{-0.1, 0.5}, {0.1, 0.1}}), InvalidMatrix);
  EXPECT_THROW(power_iteration_qsd(DenseMatrix(2, 3)), InvalidMatrix);
}

TEST(GeneratorQsd, NegativeDiagonal) {
  // off-diagonal part of a symmetric signed kernel: eigenvector is uniform
  const DenseMatrix q{{-1.0, 2.0}, {2.0, -1.0}};
  const auto r = generator_qsd(q);
  EXPECT_NEAR(r.pmf_values[0], 0.5, 1e-10);
  EXPECT_NEAR(*r.eigenvalue, 1.0, 1e-9);
  EXPECT_THROW(generator_qsd(DenseMatrix{{0.0, -1.0}, {1.0, 0.0}}), InvalidMatrix);
}

TEST(GeneratorQsd, AgreesWithShiftedOracle) {
  const DenseMatrix q{{-0.5, 0.3, 0.1}, {0.2, -1.0, 0.4}, {0.6, 0.1, -0.2}};
  const auto r = generator_qsd(q);
  auto shifted = to_rows(q);
  for (std::size_t i = 0; i < 3; ++i) shifted[i][i] += 1.0;
  double theta = 0.0;
  const auto want = oracle::left_perron(shifted, theta);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(r.pmf_values[i], want[i], 1e-9);
  EXPECT_NEAR(*r.eigenvalue, theta - 1.0, 1e-9);
}

TEST(AnalyticReference, Poisson) {
  const auto r = analytic_reference("poisson", {{"rate", 0.5}});
  EXPECT_NEAR(r.pmf(0), std::exp(-0.5), 1e-15);
  EXPECT_NEAR(sum(r.pmf_values), 1.0, 1e-9);
  const auto want = oracle::poisson_pmf(0.5, r.pmf_values.size());
  EXPECT_LT(oracle::tv(r.pmf_values, want), 1e-12);
  EXPECT_THROW(analytic_reference("poisson"), InvalidParams);
}

TEST(AnalyticReference, GeometricHalf) {
  const auto r = analytic_reference("geometric_half");
  EXPECT_DOUBLE_EQ(r.pmf(0), 0.5);
  EXPECT_DOUBLE_EQ(r.pmf(3), 0.0625);
  EXPECT_NEAR(sum(r.pmf_values), 1.0, 1e-9);
}

TEST(AnalyticReference, ProtectedPi) {
  const auto r = analytic_reference("protected_pi");
  EXPECT_NEAR(r.pmf(0), 1.0 - 2.0 / std::exp(1.0), 1e-15);
  EXPECT_NEAR(sum(r.pmf_values), 1.0, 1e-9);
  const auto nu = analytic_reference("protected_nu");
  EXPECT_NEAR(sum(nu.pmf_values), 1.0, 1e-9);
}

TEST(AnalyticReference, MmJumpChain) {
  const auto r = analytic_reference("mm_jump_chain", {{"lambda", 1.0}, {"mu", 2.0}});
  EXPECT_NEAR(sum(r.pmf_values), 1.0, 1e-9);
  EXPECT_LT(oracle::tv(r.pmf_values, oracle::mm_jump_chain_pmf(1.0, 2.0, r.pmf_values.size())), 1e-12);
}

TEST(AnalyticReference, Gaussian) {
  const auto r = analytic_reference("gaussian", {{"mean", 0.0}, {"variance", 0.25}});
  EXPECT_FALSE(r.discrete());
  EXPECT_NEAR(r.cdf(0.0), 0.5, 1e-15);
  EXPECT_NEAR(r.cdf(0.5), oracle::normal_cdf(0.5, 0.0, 0.5), 1e-14);
  EXPECT_THROW(r.to_measure(), DimensionUnsupported);
}

TEST(AnalyticReference, Unknown) { EXPECT_THROW(analytic_reference("zipf"), UnknownReference); }

TEST(TruncateBd, RowsAndSums) {
  const auto g = truncate_bd_kernel([](std::int64_t) { return 0.3; }, [](std::int64_t) { return 0.6; }, 5);
  EXPECT_DOUBLE_EQ(g.row_sum(0), 0.3);
  for (std::size_t x = 1; x < 4; ++x) EXPECT_DOUBLE_EQ(g.row_sum(x), 0.9);
  EXPECT_DOUBLE_EQ(g.row_sum(4), 0.6);
  EXPECT_DOUBLE_EQ(g(2, 3), 0.3);
  EXPECT_DOUBLE_EQ(g(2, 1), 0.6);
  EXPECT_THROW(truncate_bd_kernel([](std::int64_t) { return 0.3; }, [](std::int64_t) { return 0.6; }, 1), InvalidParams);
}

TEST(TruncateBd, MatchesOracleAndIsStable) {
  auto b = [](std::int64_t x) { return 0.1 / static_cast<double>(x + 1); };
  auto d = [](std::int64_t) { return 0.9; };
  const auto r100 = power_iteration_qsd(truncate_bd_kernel(b, d, 100));
  const auto r200 = power_iteration_qsd(truncate_bd_kernel(b, d, 200));
  double theta = 0.0;
  const auto want = oracle::bd_qsd([](std::size_t x) { return 0.1 / static_cast<double>(x + 1); }, [](std::size_t) { return 0.9; }, 100, theta);
  EXPECT_LT(oracle::tv(r100.pmf_values, want), 1e-8);
  EXPECT_NEAR(*r100.eigenvalue, theta, 1e-9);
  EXPECT_LT(oracle::tv(r100.pmf_values, r200.pmf_values), 1e-8);
}

TEST(KernelMatrix, RrtRows) {
  const auto spec = rrt_outdegree_urn();
  const auto g = kernel_matrix(spec.kernel, 10);
  for (std::size_t x = 0; x < 9; ++x) EXPECT_NEAR(g.row_sum(x), 1.0, 1e-12);
}

TEST(NuR, ProtectedFixedPoint) {
  const double e = std::exp(1.0);
  const auto spec = protected_nodes_urn();
  const auto nu = analytic_reference("protected_nu");
  const auto m = nu_R(nu, spec.kernel, nu.pmf_values.size());
  EXPECT_FALSE(m.nonnegative());
  const auto pi = analytic_reference("protected_pi");
  // normalised nu R is the limit pi
  for (std::int64_t x = 0; x < 10; ++x) EXPECT_NEAR(m.weight_at(x) / m.mass(), pi.pmf(x), 1e-12) << x;
  // unnormalised nu has mass 2e/(1+2e); its image has pi_0 mass (e-2)/(1+2e) and total e/(1+2e)
  const auto raw = nu_R(nu, spec.kernel, nu.pmf_values.size(), 2.0 * e / (1.0 + 2.0 * e));
  EXPECT_NEAR(raw.weight_at(0), (e - 2.0) / (1.0 + 2.0 * e), 1e-12);
  EXPECT_NEAR(raw.mass(), e / (1.0 + 2.0 * e), 1e-12);
}

TEST(NuR, MmJumpChainIsInvariant) {
  const auto spec = mm_infty_urn(1.0, 2.0);
  const auto nu = analytic_reference("mm_jump_chain", {{"lambda", 1.0}, {"mu", 2.0}});
  const auto m = nu_R(nu, spec.kernel, nu.pmf_values.size());
  std::vector<double> got(nu.pmf_values.size() + 1, 0.0);
  for (std::size_t i = 0; i < m.size(); ++i) got[static_cast<std::size_t>(m.point(i))] = m.weight(i);
  EXPECT_LT(oracle::tv(got, nu.pmf_values), 1e-8);
}

TEST(NuR, RequiresDiscreteReference) {
  const auto spec = mm_infty_urn(1.0, 2.0);
  const auto g = analytic_reference("gaussian", {{"mean", 0.0}, {"variance", 1.0}});
  EXPECT_THROW(nu_R(g, spec.kernel, 10), DimensionUnsupported);
}
