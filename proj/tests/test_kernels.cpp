#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <vector>

#include "mvpp/kernels.hpp"
#include "mvpp/models.hpp"

using namespace mvpp;

namespace {

std::map<std::int64_t, double> atoms(const DiscreteDelta& d) {
  std::map<std::int64_t, double> out;
  for (std::size_t i = 0; i < d.size(); ++i) out[d.point(i)] += d.weight(i);
  return out;
}

std::map<std::int64_t, double> q_mean(const ComposedKernel<Discrete>& k, std::int64_t x) {
  DiscreteDelta q;
  k.mean(x, q);
  return atoms(q);
}

void expect_atoms_near(const std::map<std::int64_t, double>& a, const std::map<std::int64_t, double>& b, double tol) {
  std::map<std::int64_t, double> all = a;
  for (const auto& [k, v] : b) all[k] += 0.0;
  for (const auto& [k, v] : all) {
    const double va = a.count(k) ? a.at(k) : 0.0;
    const double vb = b.count(k) ? b.at(k) : 0.0;
    EXPECT_NEAR(va, vb, tol) << "atom " << k;
  }
}

}  // namespace

TEST(Kernels, IdentityWeightGivesQEqualsR) {
  const auto spec = mm_infty_urn(1.0, 2.0);
  for (std::int64_t x = 0; x <= 30; ++x) {
    DiscreteDelta r;
    spec.kernel.replacement_mean(x, r);
    expect_atoms_near(q_mean(spec.kernel, x), atoms(r), 0.0);
  }
}

TEST(Kernels, ProtectedNodesComposedMean) {
  const auto spec = protected_nodes_urn();
  for (std::int64_t x = 1; x <= 30; ++x) {
    const double xd = static_cast<double>(x);
    std::map<std::int64_t, double> want;
    want[x + 1] += (xd + 2.0) / (xd + 1.0);
    want[x - 1] += xd / (xd + 1.0) * xd;
    want[1] += xd / (xd + 1.0) * 2.0;
    want[x] -= xd + 1.0;
    expect_atoms_near(q_mean(spec.kernel, x), want, 1e-12);
  }
}

TEST(Kernels, ProtectedNodesUnitMass) {
  const auto spec = protected_nodes_urn();
  for (std::int64_t x = 0; x <= 50; ++x) EXPECT_NEAR(spec.kernel.mean_mass(x), 1.0, 1e-12) << x;
}

TEST(Kernels, ScaledWeightMass) {
  const auto p = WeightKernel<Discrete>::scalar([](std::int64_t x) { return 0.5 + double(x); });
  const DiscreteDelta d{{0, 2.0}, {3, -1.0}};
  DiscreteDelta out;
  p.apply(d, out);
  EXPECT_DOUBLE_EQ(out.mass(), 2.0 * 0.5 - 1.0 * 3.5);
  const auto bad = WeightKernel<Discrete>::scalar([](std::int64_t) { return -1.0; });
  EXPECT_THROW(bad.apply(d, out), InvalidParams);
}

TEST(Kernels, MeanUnavailable) {
  ReplacementKernel<Discrete> r;
  r.sampler = [](std::int64_t x, RngStream&, DiscreteDelta& out) { out.add(x, 1.0); };
  const auto k = compose(r, WeightKernel<Discrete>::identity());
  DiscreteDelta q;
  EXPECT_THROW(k.mean(0, q), MeanUnavailable);
  const std::vector<std::int64_t> probe{0};
  EXPECT_THROW(check_mass_bounds(k, std::span<const std::int64_t>(probe)), MeanUnavailable);
  RngStream rng(1);
  k.sample(3, rng, q);
  EXPECT_EQ(q.size(), 1u);
}

TEST(Kernels, RescaleByOneIsIdentical) {
  const auto spec = rrf_urn({{-1, 0.3}, {1, 0.7}}, {{1, 1.0}});
  const auto same = rescale(spec.kernel, 1.0);
  RngStream a(5), b(5);
  DiscreteDelta da, db;
  for (int i = 0; i < 1000; ++i) {
    const std::int64_t x = i % 7;
    spec.kernel.sample(x, a, da);
    same.sample(x, b, db);
    ASSERT_EQ(atoms(da), atoms(db));
  }
}

TEST(Kernels, FiniteUrnRescaledBySupRowSum) {
  const DenseMatrix M{{1, 2, 0}, {0, 1, 1}, {4, 0, 1}};
  const auto spec = finite_polya_urn(M);
  EXPECT_DOUBLE_EQ(spec.params.at("S"), 5.0);
  for (std::int64_t x = 0; x < 3; ++x) EXPECT_LE(spec.kernel.mean_mass(x), 1.0 + 1e-15);
  const auto q = q_mean(spec.kernel, 0);
  EXPECT_DOUBLE_EQ(q.at(0), 0.2);
  EXPECT_DOUBLE_EQ(q.at(1), 0.4);
}

TEST(Kernels, FiniteUrnAllOnes) {
  const auto spec = finite_polya_urn(DenseMatrix{{1, 1}, {1, 1}}, {1.0, 1.0});
  EXPECT_DOUBLE_EQ(spec.params.at("S"), 2.0);
  for (std::int64_t x = 0; x < 2; ++x) expect_atoms_near(q_mean(spec.kernel, x), {{0, 0.5}, {1, 0.5}}, 0.0);
}

TEST(Kernels, RescaleComposes) {
  const auto spec = bd_quasi_ergodic_urn([](std::int64_t x) { return 0.1 / double(x + 1); },
                                         [](std::int64_t) { return 0.9; });
  const auto ab = rescale(rescale(spec.kernel, 2.0), 3.0);
  const auto direct = rescale(spec.kernel, 6.0);
  for (std::int64_t x = 0; x < 20; ++x) expect_atoms_near(q_mean(ab, x), q_mean(direct, x), 1e-15);
  EXPECT_NEAR(ab.mass_bounds().kappa, direct.mass_bounds().kappa, 1e-15);
  EXPECT_THROW(rescale(spec.kernel, 0.0), InvalidParams);
}

TEST(Kernels, RescalePreservesDirection) {
  const auto spec = mm_infty_urn(1.0, 2.0);
  const auto k = rescale(spec.kernel, 3.7);
  for (std::int64_t x = 0; x < 20; ++x) {
    auto a = q_mean(spec.kernel, x), b = q_mean(k, x);
    for (auto& [key, v] : b) v *= 3.7;
    expect_atoms_near(a, b, 1e-14);
  }
}

TEST(Kernels, MassBoundsBalancedModels) {
  const auto probe = probe_range(0, 100);
  for (const auto& spec : {mm_infty_urn(1.0, 2.0), rrt_outdegree_urn()}) {
    const auto rep = check_mass_bounds(spec.kernel, std::span<const std::int64_t>(probe));
    EXPECT_TRUE(rep.ok) << spec.name;
    EXPECT_NEAR(rep.min_mass, 1.0, 1e-12);
    EXPECT_NEAR(rep.max_mass, 1.0, 1e-12);
  }
}

TEST(Kernels, MassBoundsBirthDeath) {
  auto lambda = [](std::int64_t x) { return 0.1 / double(x + 1); };
  auto mu = [](std::int64_t x) { return x == 0 ? 0.0 : 0.9; };
  const auto spec = bd_quasi_ergodic_urn(lambda, mu);
  const auto probe = probe_range(0, 100);
  const auto rep = check_mass_bounds(spec.kernel, std::span<const std::int64_t>(probe));
  EXPECT_TRUE(rep.ok);
  // sup of lambda + mu on the probe is 0.9 + 0.05 at x = 1
  const double sup = 0.9 + 0.05;
  EXPECT_NEAR(rep.max_mass, 1.0, 1e-12);
  double inf = 1.0;
  for (std::int64_t x = 0; x <= 100; ++x) inf = std::min(inf, (lambda(x) + mu(x)) / sup);
  EXPECT_NEAR(rep.min_mass, inf, 1e-12);
}

TEST(Kernels, MassBoundsDetectViolation) {
  auto spec = mm_infty_urn(1.0, 2.0);
  spec.kernel.set_mass_bounds({0.0, 0.5});
  const auto probe = probe_range(0, 5);
  EXPECT_FALSE(check_mass_bounds(spec.kernel, std::span<const std::int64_t>(probe)).ok);
}

TEST(Kernels, LyapunovMmInfty) {
  const auto spec = mm_infty_urn(1.0, 2.0);
  const auto probe = probe_range(0, 200);
  const auto rep = check_lyapunov(spec.kernel, *spec.lyapunov, std::span<const std::int64_t>(probe));
  EXPECT_TRUE(rep.ok);
  EXPECT_NEAR(spec.lyapunov->theta, 2.0 / std::exp(1.0), 1e-15);
  // K from the closed form R_x.V = (lambda e^2 + mu x) e^{x-1} / (lambda + mu x) on x <= lambda (e^2 - 2) / mu
  double K = 0.0;
  for (int x = 0; x <= 2; ++x) {
    const double v = x == 0 ? std::exp(1.0) : (std::exp(2.0) + 2.0 * x) * std::exp(x - 1.0) / (1.0 + 2.0 * x);
    K = std::max(K, v);
  }
  EXPECT_NEAR(spec.lyapunov->K, K, 1e-12 * K);
}

TEST(Kernels, LyapunovRrt) {
  const auto spec = rrt_outdegree_urn(0.25);
  const auto probe = probe_range(0, 200);
  const auto rep = check_lyapunov(spec.kernel, *spec.lyapunov, std::span<const std::int64_t>(probe));
  EXPECT_TRUE(rep.ok);
  EXPECT_DOUBLE_EQ(spec.lyapunov->theta, 0.75);
  EXPECT_DOUBLE_EQ(spec.lyapunov->K, 1.0);
}

TEST(Kernels, LyapunovConstantOnBalancedFinite) {
  const auto spec = finite_polya_urn(DenseMatrix{{1, 1}, {1, 1}});
  LyapunovSpec<Discrete> l;
  l.V = [](std::int64_t) { return 1.0; };
  l.theta = 0.5;
  l.K = 1.0;
  const auto probe = probe_range(0, 1);
  const auto rep = check_lyapunov(spec.kernel, l, std::span<const std::int64_t>(probe));
  EXPECT_TRUE(rep.ok);
  EXPECT_DOUBLE_EQ(rep.max_margin, -0.5);
}

TEST(Kernels, LyapunovDetectsViolation) {
  const auto spec = rrt_outdegree_urn(0.25);
  auto l = *spec.lyapunov;
  l.K = 0.0;
  const auto probe = probe_range(0, 10);
  EXPECT_FALSE(check_lyapunov(spec.kernel, l, std::span<const std::int64_t>(probe)).ok);
  l.theta = 1.5;
  EXPECT_THROW(check_lyapunov(spec.kernel, l, std::span<const std::int64_t>(probe)), InvalidParams);
}

TEST(Kernels, ProtectedNodesLyapunov) {
  const auto spec = protected_nodes_urn(0.5);
  const auto probe = probe_range(0, 100);
  EXPECT_TRUE(check_lyapunov(spec.kernel, *spec.lyapunov, std::span<const std::int64_t>(probe)).ok);
}

namespace {

// Per-atom empirical mean of `draws` replacement draws at x, checked against
// the exact mean within 4 standard errors.
void monte_carlo_mean_check(const ComposedKernel<Discrete>& k, std::int64_t x, int draws, std::uint64_t seed) {
  RngStream rng(seed);
  DiscreteDelta d;
  std::map<std::int64_t, double> sum, sq;
  for (int i = 0; i < draws; ++i) {
    k.sample_replacement(x, rng, d);
    const auto a = atoms(d);
    for (const auto& [key, v] : a) {
      sum[key] += v;
      sq[key] += v * v;
    }
  }
  DiscreteDelta m;
  k.replacement_mean(x, m);
  auto exact = atoms(m);
  for (const auto& [key, v] : sum) exact[key] += 0.0;
  for (const auto& [key, want] : exact) {
    const double mean = sum[key] / draws;
    const double var = std::max(sq[key] / draws - mean * mean, 0.0);
    const double se = std::sqrt(var / draws);
    EXPECT_LE(std::abs(mean - want), 4.0 * se + 1e-12) << "x=" << x << " atom " << key;
  }
}

}  // namespace

TEST(Kernels, MonteCarloMeanRrf) {
  const auto spec = rrf_urn({{-1, 0.3}, {1, 0.5}, {3, 0.2}}, {{1, 0.6}, {2, 0.4}});
  for (std::int64_t x : {0, 1, 2, 5}) monte_carlo_mean_check(spec.kernel, x, 100000, 100 + x);
}

TEST(Kernels, MonteCarloMeanProtected) {
  const auto spec = protected_nodes_urn();
  for (std::int64_t x : {0, 1, 2, 7}) monte_carlo_mean_check(spec.kernel, x, 100000, 200 + x);
}

TEST(Kernels, DeterministicSamplerEqualsMean) {
  const auto spec = mm_infty_urn(1.0, 2.0);
  RngStream rng(1);
  DiscreteDelta d, m;
  for (std::int64_t x = 0; x < 10; ++x) {
    spec.kernel.sample_replacement(x, rng, d);
    spec.kernel.replacement_mean(x, m);
    EXPECT_EQ(atoms(d), atoms(m));
  }
}
