#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <sstream>
#include <vector>

#include "mvpp/engine.hpp"
#include "mvpp/models.hpp"
#include "oracles.hpp"

using namespace mvpp;

namespace {

MvppState<Discrete> start(const ModelSpec<Discrete>& spec, std::uint64_t seed, EngineOptions opt = {}) {
  return init(spec.m0, spec.kernel, seed, opt);
}

std::vector<double> pmf_of(const DiscreteMeasure& m, std::size_t n) {
  std::vector<double> p(n, 0.0);
  for (std::size_t i = 0; i < m.size(); ++i)
    if (static_cast<std::size_t>(m.point(i)) < n) p[m.point(i)] = m.weight(i);
  return p;
}

std::string serialise(const std::vector<StepRecord<Discrete>>& recs) {
  std::ostringstream out;
  out.precision(17);
  for (const auto& r : recs) out << r.n << ',' << r.drawn_color << ',' << r.delta_mass << ',' << r.m_mass << ',' << r.mP_mass << '\n';
  return out.str();
}

}  // namespace

TEST(Engine, InitRrt) {
  const auto s = start(rrt_outdegree_urn(), 1);
  EXPECT_EQ(s.step_count(), 0u);
  EXPECT_EQ(s.mP().size(), 1u);
  EXPECT_DOUBLE_EQ(s.mP().weight_at(0), 1.0);
  EXPECT_EQ(s.eta().mass(), 0.0);
}

TEST(Engine, InitProtectedNodes) {
  const auto s = start(protected_nodes_urn(), 1);
  EXPECT_DOUBLE_EQ(s.mP().weight_at(1), 2.0);
  EXPECT_DOUBLE_EQ(s.mP().mass(), 2.0);
}

TEST(Engine, InitRejectsEmpty) {
  const auto spec = rrt_outdegree_urn();
  EXPECT_THROW(init(DiscreteMeasure{}, spec.kernel, 1), EmptyMeasure);
  auto k = compose(ReplacementKernel<Discrete>::deterministic([](std::int64_t x, DiscreteDelta& o) { o.add(x, 1.0); }),
                   WeightKernel<Discrete>::scalar([](std::int64_t x) { return x == 0 ? 0.0 : 1.0; }));
  EXPECT_THROW(init(DiscreteMeasure{{0, 1.0}}, k, 1), EmptyMeasure);
}

TEST(Engine, OriginalPolyaMass) {
  auto s = start(finite_polya_urn(DenseMatrix{{1, 0}, {0, 1}}), 2);
  for (int n = 1; n <= 1000; ++n) {
    const auto rec = s.step();
    ASSERT_DOUBLE_EQ(rec.m_mass, n + 2.0);
  }
}

TEST(Engine, RrtMassAndFirstStep) {
  auto s = start(rrt_outdegree_urn(), 3);
  s.step();
  EXPECT_DOUBLE_EQ(s.m().weight_at(0), 1.0);
  EXPECT_DOUBLE_EQ(s.m().weight_at(1), 1.0);
  const auto v = normalized_views(s);
  EXPECT_DOUBLE_EQ(v.m_tilde.weight_at(0), 0.5);
  EXPECT_DOUBLE_EQ(v.m_tilde.weight_at(1), 0.5);
  for (int n = 2; n <= 10000; ++n) ASSERT_NEAR(s.step().m_mass, n + 1.0, 1e-6);
}

TEST(Engine, MmInftyConvergesToJumpChainLaw) {
  const auto spec = mm_infty_urn(1.0, 2.0);
  auto s = start(spec, 4);
  for (int i = 0; i < 200000; ++i) s.step();
  const auto views = normalized_views(s);
  const auto emp = pmf_of(views.m_over_n, 41);
  EXPECT_LT(oracle::tv(emp, oracle::mm_jump_chain_pmf(1.0, 2.0, 41)), 0.02);
  // distance to the Poisson law of the queue stays at the closed form e^{-1/2} / 2
  EXPECT_NEAR(oracle::tv(emp, oracle::poisson_pmf(0.5, 41)), 0.5 * std::exp(-0.5), 0.02);
}

TEST(Engine, RunZeroSteps) {
  auto s = start(rrt_outdegree_urn(), 5);
  const Observer<Discrete> obs{1, {"x"}, [](const auto&, std::vector<double>& v) { v.push_back(1.0); }};
  const auto traces = run(s, 0, std::span<const Observer<Discrete>>(&obs, 1));
  EXPECT_EQ(s.step_count(), 0u);
  ASSERT_EQ(traces.size(), 1u);
  EXPECT_TRUE(traces[0].rows.empty());
}

TEST(Engine, ObserverStride) {
  auto s = start(mm_infty_urn(1.0, 2.0), 6);
  const Observer<Discrete> obs{1000, {"mass"}, [](const auto& st, std::vector<double>& v) { v.push_back(st.m().mass()); }};
  const auto traces = run(s, 100000, std::span<const Observer<Discrete>>(&obs, 1));
  ASSERT_EQ(traces[0].rows.size(), 100u);
  EXPECT_EQ(traces[0].rows.front().record.n, 1000u);
  EXPECT_EQ(traces[0].rows.back().record.n, 100000u);
  const Observer<Discrete> bad{0, {}, {}};
  EXPECT_THROW(run(s, 1, std::span<const Observer<Discrete>>(&bad, 1)), InvalidParams);
}

TEST(Engine, Determinism) {
  auto go = [](std::uint64_t seed) {
    auto s = start(rrf_urn({{-1, 0.3}, {1, 0.7}}, {{1, 1.0}}), seed);
    std::vector<StepRecord<Discrete>> recs;
    for (int i = 0; i < 20000; ++i) recs.push_back(s.step());
    return serialise(recs);
  };
  EXPECT_EQ(go(9), go(9));
  EXPECT_NE(go(9), go(10));
}

TEST(Engine, EtaMassEqualsStep) {
  auto s = start(protected_nodes_urn(), 7);
  for (int n = 1; n <= 20000; ++n) {
    s.step();
    ASSERT_EQ(s.eta().mass(), static_cast<double>(n));
  }
  EXPECT_EQ(normalized_views(s).eta_tilde.mass(), 1.0);
}

TEST(Engine, MOverNMassBookkeeping) {
  auto s = start(rrt_outdegree_urn(), 8);
  for (int i = 0; i < 10000; ++i) s.step();
  const auto v = normalized_views(s);
  EXPECT_LT(std::abs(v.m_over_n.mass() - (1.0 + 1.0 / 10000.0)), 1e-9);
}

TEST(Engine, NormalizedViewsNeedAStep) {
  const auto s = start(rrt_outdegree_urn(), 1);
  EXPECT_THROW(normalized_views(s), EmptyMeasure);
}

TEST(Engine, MassIdentityMixedSign) {
  auto s = start(rrf_urn({{-1, 0.4}, {1, 0.4}, {2, 0.2}}, {{1, 0.5}, {3, 0.5}}), 11, {10000});
  for (int i = 0; i < 200000; ++i) s.step();
  const double expect = s.initial_mass() + s.delta_mass_sum();
  EXPECT_LT(std::abs(s.m().mass() - expect) / expect, 1e-9);
  EXPECT_LT(std::abs(s.m().mass() - s.m().exact_mass()) / expect, 1e-9);
}

TEST(Engine, TenabilityHoldsByConstruction) {
  for (const auto& spec : {rrt_outdegree_urn(), rrf_urn({{-1, 0.3}, {1, 0.7}}, {{1, 1.0}}), protected_nodes_urn()}) {
    auto s = start(spec, 12);
    EXPECT_NO_THROW(run(s, 100000)) << spec.name;
    for (double w : s.m().weights()) ASSERT_GE(w, -1e-12);
  }
}

TEST(Engine, FailedStepLeavesMeasuresUntouched) {
  // colour 0 removes more than it holds at the first draw
  const auto spec = finite_signed_urn(DenseMatrix{{-2, 3}, {1, 1}}, {}, DiscreteMeasure{{0, 0.5}});
  auto s = start(spec, 13);
  try {
    run(s, 5);
    FAIL() << "expected a tenability violation";
  } catch (const TenabilityViolation& e) {
    ASSERT_TRUE(e.step().has_value());
    EXPECT_EQ(*e.step(), 1u);
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
  }
  EXPECT_EQ(s.step_count(), 0u);
  EXPECT_DOUBLE_EQ(s.m().weight_at(0), 0.5);
  EXPECT_DOUBLE_EQ(s.mP().mass(), 0.5);
  EXPECT_EQ(s.eta().mass(), 0.0);
}

TEST(Engine, ParanoidRecomputationAgrees) {
  auto s = start(protected_nodes_urn(), 14, {1000});
  EXPECT_NO_THROW(run(s, 100000));
  EXPECT_NO_THROW(s.verify_mP());
}

TEST(Engine, SamplingFromFrozenMP) {
  auto s = start(protected_nodes_urn(), 15);
  run(s, 5000);
  const auto& mP = s.mP();
  RngStream rng(99);
  std::vector<double> counts(mP.size(), 0.0);
  for (int i = 0; i < 100000; ++i) counts[mP.sample_index(rng)] += 1.0;
  // pool cells with expected count below 5 into one
  double stat = 0.0, pooled_o = 0.0, pooled_e = 0.0;
  int cells = 0;
  for (std::size_t i = 0; i < mP.size(); ++i) {
    const double e = 100000.0 * mP.weight(i) / mP.exact_mass();
    if (e < 5.0) {
      pooled_o += counts[i];
      pooled_e += e;
      continue;
    }
    stat += (counts[i] - e) * (counts[i] - e) / e;
    ++cells;
  }
  if (pooled_e > 0.0) {
    stat += (pooled_o - pooled_e) * (pooled_o - pooled_e) / pooled_e;
    ++cells;
  }
  ASSERT_GE(cells, 2);
  boost::math::chi_squared dist(cells - 1);
  EXPECT_GT(boost::math::cdf(boost::math::complement(dist, stat)), 1e-3);
}

TEST(Engine, SaBalancedGamma) {
  auto s = start(rrt_outdegree_urn(), 16);
  s.step();
  for (int n = 1; n < 50; ++n) {
    const auto before = s;
    s.step();
    const auto d = sa_diagnostic(before, s, [](std::int64_t x) { return double(x); });
    EXPECT_DOUBLE_EQ(d.gamma, 1.0 / (n + 1));
  }
}

TEST(Engine, SaConstantFunction) {
  auto s = start(rrt_outdegree_urn(), 17);
  run(s, 10);
  const auto before = s;
  s.step();
  const auto d = sa_diagnostic(before, s, [](std::int64_t) { return 1.0; });
  EXPECT_EQ(d.F_dot_f, 0.0);
  EXPECT_EQ(d.U_dot_f, 0.0);
}

TEST(Engine, SaResidualRrt) {
  auto s = start(rrt_outdegree_urn(), 18);
  s.step();
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const auto before = s;
    s.step();
    const auto d = sa_diagnostic(before, s, [](std::int64_t x) { return std::min(double(x), 5.0); });
    worst = std::max(worst, std::abs(d.residual));
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(Engine, SaResidualUnbalanced) {
  auto s = start(bd_quasi_ergodic_urn([](std::int64_t x) { return 0.1 / double(x + 1); },
                                      [](std::int64_t) { return 0.9; }),
                 19);
  s.step();
  for (int i = 0; i < 2000; ++i) {
    const auto before = s;
    s.step();
    const auto d = sa_diagnostic(before, s, [](std::int64_t x) { return x == 0 ? 1.0 : 0.0; });
    ASSERT_LT(std::abs(d.residual), 1e-9);
  }
}

TEST(Engine, SaNeedsConsecutiveStates) {
  auto s = start(rrt_outdegree_urn(), 20);
  s.step();
  const auto before = s;
  s.step();
  s.step();
  EXPECT_THROW(sa_diagnostic(before, s, [](std::int64_t) { return 1.0; }), InvalidParams);
}

TEST(Engine, MinMPRateTracked) {
  auto s = start(mm_infty_urn(1.0, 2.0), 21);
  run(s, 1000);
  EXPECT_NEAR(s.min_mP_rate(), 1.0 + 1.0 / 1000.0, 1e-9);
}

TEST(Engine, EuclideanStep) {
  ReplacementKernel<Euclidean> r;
  r.sampler = [](std::span<const double> x, RngStream& rng, EuclideanDelta& out) {
    const std::vector<double> y{x[0] + rng.normal()};
    out.add(y, 1.0);
  };
  r.mean = {};
  auto k = compose(r, WeightKernel<Euclidean>::identity(), MassBounds{1.0, 1.0});
  EuclideanMeasure m0(1);
  EuclideanDelta d(1);
  const std::vector<double> origin{0.0};
  d.add(origin, 1.0);
  m0.add(d);
  auto s = init(m0, k, 22, {100});
  run(s, 1000);
  EXPECT_EQ(s.m().size(), 1001u);
  EXPECT_DOUBLE_EQ(s.m().mass(), 1001.0);
  EXPECT_EQ(s.eta().mass(), 1000.0);
  EXPECT_EQ(s.last_drawn().size(), 1u);
}
