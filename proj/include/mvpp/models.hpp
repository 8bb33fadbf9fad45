#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mvpp/diagnostics.hpp"
#include "mvpp/error.hpp"
#include "mvpp/kernels.hpp"
#include "mvpp/measure.hpp"
#include "mvpp/qsd.hpp"
#include "mvpp/rng.hpp"

namespace mvpp {

/// Which law the normalised composition m~_n approaches: the QSD nu itself
/// (when nu R is proportional to nu) or nu R / nu R(E).
enum class LimitKind { nu, nu_R };

template <class Space>
struct ModelSpec {
  std::string name;
  WeightedMeasure<Space> m0;
  ComposedKernel<Space> kernel;
  std::optional<LyapunovSpec<Space>> lyapunov;
  std::optional<std::string> reference_key;
  LimitKind limit = LimitKind::nu;
  std::map<std::string, double> params;
  std::vector<std::string> warnings;
};

inline std::vector<std::int64_t> probe_range(std::int64_t lo, std::int64_t hi) {
  std::vector<std::int64_t> out;
  for (std::int64_t x = lo; x <= hi; ++x) out.push_back(x);
  return out;
}

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidParams(what);
}

inline DiscreteMeasure dirac(std::int64_t x) {
  DiscreteMeasure m;
  m.add(DiscreteDelta{{x, 1.0}});
  return m;
}

inline void check_matrix_entries(const DenseMatrix& m, bool allow_negative_diagonal) {
  if (!m.square() || m.rows() == 0) throw InvalidMatrix("replacement matrix must be square and non-empty");
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      if (!std::isfinite(v)) throw InvalidMatrix("non-finite entry");
      if (v < 0.0 && !(allow_negative_diagonal && i == j))
        throw InvalidMatrix("negative entry at (" + std::to_string(i) + "," + std::to_string(j) + ")");
    }
    if (!(m.row_sum(i) > 0.0)) throw InvalidMatrix("row " + std::to_string(i) + " has non-positive sum");
  }
}

inline ModelSpec<Discrete> finite_urn(const std::string& name, const DenseMatrix& M, std::vector<double> w,
                                      std::optional<DiscreteMeasure> m0, bool is_signed) {
  check_matrix_entries(M, is_signed);
  const std::size_t d = M.rows();
  if (w.empty()) w.assign(d, 1.0);
  if (w.size() != d) throw InvalidParams("weight vector length must equal the number of colours");
  for (double wi : w)
    if (!(wi > 0.0) || !std::isfinite(wi)) throw InvalidParams("colour weights must be finite and > 0");
  double S = 0.0;
  for (std::size_t i = 0; i < d; ++i) S = std::max(S, M.row_sum(i));

  auto mean = [M, S](std::int64_t x, DiscreteDelta& out) {
    if (x < 0 || static_cast<std::size_t>(x) >= M.rows())
      throw InvalidPoint("colour " + std::to_string(x) + " is outside the alphabet");
    for (std::size_t i = 0; i < M.cols(); ++i)
      if (M(static_cast<std::size_t>(x), i) != 0.0) out.add(static_cast<std::int64_t>(i), M(x, i) / S);
  };
  auto weight = [w](std::int64_t x) { return w[static_cast<std::size_t>(x)]; };

  MassBounds b{std::numeric_limits<double>::infinity(), 0.0};
  for (std::size_t x = 0; x < d; ++x) {
    double q = 0.0;
    for (std::size_t i = 0; i < d; ++i) q += M(x, i) * w[i] / S;
    b.c1 = std::min(b.c1, q);
    b.kappa = std::max(b.kappa, q);
  }

  if (!m0) {
    DiscreteDelta init;
    for (std::size_t i = 0; i < d; ++i) init.add(static_cast<std::int64_t>(i), 1.0);
    m0.emplace();
    m0->add(init);
  }
  for (std::size_t i = 0; i < m0->size(); ++i)
    if (static_cast<std::size_t>(m0->point(i)) >= d) throw InvalidParams("initial composition outside the alphabet");

  ModelSpec<Discrete> spec{name,
                           std::move(*m0),
                           compose(ReplacementKernel<Discrete>::deterministic(mean, is_signed),
                                   WeightKernel<Discrete>::scalar(weight), b),
                           std::nullopt,
                           "eigen",
                           LimitKind::nu_R,
                           {{"S", S}, {"d", static_cast<double>(d)}},
                           {}};
  return spec;
}

}  // namespace detail

/// d-colour urn with replacement matrix M (colours 0..d-1):
/// R_x = (1/S) sum_i M_{x,i} delta_i, S the largest row sum, P_x = w_x delta_x.
inline ModelSpec<Discrete> finite_polya_urn(const DenseMatrix& M, std::vector<double> w = {},
                                            std::optional<DiscreteMeasure> m0 = std::nullopt) {
  return detail::finite_urn("finite_urn", M, std::move(w), std::move(m0), false);
}

/// Same with negative diagonal entries allowed (balls of the drawn colour
/// removed). Tenability is the caller's responsibility and is enforced at run
/// time.
inline ModelSpec<Discrete> finite_signed_urn(const DenseMatrix& M, std::vector<double> w = {},
                                             std::optional<DiscreteMeasure> m0 = std::nullopt) {
  return detail::finite_urn("finite_signed_urn", M, std::move(w), std::move(m0), true);
}

/// Ergodic M/M/infinity urn: R_x = lambda/(x mu + lambda) delta_{x+1}
/// + x mu/(x mu + lambda) delta_{x-1}.
inline ModelSpec<Discrete> mm_infty_urn(double lambda, double mu) {
  detail::require(lambda > 0.0 && mu > lambda && std::isfinite(mu), "M/M/infinity urn needs 0 < lambda < mu");
  auto mean = [lambda, mu](std::int64_t x, DiscreteDelta& out) {
    const double xm = static_cast<double>(x) * mu;
    out.add(x + 1, lambda / (xm + lambda));
    if (x > 0) out.add(x - 1, xm / (xm + lambda));
  };
  auto kernel = compose(ReplacementKernel<Discrete>::deterministic(mean), WeightKernel<Discrete>::identity(),
                        MassBounds{1.0, 1.0});

  const double e = std::exp(1.0);
  LyapunovSpec<Discrete> lyap;
  lyap.V = [](std::int64_t x) { return std::exp(static_cast<double>(x)); };
  lyap.theta = 2.0 / e;
  lyap.c1 = 1.0;
  const double x_max = lambda * (e * e - 2.0) / mu;
  lyap.K = 0.0;
  for (std::int64_t x = 0; static_cast<double>(x) <= x_max; ++x) lyap.K = std::max(lyap.K, kernel.mean_integral(x, lyap.V));

  return {"mm_infty",  detail::dirac(0), std::move(kernel), std::move(lyap), "poisson", LimitKind::nu,
          {{"lambda", lambda}, {"mu", mu}, {"rate", lambda / mu}}, {}};
}

/// Quasi-ergodic birth-death urn R_x = lambda_x delta_{x+1} + mu_x delta_{x-1}
/// (mu_0 = 0), divided by max_{x <= probe} (lambda_x + mu_x).
inline ModelSpec<Discrete> bd_quasi_ergodic_urn(const std::function<double(std::int64_t)>& lambda,
                                                const std::function<double(std::int64_t)>& mu,
                                                std::int64_t probe = 200) {
  detail::require(probe >= 2, "birth-death probe must cover at least {0,1,2}");
  std::vector<std::string> warnings;
  double sup = 0.0;
  double inf_mu = std::numeric_limits<double>::infinity();
  double inf_total = std::numeric_limits<double>::infinity();
  for (std::int64_t x = 0; x <= probe; ++x) {
    const double l = lambda(x);
    const double m = x == 0 ? 0.0 : mu(x);
    detail::require(std::isfinite(l) && std::isfinite(m) && l >= 0.0 && m >= 0.0,
                    "birth/death rates must be finite and >= 0 (x=" + std::to_string(x) + ")");
    sup = std::max(sup, l + m);
    inf_total = std::min(inf_total, l + m);
    if (x >= 1) inf_mu = std::min(inf_mu, m);
  }
  detail::require(lambda(0) > 0.0, "lambda_0 must be > 0");
  detail::require(inf_mu > 0.0, "death rates must be bounded away from 0 for x >= 1");
  const double ratio_first = lambda(1) / mu(1);
  const double ratio_last = lambda(probe) / mu(probe);
  if (!(ratio_last < ratio_first))
    warnings.push_back("lambda_x / mu_x does not decrease on the probe; the quasi-ergodic regime may not apply");

  const double s = sup;
  auto mean = [lambda, mu, s](std::int64_t x, DiscreteDelta& out) {
    out.add(x + 1, lambda(x) / s);
    if (x > 0) out.add(x - 1, mu(x) / s);
  };
  const double c1 = inf_total / s;
  auto kernel = compose(ReplacementKernel<Discrete>::deterministic(mean), WeightKernel<Discrete>::identity(),
                        MassBounds{c1, 1.0});

  // V(x) = e^{a x} with e^{-a} = c1/4 and theta = c1/2; K covers the states
  // where the birth term still exceeds c1/4.
  const double a = std::log(4.0 / c1);
  LyapunovSpec<Discrete> lyap;
  lyap.V = [a](std::int64_t x) { return std::exp(a * static_cast<double>(x)); };
  lyap.theta = c1 / 2.0;
  lyap.c1 = c1;
  std::int64_t x0 = 0;
  for (std::int64_t x = 0; x <= probe; ++x)
    if (lambda(x) / s * std::exp(a) > c1 / 4.0) x0 = x;
  if (x0 == probe) warnings.push_back("Lyapunov constant K could not be bounded within the probe");
  lyap.K = 0.0;
  for (std::int64_t x = 0; x <= x0; ++x)
    lyap.K = std::max(lyap.K, kernel.mean_integral(x, lyap.V) - lyap.theta * lyap.V(x));

  return {"bd_quasi_ergodic", detail::dirac(0), std::move(kernel), std::move(lyap), "bd_qsd", LimitKind::nu,
          {{"normalizer", s}, {"c1", c1}, {"lyapunov_a", a}, {"lyapunov_x0", static_cast<double>(x0)}},
          std::move(warnings)};
}

/// Out-degree profile of the random recursive tree: R_x = -delta_x + delta_0
/// + delta_{x+1}, started from the single-root profile delta_0.
inline ModelSpec<Discrete> rrt_outdegree_urn(double epsilon = 0.25) {
  detail::require(epsilon > 0.0 && epsilon < 1.0, "epsilon must lie in (0, 1)");
  auto mean = [](std::int64_t x, DiscreteDelta& out) {
    out.add(x, -1.0);
    out.add(0, 1.0);
    out.add(x + 1, 1.0);
  };
  LyapunovSpec<Discrete> lyap;
  const double base = 2.0 - epsilon;
  lyap.V = [base](std::int64_t x) { return std::pow(base, static_cast<double>(x)); };
  lyap.theta = 1.0 - epsilon;
  lyap.K = 1.0;
  lyap.c1 = 1.0;
  return {"rrt",
          detail::dirac(0),
          compose(ReplacementKernel<Discrete>::deterministic(mean, true), WeightKernel<Discrete>::identity(),
                  MassBounds{1.0, 1.0}),
          std::move(lyap),
          "geometric_half",
          LimitKind::nu,
          {{"epsilon", epsilon}},
          {}};
}

/// A law on integers given as (value, probability) pairs.
using IntegerLaw = std::vector<std::pair<std::int64_t, double>>;

namespace detail {

inline std::int64_t draw(const IntegerLaw& law, RngStream& rng) {
  double u = rng.uniform();
  for (const auto& [k, p] : law) {
    if (u < p) return k;
    u -= p;
  }
  return law.back().first;
}

inline void check_law(const IntegerLaw& law, std::int64_t min_value, bool allow_minus_one, const char* name) {
  if (law.empty()) throw InvalidParams(std::string(name) + " is empty");
  double total = 0.0;
  for (const auto& [k, p] : law) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw InvalidParams(std::string(name) + " has an invalid probability");
    if (k < min_value && !(allow_minus_one && k == -1))
      throw InvalidParams(std::string(name) + " has unsupported value " + std::to_string(k));
    if (k == 0) throw InvalidParams(std::string(name) + " cannot put mass on 0");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidParams(std::string(name) + " does not sum to 1");
}

}  // namespace detail

/// Out-degree profile of the random recursive forest. At x >= 1 a draw is
/// -delta_x + delta_{x-1} (prob alpha_{-1}) or -delta_x + k delta_0 +
/// delta_{x+k} (prob alpha_k); at 0 it is (k-1) delta_0 + delta_k (prob
/// beta_k). Divided by M = max(M_alpha, M_beta), M_alpha = sum |k| alpha_k.
inline ModelSpec<Discrete> rrf_urn(IntegerLaw alpha, IntegerLaw beta) {
  detail::check_law(alpha, 1, true, "alpha");
  detail::check_law(beta, 1, false, "beta");
  double a_minus = 0.0;
  double m_alpha = 0.0;
  double mean_children = 0.0;
  double alpha_pos = 0.0;
  for (const auto& [k, p] : alpha) {
    m_alpha += static_cast<double>(std::abs(k)) * p;
    if (k == -1) {
      a_minus += p;
    } else {
      mean_children += static_cast<double>(k) * p;
      alpha_pos += p;
    }
  }
  detail::require(a_minus > 0.0 && a_minus < 1.0, "alpha_{-1} must lie in (0, 1)");
  double m_beta = 0.0;
  for (const auto& [k, p] : beta) m_beta += static_cast<double>(k) * p;
  const double M = std::max(m_alpha, m_beta);

  ReplacementKernel<Discrete> r;
  r.is_signed = true;
  r.sampler = [alpha, beta](std::int64_t x, RngStream& rng, DiscreteDelta& out) {
    if (x == 0) {
      const std::int64_t k = detail::draw(beta, rng);
      if (k > 1) out.add(0, static_cast<double>(k - 1));
      out.add(k, 1.0);
      return;
    }
    const std::int64_t k = detail::draw(alpha, rng);
    out.add(x, -1.0);
    if (k == -1) {
      out.add(x - 1, 1.0);
    } else {
      out.add(0, static_cast<double>(k));
      out.add(x + k, 1.0);
    }
  };
  r.mean = [alpha, beta](std::int64_t x, DiscreteDelta& out) {
    if (x == 0) {
      for (const auto& [k, p] : beta) {
        if (k > 1) out.add(0, static_cast<double>(k - 1) * p);
        out.add(k, p);
      }
      return;
    }
    out.add(x, -1.0);
    for (const auto& [k, p] : alpha) {
      if (k == -1) {
        out.add(x - 1, p);
      } else {
        out.add(0, static_cast<double>(k) * p);
        out.add(x + k, p);
      }
    }
  };
  auto kernel = compose(std::move(r), WeightKernel<Discrete>::identity(),
                        MassBounds{std::min(mean_children, m_beta), std::max(mean_children, m_beta)})
                    .rescaled(M);
  return {"rrf", detail::dirac(0), std::move(kernel), std::nullopt, "rrf_qsd", LimitKind::nu,
          {{"M", M}, {"M_alpha", m_alpha}, {"M_beta", m_beta}, {"alpha_minus_one", a_minus},
           {"c1", alpha_pos / M}},
          {}};
}

/// Internal nodes of the random recursive tree counted by leaf-children.
/// R_0 = -delta_0 + delta_1; for x >= 1, with B ~ Bernoulli(1/(x+1)),
/// R_x = B delta_{x+1} + (1-B)(delta_{x-1} + delta_1) - delta_x;
/// P_x = (x+1) delta_x; started from delta_1.
inline ModelSpec<Discrete> protected_nodes_urn(double epsilon = 0.5, std::int64_t probe = 100) {
  detail::require(epsilon > 0.0 && epsilon < 1.0, "epsilon must lie in (0, 1)");
  ReplacementKernel<Discrete> r;
  r.is_signed = true;
  r.sampler = [](std::int64_t x, RngStream& rng, DiscreteDelta& out) {
    out.add(x, -1.0);
    if (x == 0) {
      out.add(1, 1.0);
      return;
    }
    if (rng.bernoulli(1.0 / static_cast<double>(x + 1))) {
      out.add(x + 1, 1.0);
    } else {
      out.add(x - 1, 1.0);
      out.add(1, 1.0);
    }
  };
  r.mean = [](std::int64_t x, DiscreteDelta& out) {
    out.add(x, -1.0);
    if (x == 0) {
      out.add(1, 1.0);
      return;
    }
    const double b = 1.0 / static_cast<double>(x + 1);
    out.add(x + 1, b);
    out.add(x - 1, 1.0 - b);
    out.add(1, 1.0 - b);
  };
  auto kernel = compose(std::move(r),
                        WeightKernel<Discrete>::scalar([](std::int64_t x) { return static_cast<double>(x + 1); }),
                        MassBounds{1.0, 1.0});

  // V(0) = V(1) = 1, V(x) = prod_{i=2}^x (i - epsilon); theta = 1 - epsilon/2
  // and K the worst excess on the probe.
  LyapunovSpec<Discrete> lyap;
  lyap.V = [epsilon](std::int64_t x) {
    double v = 1.0;
    for (std::int64_t i = 2; i <= x; ++i) v *= static_cast<double>(i) - epsilon;
    return v;
  };
  lyap.theta = 1.0 - epsilon / 2.0;
  lyap.c1 = 1.0;
  lyap.K = 0.0;
  for (std::int64_t x = 0; x <= probe; ++x)
    lyap.K = std::max(lyap.K, kernel.mean_integral(x, lyap.V) - lyap.theta * lyap.V(x));

  return {"protected_nodes", detail::dirac(1), std::move(kernel), std::move(lyap), "protected_pi",
          LimitKind::nu_R, {{"epsilon", epsilon}}, {}};
}

// Proportion of protected nodes among all nodes: internal nodes with no
// leaf-child over internal nodes plus leaves (sum_x x m(x)).
inline double all_nodes_protected(const DiscreteMeasure& m) {
  const double leaves = m.integrate([](std::int64_t x) { return static_cast<double>(x); });
  return m.weight_at(0) / (m.mass() + leaves);
}

/// Law of the horizon T of a sample path: +infinity, a fixed value, geometric
/// on {0, 1, ...} with P(T >= n) = (1-p)^n, or exponential (continuous time).
struct HorizonLaw {
  enum class Kind { infinite, fixed, geometric, exponential };
  Kind kind = Kind::infinite;
  double param = 0.0;

  static HorizonLaw infinite() { return {}; }
  static HorizonLaw fixed(double t) { return {Kind::fixed, t}; }
  static HorizonLaw geometric(double p) { return {Kind::geometric, p}; }
  static HorizonLaw exponential(double rate) { return {Kind::exponential, rate}; }

  // nullopt stands for T = +infinity.
  std::optional<double> sample(RngStream& rng) const {
    switch (kind) {
      case Kind::infinite: return std::nullopt;
      case Kind::fixed: return param;
      case Kind::geometric:
        if (param >= 1.0) return 0.0;
        return std::floor(std::log(rng.uniform_pos()) / std::log1p(-param));
      case Kind::exponential: return rng.exponential(param);
    }
    return std::nullopt;
  }
};

inline constexpr std::uint64_t kPathCap = 10'000'000;
inline constexpr std::size_t kPilotDraws = 10'000;
inline constexpr double kPilotSafety = 1.5;

/// Absorbed Markov chain on a discrete space plus a horizon law. `step`
/// returns the next state, or -1 for the cemetery.
struct AbsorbedChainSpec {
  std::function<std::int64_t(std::int64_t, RngStream&)> step;
  std::optional<DenseMatrix> matrix;
  HorizonLaw horizon;
  std::vector<std::int64_t> probe;  // starts used for the pilot mass estimate
  std::uint64_t path_cap = kPathCap;

  static AbsorbedChainSpec from_matrix(DenseMatrix g, HorizonLaw horizon = {}) {
    if (!g.square() || g.rows() == 0) throw InvalidMatrix("transition matrix must be square and non-empty");
    std::vector<std::vector<double>> cum(g.rows());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double c = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) {
        if (!(g(i, j) >= 0.0) || !std::isfinite(g(i, j))) throw InvalidMatrix("transition entries must be >= 0");
        c += g(i, j);
        cum[i].push_back(c);
      }
      if (c > 1.0 + 1e-12) throw InvalidMatrix("row " + std::to_string(i) + " sums to more than 1");
    }
    AbsorbedChainSpec spec;
    spec.step = [cum = std::move(cum)](std::int64_t x, RngStream& rng) -> std::int64_t {
      const auto& row = cum[static_cast<std::size_t>(x)];
      const double u = rng.uniform();
      const auto it = std::upper_bound(row.begin(), row.end(), u);
      return it == row.end() ? -1 : static_cast<std::int64_t>(it - row.begin());
    };
    spec.probe = probe_range(0, static_cast<std::int64_t>(g.rows()) - 1);
    spec.matrix = std::move(g);
    spec.horizon = horizon;
    return spec;
  }
};

// Sub-stochastic 3-state chain used as the reference sample-path example.
inline DenseMatrix three_state_chain() {
  return DenseMatrix{{0.5, 0.3, 0.0}, {0.2, 0.4, 0.2}, {0.0, 0.3, 0.5}};
}

namespace detail {

// N = sum_n P(T >= n) G^n, the expected occupation matrix of a path.
inline DenseMatrix expected_occupation(const DenseMatrix& g, const HorizonLaw& h) {
  const std::size_t n = g.rows();
  switch (h.kind) {
    case HorizonLaw::Kind::infinite: {
      DenseMatrix a = DenseMatrix::identity(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a(i, j) -= g(i, j);
      return solve(a, DenseMatrix::identity(n));
    }
    case HorizonLaw::Kind::geometric: {
      DenseMatrix a = DenseMatrix::identity(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a(i, j) -= (1.0 - h.param) * g(i, j);
      return solve(a, DenseMatrix::identity(n));
    }
    case HorizonLaw::Kind::fixed: {
      DenseMatrix sum = DenseMatrix::identity(n);
      DenseMatrix power = DenseMatrix::identity(n);
      const auto steps = static_cast<std::uint64_t>(h.param);
      for (std::uint64_t s = 0; s < steps; ++s) {
        DenseMatrix next(n, n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < n; ++k)
            if (power(i, k) != 0.0)
              for (std::size_t j = 0; j < n; ++j) next(i, j) += power(i, k) * g(k, j);
        power = std::move(next);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) sum(i, j) += power(i, j);
      }
      return sum;
    }
    case HorizonLaw::Kind::exponential: break;
  }
  throw InvalidParams("exponential horizons apply to continuous-time paths only");
}

}  // namespace detail

/// Urn whose replacement draw at x is the occupation measure
/// sum_{n=0}^{T ^ (tau-1)} delta_{X_n} of a fresh path of the chain from x.
/// The kernel is divided by sup_x R_x(E): exact when the chain has a matrix,
/// otherwise 1.5 times a pilot estimate.
inline ModelSpec<Discrete> discrete_sample_path_urn(AbsorbedChainSpec chain, std::optional<DiscreteMeasure> m0 = {},
                                                    std::uint64_t pilot_seed = 0) {
  if (!chain.step) throw InvalidParams("chain needs a transition sampler");
  const HorizonLaw h = chain.horizon;
  if (h.kind == HorizonLaw::Kind::exponential) throw InvalidParams("discrete paths need a discrete horizon law");
  if (h.kind == HorizonLaw::Kind::fixed && !(h.param >= 1.0))
    throw InvalidParams("horizon T = 0 almost surely is not allowed");
  if (h.kind == HorizonLaw::Kind::geometric && !(h.param > 0.0 && h.param < 1.0))
    throw InvalidParams("geometric horizon parameter must lie in (0, 1)");

  ReplacementKernel<Discrete> r;
  r.sampler = [step = chain.step, h, cap = chain.path_cap](std::int64_t x, RngStream& rng, DiscreteDelta& out) {
    const auto t = h.sample(rng);
    std::uint64_t n = 0;
    out.add(x, 1.0);
    while (!t || static_cast<double>(n) < *t) {
      x = step(x, rng);
      if (x < 0) break;
      ++n;
      if (n >= cap) throw HorizonCapExceeded("sample path reached the cap of " + std::to_string(cap) + " steps");
      out.add(x, 1.0);
    }
  };

  std::map<std::string, double> params;
  std::vector<std::string> warnings;
  double sup_mass = 0.0;
  double inf_mass = 0.0;
  if (chain.matrix) {
    const DenseMatrix N = detail::expected_occupation(*chain.matrix, h);
    inf_mass = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < N.rows(); ++i) {
      sup_mass = std::max(sup_mass, N.row_sum(i));
      inf_mass = std::min(inf_mass, N.row_sum(i));
    }
    r.mean = [N](std::int64_t x, DiscreteDelta& out) {
      for (std::size_t j = 0; j < N.cols(); ++j)
        if (N(static_cast<std::size_t>(x), j) != 0.0) out.add(static_cast<std::int64_t>(j), N(x, j));
    };
    params["sup_mass"] = sup_mass;
  } else {
    if (chain.probe.empty()) throw InvalidParams("chain without a matrix needs probe states for the pilot");
    RngStream rng(pilot_seed, 0xC0FFEE);
    DiscreteDelta d;
    const std::size_t per_start = std::max<std::size_t>(1, kPilotDraws / chain.probe.size());
    for (std::int64_t x : chain.probe) {
      double total = 0.0;
      for (std::size_t k = 0; k < per_start; ++k) {
        d.clear();
        r.sampler(x, rng, d);
        total += d.mass();
      }
      sup_mass = std::max(sup_mass, total / static_cast<double>(per_start));
    }
    sup_mass *= kPilotSafety;
    params["pilot_sup_mass"] = sup_mass;
    warnings.push_back("no exact mean kernel: rescaled by a pilot estimate of sup_x R_x(E)");
  }
  if (!m0) m0 = detail::dirac(chain.probe.empty() ? 0 : chain.probe.front());
  auto kernel = compose(std::move(r), WeightKernel<Discrete>::identity(), MassBounds{inf_mass, sup_mass})
                    .rescaled(sup_mass);
  return {"sample_path", std::move(*m0), std::move(kernel), std::nullopt, "eigen", LimitKind::nu_R,
          std::move(params), std::move(warnings)};
}

/// Diffusion dX = dB + b(X) dt on R^dim killed at rate kappa(X) <= kappa_max,
/// simulated by Euler-Maruyama with step dt.
struct KilledDiffusionSpec {
  std::size_t dim = 1;
  std::function<void(std::span<const double>, std::span<double>)> drift;
  std::function<double(std::span<const double>)> kill_rate;
  double kappa_max = 1.0;
  double kappa_min = 0.0;  // known lower bound on kappa (0 if unknown)
  double dt = 1e-3;
  HorizonLaw horizon;
  bool trapezoid = false;
  std::uint64_t path_cap = kPathCap;

  void validate() const {
    if (dim == 0) throw InvalidParams("dimension must be >= 1");
    if (!drift || !kill_rate) throw InvalidParams("drift and kill rate are required");
    if (!(dt > 0.0) || !std::isfinite(dt)) throw InvalidParams("dt must be > 0");
    if (!(kappa_max > 0.0) || !std::isfinite(kappa_max)) throw InvalidParams("kappa_max must be > 0");
    if (kappa_min < 0.0 || kappa_min > kappa_max) throw InvalidParams("kappa_min must lie in [0, kappa_max]");
    if (horizon.kind == HorizonLaw::Kind::geometric) throw InvalidParams("continuous paths need a continuous horizon");
    if (horizon.kind == HorizonLaw::Kind::fixed && !(horizon.param > 0.0))
      throw InvalidParams("horizon T = 0 almost surely is not allowed");
  }

  /// Linear drift b(x) = -c x with constant killing kappa.
  static KilledDiffusionSpec ornstein_uhlenbeck(std::size_t dim, double c, double kappa, double dt) {
    KilledDiffusionSpec s;
    s.dim = dim;
    s.drift = [c](std::span<const double> x, std::span<double> out) {
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = -c * x[i];
    };
    s.kill_rate = [kappa](std::span<const double>) { return kappa; };
    s.kappa_max = kappa;
    s.kappa_min = kappa;
    s.dt = dt;
    return s;
  }
};

struct DriftProbe {
  std::vector<double> radii;
  std::vector<double> ratios;  // <b(x), x> / |x| at each probe point
  double worst_outer = 0.0;    // max ratio on the outermost shell
  double threshold = 0.0;      // -(3/2) sqrt(kappa_max)
  bool ok = false;
};

/// Evaluates <b(x), x>/|x| at +-r e_i for each radius; the condition is
/// judged on the outermost shell only, being asymptotic.
inline DriftProbe drift_condition_probe(const KilledDiffusionSpec& spec, std::vector<double> radii = {10, 100, 1000}) {
  spec.validate();
  DriftProbe p;
  p.threshold = -1.5 * std::sqrt(spec.kappa_max);
  std::vector<double> x(spec.dim);
  std::vector<double> b(spec.dim);
  p.worst_outer = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < radii.size(); ++k) {
    for (std::size_t i = 0; i < spec.dim; ++i) {
      for (double sign : {1.0, -1.0}) {
        std::fill(x.begin(), x.end(), 0.0);
        x[i] = sign * radii[k];
        spec.drift(x, b);
        double dot = 0.0;
        for (std::size_t j = 0; j < spec.dim; ++j) dot += b[j] * x[j];
        const double ratio = dot / radii[k];
        p.radii.push_back(radii[k]);
        p.ratios.push_back(ratio);
        if (k + 1 == radii.size()) p.worst_outer = std::max(p.worst_outer, ratio);
      }
    }
  }
  p.ok = p.worst_outer < p.threshold;
  return p;
}

namespace detail {

// Euler-Maruyama path from x0 until the first accepted kill or the horizon.
// Calls visit(point, weight) for every occupation atom.
template <class Visit>
void killed_path(const KilledDiffusionSpec& s, std::span<const double> x0, RngStream& rng, Visit&& visit) {
  const auto horizon = s.horizon.sample(rng);
  std::vector<double> x(x0.begin(), x0.end());
  std::vector<double> b(s.dim);
  const double sq = std::sqrt(s.dt);
  double t = 0.0;
  double next_kill = rng.exponential(s.kappa_max);
  std::uint64_t k = 0;
  for (;;) {
    const double t_next = t + s.dt;
    bool dead = false;
    if (horizon && *horizon <= t_next) dead = true;
    while (!dead && next_kill <= t_next) {
      if (rng.uniform() * s.kappa_max < s.kill_rate(x)) dead = true;
      else next_kill += rng.exponential(s.kappa_max);
    }
    const double w = (s.trapezoid && k == 0) ? 0.5 * s.dt : s.dt;
    visit(std::span<const double>(x), w);
    s.drift(x, b);
    for (std::size_t i = 0; i < s.dim; ++i) x[i] += b[i] * s.dt + sq * rng.normal();
    ++k;
    if (dead) {
      if (s.trapezoid) visit(std::span<const double>(x), 0.5 * s.dt);
      return;
    }
    if (k >= s.path_cap) throw HorizonCapExceeded("diffusion path reached the cap of " + std::to_string(s.path_cap) + " steps");
    t = t_next;
  }
}

}  // namespace detail

/// Urn whose replacement draw at x is the discretised occupation measure of
/// a killed diffusion from x: atoms at X_0, ..., X_k of weight dt, where the
/// kill falls in the k-th step. The rescaling constant is 1/kappa_min + dt
/// when kappa_min > 0, else 1.5 times a pilot estimate from the origin.
inline ModelSpec<Euclidean> killed_diffusion_urn(KilledDiffusionSpec spec, std::optional<std::vector<double>> x0 = {},
                                                 std::uint64_t pilot_seed = 0) {
  spec.validate();
  std::vector<std::string> warnings;
  const auto drift = drift_condition_probe(spec);
  if (!drift.ok)
    warnings.push_back("drift condition <b(x),x>/|x| < -(3/2) sqrt(kappa_max) not met on the probe shell");
  std::vector<double> start = x0.value_or(std::vector<double>(spec.dim, 0.0));
  if (start.size() != spec.dim) throw InvalidParams("start point has the wrong dimension");
  PointStore<Euclidean>::validate(start);

  ReplacementKernel<Euclidean> r;
  r.sampler = [spec](std::span<const double> x, RngStream& rng, EuclideanDelta& out) {
    detail::killed_path(spec, x, rng, [&](std::span<const double> p, double w) { out.add(p, w); });
  };

  std::map<std::string, double> params{{"dt", spec.dt}, {"kappa_max", spec.kappa_max}, {"dim", double(spec.dim)}};
  double sup_mass;
  if (spec.kappa_min > 0.0) {
    sup_mass = 1.0 / spec.kappa_min + spec.dt;
    if (spec.horizon.kind == HorizonLaw::Kind::fixed) sup_mass = std::min(sup_mass, spec.horizon.param + spec.dt);
  } else {
    RngStream rng(pilot_seed, 0xC0FFEE);
    double total = 0.0;
    for (std::size_t k = 0; k < kPilotDraws; ++k)
      detail::killed_path(spec, start, rng, [&](std::span<const double>, double w) { total += w; });
    sup_mass = kPilotSafety * total / static_cast<double>(kPilotDraws);
    warnings.push_back("rescaled by a pilot estimate of sup_x R_x(E)");
  }
  params["sup_mass"] = sup_mass;

  EuclideanMeasure m0(spec.dim);
  EuclideanDelta d(spec.dim);
  d.add(start, 1.0);
  m0.add(d);
  return {"killed_diffusion", std::move(m0),
          compose(std::move(r), WeightKernel<Euclidean>::identity()).rescaled(sup_mass),
          std::nullopt, "gaussian", LimitKind::nu, std::move(params), std::move(warnings)};
}

struct SelfInteractingOptions {
  std::optional<std::vector<double>> x0;
  // W1 against this reference is traced every `trace_every` time units
  // (dimension 1 only).
  std::optional<ReferenceDistribution> reference;
  double trace_every = 0.0;
  std::size_t grid_points = 10000;
  bool keep_atoms = true;
};

struct SelfInteractingResult {
  std::size_t dim = 1;
  double dt = 0.0;
  double t = 0.0;
  std::uint64_t jumps = 0;
  std::uint64_t first_jump_step = 0;  // atoms stored before the first relocation
  std::vector<double> coords;         // occupation atoms, weight dt each
  std::vector<std::pair<double, double>> w1_trace;  // (time, W1)
  std::optional<double> final_w1;

  std::size_t size() const { return dim == 0 ? 0 : coords.size() / dim; }

  // Normalised occupation measure.
  EuclideanMeasure occupation() const {
    EuclideanMeasure m(dim);
    EuclideanDelta d(dim);
    const double w = 1.0 / static_cast<double>(size());
    d.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) d.add(std::span<const double>(coords.data() + i * dim, dim), w);
    m.add(d);
    return m;
  }
};

/// Self-interacting diffusion: Y follows the diffusion and, at kill events,
/// jumps to a point drawn from its own occupation measure. The occupation
/// measure is stored as the grid points Y_0, Y_dt, ... (all weight dt), so
/// relocation draws a uniform stored atom.
inline SelfInteractingResult self_interacting_qsd(const KilledDiffusionSpec& spec, double t_max, RngStream& rng,
                                                  const SelfInteractingOptions& opt = {}) {
  spec.validate();
  if (!(t_max > 0.0) || !std::isfinite(t_max)) throw InvalidParams("t_max must be > 0");
  std::vector<double> y = opt.x0.value_or(std::vector<double>(spec.dim, 0.0));
  if (y.size() != spec.dim) throw InvalidParams("start point has the wrong dimension");
  PointStore<Euclidean>::validate(y);
  if (spec.kill_rate(y) < 1.0) throw InvalidParams("kill rate must be >= 1 (violated at the start point)");
  for (double r : {1.0, 10.0}) {
    std::vector<double> p(spec.dim, 0.0);
    p[0] = r;
    if (spec.kill_rate(p) < 1.0) throw InvalidParams("kill rate must be >= 1 (violated on the probe)");
  }
  const bool traced = opt.reference.has_value() && spec.dim == 1;
  if (opt.reference && spec.dim != 1) throw DimensionUnsupported("W1 trace needs dimension 1");

  SelfInteractingResult res;
  res.dim = spec.dim;
  res.dt = spec.dt;
  const auto steps = static_cast<std::uint64_t>(std::llround(t_max / spec.dt));
  if (opt.keep_atoms) res.coords.reserve(steps * spec.dim);
  std::optional<BinnedCdf> hist;
  if (traced) hist.emplace(BinnedCdf::around(*opt.reference, opt.grid_points));
  const auto trace_stride =
      opt.trace_every > 0.0 ? std::max<std::uint64_t>(1, std::llround(opt.trace_every / spec.dt)) : 0;

  std::vector<double> b(spec.dim);
  const double sq = std::sqrt(spec.dt);
  double next_kill = rng.exponential(spec.kappa_max);
  std::uint64_t stored = 0;
  for (std::uint64_t k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) * spec.dt;
    res.coords.insert(res.coords.end(), y.begin(), y.end());
    ++stored;
    if (hist) hist->add(y[0]);
    if (trace_stride && (k + 1) % trace_stride == 0)
      res.w1_trace.emplace_back(static_cast<double>(k + 1) * spec.dt, hist->w1(*opt.reference));

    bool jump = false;
    while (next_kill <= t + spec.dt) {
      if (rng.uniform() * spec.kappa_max < spec.kill_rate(y)) jump = true;
      next_kill += rng.exponential(spec.kappa_max);
    }
    if (jump) {
      if (res.jumps == 0) res.first_jump_step = stored;
      const std::size_t j = rng.uniform_index(stored);
      std::copy_n(res.coords.begin() + static_cast<std::ptrdiff_t>(j * spec.dim), spec.dim, y.begin());
      ++res.jumps;
    } else {
      spec.drift(y, b);
      for (std::size_t i = 0; i < spec.dim; ++i) y[i] += b[i] * spec.dt + sq * rng.normal();
    }
  }
  res.t = static_cast<double>(steps) * spec.dt;
  if (hist) res.final_w1 = hist->w1(*opt.reference);
  if (!opt.keep_atoms) res.coords.clear();
  return res;
}

}  // namespace mvpp
