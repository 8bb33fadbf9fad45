#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "mvpp/error.hpp"
#include "mvpp/io.hpp"
#include "mvpp/kernels.hpp"
#include "mvpp/measure.hpp"

namespace mvpp {

// Row-major dense matrix; just enough for kernels on small finite spaces.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  DenseMatrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    for (const auto& r : rows) {
      if (r.size() != cols_) throw InvalidMatrix("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool square() const { return rows_ == cols_; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  double row_sum(std::size_t i) const {
    double s = 0.0;
    for (std::size_t j = 0; j < cols_; ++j) s += (*this)(i, j);
    return s;
  }

  DenseMatrix scaled(double c) const {
    DenseMatrix out = *this;
    for (double& x : out.data_) x *= c;
    return out;
  }

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix out(n, n);
    for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
    return out;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Solves A X = B by Gaussian elimination with partial pivoting.
inline DenseMatrix solve(DenseMatrix a, DenseMatrix b) {
  const std::size_t n = a.rows();
  if (!a.square() || b.rows() != n) throw InvalidMatrix("solve: dimension mismatch");
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a(r, col)) > std::abs(a(piv, col))) piv = r;
    if (std::abs(a(piv, col)) < 1e-300) throw InvalidMatrix("solve: singular matrix");
    if (piv != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a(col, j), a(piv, j));
      for (std::size_t j = 0; j < b.cols(); ++j) std::swap(b(col, j), b(piv, j));
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a(r, col) / a(col, col);
      if (f == 0.0) continue;
      for (std::size_t j = col; j < n; ++j) a(r, j) -= f * a(col, j);
      for (std::size_t j = 0; j < b.cols(); ++j) b(r, j) -= f * b(col, j);
    }
  }
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < b.cols(); ++j) b(r, j) /= a(r, r);
  return b;
}

/// Limit law used as ground truth: an analytic formula or an eigen-oracle.
/// Discrete references live on {0, ..., pmf.size()-1}.
struct ReferenceDistribution {
  enum class Kind { analytic, eigen };

  Kind kind = Kind::analytic;
  std::string key;
  std::vector<double> pmf_values;
  // Gaussian references (1-d) carry mean and variance instead of a pmf.
  std::optional<std::pair<double, double>> gaussian;
  std::optional<double> eigenvalue;
  std::vector<std::string> warnings;
  std::size_t iterations = 0;

  bool discrete() const { return !gaussian.has_value(); }

  double pmf(std::int64_t x) const {
    if (x < 0 || static_cast<std::size_t>(x) >= pmf_values.size()) return 0.0;
    return pmf_values[static_cast<std::size_t>(x)];
  }

  double cdf(double x) const {
    if (gaussian) {
      const auto [mean, var] = *gaussian;
      return 0.5 * std::erfc(-(x - mean) / std::sqrt(2.0 * var));
    }
    double s = 0.0;
    for (std::size_t k = 0; k < pmf_values.size() && static_cast<double>(k) <= x; ++k) s += pmf_values[k];
    return s;
  }

  DiscreteMeasure to_measure() const {
    if (!discrete()) throw DimensionUnsupported("continuous reference has no atomic representation");
    DiscreteDelta d;
    for (std::size_t k = 0; k < pmf_values.size(); ++k)
      if (pmf_values[k] != 0.0) d.add(static_cast<std::int64_t>(k), pmf_values[k]);
    DiscreteMeasure m;
    m.add(d);
    return m;
  }
};

struct PowerIterationOptions {
  double tol = 1e-12;
  std::size_t max_iter = 1'000'000;
};

namespace detail {

struct SparseRows {
  std::vector<std::size_t> start;
  std::vector<std::size_t> col;
  std::vector<double> val;
};

inline SparseRows to_sparse(const DenseMatrix& g) {
  SparseRows s;
  s.start.push_back(0);
  for (std::size_t i = 0; i < g.rows(); ++i) {
    for (std::size_t j = 0; j < g.cols(); ++j) {
      if (g(i, j) != 0.0) {
        s.col.push_back(j);
        s.val.push_back(g(i, j));
      }
    }
    s.start.push_back(s.col.size());
  }
  return s;
}

// Period of the transition graph restricted to off-diagonal-or-diagonal
// positive entries; 0 when the graph is not strongly connected.
inline std::size_t graph_period(const DenseMatrix& g) {
  const std::size_t n = g.rows();
  if (n == 0) return 0;
  auto reach = [&](bool forward) {
    std::vector<char> seen(n, 0);
    std::queue<std::size_t> todo;
    todo.push(0);
    seen[0] = 1;
    while (!todo.empty()) {
      const std::size_t u = todo.front();
      todo.pop();
      for (std::size_t v = 0; v < n; ++v) {
        const double w = forward ? g(u, v) : g(v, u);
        if (w > 0.0 && !seen[v]) {
          seen[v] = 1;
          todo.push(v);
        }
      }
    }
    return std::all_of(seen.begin(), seen.end(), [](char c) { return c != 0; });
  };
  if (!reach(true) || !reach(false)) return 0;
  std::vector<long> level(n, -1);
  std::queue<std::size_t> todo;
  level[0] = 0;
  todo.push(0);
  std::size_t period = 0;
  while (!todo.empty()) {
    const std::size_t u = todo.front();
    todo.pop();
    for (std::size_t v = 0; v < n; ++v) {
      if (!(g(u, v) > 0.0)) continue;
      if (level[v] < 0) {
        level[v] = level[u] + 1;
        todo.push(v);
      } else {
        period = std::gcd(period, static_cast<std::size_t>(std::abs(level[u] + 1 - level[v])));
      }
    }
  }
  return period;
}

// Normalised left Perron vector of (g + shift I) by power iteration.
inline ReferenceDistribution perron_left(const DenseMatrix& g, double shift, const PowerIterationOptions& opt,
                                         std::vector<std::string> warnings) {
  const std::size_t n = g.rows();
  const SparseRows s = to_sparse(g);
  std::vector<double> nu(n, 1.0 / static_cast<double>(n));
  std::vector<double> next(n);
  ReferenceDistribution out;
  out.kind = ReferenceDistribution::Kind::eigen;
  out.key = "eigen";
  bool converged = false;
  std::size_t it = 0;
  for (; it < opt.max_iter && !converged; ++it) {
    for (std::size_t j = 0; j < n; ++j) next[j] = shift * nu[j];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = s.start[i]; p < s.start[i + 1]; ++p) next[s.col[p]] += nu[i] * s.val[p];
    const double total = std::accumulate(next.begin(), next.end(), 0.0);
    if (!(total > 0.0)) throw NoConvergence("iterate lost all mass (nilpotent kernel?)");
    double diff = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      next[j] /= total;
      diff += std::abs(next[j] - nu[j]);
    }
    nu.swap(next);
    converged = diff < opt.tol;
  }
  if (!converged)
    throw NoConvergence("power iteration did not reach tol " + format_double(opt.tol) + " in " +
                        std::to_string(opt.max_iter) + " iterations");
  double theta = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = s.start[i]; p < s.start[i + 1]; ++p) theta += nu[i] * s.val[p];
  out.pmf_values = std::move(nu);
  out.eigenvalue = theta;
  out.iterations = it;
  out.warnings = std::move(warnings);
  return out;
}

inline std::vector<std::string> structure_warnings(const DenseMatrix& g, bool& needs_shift) {
  std::vector<std::string> warnings;
  const std::size_t period = graph_period(g);
  needs_shift = period != 1;
  if (period == 0)
    warnings.push_back("matrix is reducible: the quasi-stationary distribution may not be unique; "
                       "result depends on the uniform start");
  else if (period > 1)
    warnings.push_back("matrix is periodic (period " + std::to_string(period) +
                       "); iterating on a diagonally shifted matrix");
  return warnings;
}

}  // namespace detail

/// Quasi-stationary distribution of a sub-stochastic matrix: the normalised
/// left Perron eigenvector nu with nu G = theta_0 nu.
inline ReferenceDistribution power_iteration_qsd(const DenseMatrix& g, const PowerIterationOptions& opt = {}) {
  if (!g.square() || g.rows() == 0) throw InvalidMatrix("matrix must be square and non-empty");
  for (std::size_t i = 0; i < g.rows(); ++i) {
    for (std::size_t j = 0; j < g.cols(); ++j)
      if (!(g(i, j) >= 0.0) || !std::isfinite(g(i, j)))
        throw InvalidMatrix("entry (" + std::to_string(i) + "," + std::to_string(j) + ") is negative or not finite");
    if (g.row_sum(i) > 1.0 + 1e-12) throw InvalidMatrix("row " + std::to_string(i) + " sums to more than 1");
  }
  bool needs_shift = false;
  auto warnings = detail::structure_warnings(g, needs_shift);
  double shift = 0.0;
  if (needs_shift)
    for (std::size_t i = 0; i < g.rows(); ++i) shift = std::max(shift, g.row_sum(i));
  return detail::perron_left(g, shift, opt, std::move(warnings));
}

/// Same for a kernel whose off-diagonal part is non-negative but whose
/// diagonal may be negative (signed replacement kernels). The eigenvector of
/// Q is that of Q + cI for c large enough to make the diagonal non-negative.
inline ReferenceDistribution generator_qsd(const DenseMatrix& q, const PowerIterationOptions& opt = {}) {
  if (!q.square() || q.rows() == 0) throw InvalidMatrix("matrix must be square and non-empty");
  double shift = 0.0;
  for (std::size_t i = 0; i < q.rows(); ++i) {
    for (std::size_t j = 0; j < q.cols(); ++j) {
      if (!std::isfinite(q(i, j))) throw InvalidMatrix("non-finite entry");
      if (i != j && q(i, j) < 0.0) throw InvalidMatrix("negative off-diagonal entry");
    }
    shift = std::max(shift, -q(i, i));
  }
  DenseMatrix shifted = q;
  for (std::size_t i = 0; i < q.rows(); ++i) shifted(i, i) += shift;
  bool needs_shift = false;
  auto warnings = detail::structure_warnings(shifted, needs_shift);
  if (needs_shift) shift += 1.0;
  auto ref = detail::perron_left(q, shift, opt, std::move(warnings));
  return ref;
}

/// Birth-death kernel R_x = lambda_x delta_{x+1} + mu_x delta_{x-1} restricted
/// to {0..N-1}; mass leaving through N-1 is lost.
inline DenseMatrix truncate_bd_kernel(const std::function<double(std::int64_t)>& lambda,
                                      const std::function<double(std::int64_t)>& mu, std::size_t n) {
  if (n < 2) throw InvalidParams("truncation level N must be >= 2");
  DenseMatrix g(n, n);
  for (std::size_t x = 0; x < n; ++x) {
    const double l = lambda(static_cast<std::int64_t>(x));
    const double m = x == 0 ? 0.0 : mu(static_cast<std::int64_t>(x));
    if (!(l >= 0.0) || !(m >= 0.0) || !std::isfinite(l) || !std::isfinite(m))
      throw InvalidParams("birth/death rates must be finite and >= 0 (x=" + std::to_string(x) + ")");
    if (x + 1 < n) g(x, x + 1) = l;
    if (x >= 1) g(x, x - 1) = m;
  }
  return g;
}

// Q restricted to {0..N-1}, built from the exact mean kernel.
inline DenseMatrix kernel_matrix(const ComposedKernel<Discrete>& k, std::size_t n) {
  DenseMatrix g(n, n);
  DiscreteDelta q;
  for (std::size_t x = 0; x < n; ++x) {
    k.mean(static_cast<std::int64_t>(x), q);
    for (std::size_t a = 0; a < q.size(); ++a) {
      const auto y = q.point(a);
      if (y >= 0 && static_cast<std::size_t>(y) < n) g(x, static_cast<std::size_t>(y)) += q.weight(a);
    }
  }
  return g;
}

namespace detail {

// t[x] = sum_{i >= x+1} 1/i!, for x < n.
inline std::vector<double> factorial_tails(std::size_t n) {
  const std::size_t top = n + 30;
  std::vector<double> inv_fact(top + 1);
  inv_fact[0] = 1.0;
  for (std::size_t i = 1; i <= top; ++i) inv_fact[i] = inv_fact[i - 1] / static_cast<double>(i);
  std::vector<double> tail(top + 1, 0.0);
  for (std::size_t x = top; x-- > 0;) tail[x] = tail[x + 1] + inv_fact[x + 1];
  tail.resize(n);
  return tail;
}

inline void truncate_tail(std::vector<double>& pmf, double total = 1.0) {
  double cum = 0.0;
  for (std::size_t k = 0; k < pmf.size(); ++k) {
    cum += pmf[k];
    if (total - cum < 1e-12) {
      pmf.resize(k + 1);
      return;
    }
  }
}

inline double param(const std::map<std::string, double>& params, const std::string& name) {
  const auto it = params.find(name);
  if (it == params.end()) throw InvalidParams("reference parameter '" + name + "' is missing");
  return it->second;
}

}  // namespace detail

/// Closed-form limits. Keys: "poisson" {rate}, "geometric_half",
/// "protected_pi", "protected_nu", "gaussian" {mean, variance}.
inline ReferenceDistribution analytic_reference(const std::string& key,
                                                const std::map<std::string, double>& params = {}) {
  ReferenceDistribution ref;
  ref.kind = ReferenceDistribution::Kind::analytic;
  ref.key = key;
  const double e = std::exp(1.0);
  if (key == "poisson") {
    const double rate = detail::param(params, "rate");
    if (!(rate > 0.0)) throw InvalidParams("poisson rate must be > 0");
    double p = std::exp(-rate);
    for (std::size_t k = 0; k < 10000; ++k) {
      ref.pmf_values.push_back(p);
      p *= rate / static_cast<double>(k + 1);
    }
    detail::truncate_tail(ref.pmf_values);
  } else if (key == "mm_jump_chain") {
    // stationary law of the jump chain of the M/M/infinity queue, (lambda + mu x) gamma(x) / (2 lambda)
    const double lambda = detail::param(params, "lambda");
    const double mu = detail::param(params, "mu");
    if (!(lambda > 0.0 && mu > 0.0)) throw InvalidParams("mm_jump_chain needs lambda, mu > 0");
    const double rate = lambda / mu;
    double p = std::exp(-rate);
    for (std::size_t k = 0; k < 10000; ++k) {
      ref.pmf_values.push_back(p * (lambda + mu * static_cast<double>(k)) / (2.0 * lambda));
      p *= rate / static_cast<double>(k + 1);
    }
    detail::truncate_tail(ref.pmf_values);
  } else if (key == "geometric_half") {
    for (std::size_t x = 0; x < 64; ++x) ref.pmf_values.push_back(std::ldexp(1.0, -static_cast<int>(x) - 1));
    detail::truncate_tail(ref.pmf_values);
  } else if (key == "protected_pi") {
    const auto tail = detail::factorial_tails(40);
    ref.pmf_values.push_back(1.0 - 2.0 / e);
    for (std::size_t x = 1; x < 40; ++x) ref.pmf_values.push_back(2.0 / e * tail[x]);
    detail::truncate_tail(ref.pmf_values);
  } else if (key == "protected_nu") {
    const auto tail = detail::factorial_tails(40);
    const double c = 1.0 + 2.0 * e;
    std::vector<double> nu{(e - 2.0) / c, 4.0 * (e - 2.0) / c};
    for (std::size_t i = 2; i < 40; ++i) nu.push_back(2.0 * static_cast<double>(i + 1) / c * tail[i]);
    const double total = 2.0 * e / c;
    for (double& v : nu) v /= total;
    ref.pmf_values = std::move(nu);
    detail::truncate_tail(ref.pmf_values);
  } else if (key == "gaussian") {
    const double var = detail::param(params, "variance");
    if (!(var > 0.0)) throw InvalidParams("gaussian variance must be > 0");
    ref.gaussian = std::make_pair(detail::param(params, "mean"), var);
  } else {
    throw UnknownReference("no analytic reference named '" + key + "'");
  }
  return ref;
}

/// The measure sum_x nu(x) R_x over x < support_cap.
inline DiscreteMeasure nu_R(const ReferenceDistribution& nu, const ComposedKernel<Discrete>& k,
                            std::size_t support_cap, double nu_scale = 1.0) {
  if (!nu.discrete()) throw DimensionUnsupported("nu_R needs a discrete reference");
  if (!k.has_mean()) throw MeanUnavailable("nu_R needs the exact mean kernel");
  DiscreteDelta acc;
  DiscreteDelta r;
  const std::size_t cap = std::min(support_cap, nu.pmf_values.size());
  for (std::size_t x = 0; x < cap; ++x) {
    const double w = nu_scale * nu.pmf_values[x];
    if (w == 0.0) continue;
    k.replacement_mean(static_cast<std::int64_t>(x), r);
    for (std::size_t a = 0; a < r.size(); ++a) acc.add(r.point(a), w * r.weight(a));
  }
  DiscreteMeasure out(false);
  out.add(acc);
  return out;
}

}  // namespace mvpp
