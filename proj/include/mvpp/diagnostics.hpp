#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <atomic>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "mvpp/engine.hpp"
#include "mvpp/error.hpp"
#include "mvpp/kernels.hpp"
#include "mvpp/measure.hpp"
#include "mvpp/qsd.hpp"

namespace mvpp {

inline constexpr double kNormalizationSlack = 1e-6;

namespace detail {

inline void require_normalized(double mass, const char* which) {
  if (std::abs(mass - 1.0) > kNormalizationSlack)
    throw NotNormalized(std::string(which) + " has mass " + format_double(mass) + ", expected 1");
}

}  // namespace detail

/// Total variation distance 1/2 sum |p(x) - q(x)| between two probability
/// vectors indexed by colour.
inline double tv_distance(std::span<const double> p, std::span<const double> q) {
  detail::require_normalized(std::accumulate(p.begin(), p.end(), 0.0), "first argument");
  detail::require_normalized(std::accumulate(q.begin(), q.end(), 0.0), "second argument");
  const std::size_t n = std::max(p.size(), q.size());
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = i < p.size() ? p[i] : 0.0;
    const double b = i < q.size() ? q[i] : 0.0;
    s += std::abs(a - b);
  }
  return std::min(1.0, 0.5 * s);
}

inline double tv_distance(const DiscreteMeasure& p, const DiscreteMeasure& q) {
  detail::require_normalized(p.mass(), "first measure");
  detail::require_normalized(q.mass(), "second measure");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p.weight(i) - q.weight_at(p.point(i)));
  for (std::size_t i = 0; i < q.size(); ++i)
    if (p.weight_at(q.point(i)) == 0.0) s += std::abs(q.weight(i));
  return std::min(1.0, 0.5 * s);
}

inline double tv_distance(const DiscreteMeasure& p, const ReferenceDistribution& ref) {
  if (!ref.discrete()) throw DimensionUnsupported("TV distance needs a discrete reference");
  detail::require_normalized(p.mass(), "measure");
  detail::require_normalized(std::accumulate(ref.pmf_values.begin(), ref.pmf_values.end(), 0.0), "reference");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p.weight(i) - ref.pmf(p.point(i)));
  for (std::size_t x = 0; x < ref.pmf_values.size(); ++x)
    if (p.weight_at(static_cast<std::int64_t>(x)) == 0.0) s += ref.pmf_values[x];
  return std::min(1.0, 0.5 * s);
}

namespace detail {

inline std::vector<std::pair<double, double>> sorted_atoms(const EuclideanMeasure& m) {
  if (m.dim() > 1) throw DimensionUnsupported("Wasserstein-1 is implemented for dimension 1 only");
  std::vector<std::pair<double, double>> atoms;
  atoms.reserve(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) atoms.emplace_back(m.point(i)[0], m.weight(i));
  std::sort(atoms.begin(), atoms.end());
  return atoms;
}

}  // namespace detail

/// W1 = integral of |F_p - F_q| for two atomic probability measures on R.
inline double wasserstein1_1d(const EuclideanMeasure& p, const EuclideanMeasure& q) {
  detail::require_normalized(p.mass(), "first measure");
  detail::require_normalized(q.mass(), "second measure");
  const auto a = detail::sorted_atoms(p);
  const auto b = detail::sorted_atoms(q);
  std::size_t i = 0;
  std::size_t j = 0;
  double fa = 0.0;
  double fb = 0.0;
  double prev = 0.0;
  bool started = false;
  double w1 = 0.0;
  while (i < a.size() || j < b.size()) {
    const double x = (j >= b.size() || (i < a.size() && a[i].first <= b[j].first)) ? a[i].first : b[j].first;
    if (started) w1 += std::abs(fa - fb) * (x - prev);
    while (i < a.size() && a[i].first == x) fa += a[i++].second;
    while (j < b.size() && b[j].first == x) fb += b[j++].second;
    prev = x;
    started = true;
  }
  return w1;
}

/// W1 between an atomic measure on R and a continuous reference cdf. The
/// integral is a trapezoid rule on 10^4 grid points spanning mean +- 8 std,
/// refined at every atom so that the empirical cdf is constant on each cell.
inline double wasserstein1_1d(const EuclideanMeasure& p, const ReferenceDistribution& ref,
                              std::size_t grid_points = 10000) {
  if (!ref.gaussian) throw DimensionUnsupported("reference has no continuous cdf");
  detail::require_normalized(p.mass(), "measure");
  const auto atoms = detail::sorted_atoms(p);
  const auto [mean, var] = *ref.gaussian;
  const double sd = std::sqrt(var);
  double lo = mean - 8.0 * sd;
  double hi = mean + 8.0 * sd;
  if (!atoms.empty()) {
    lo = std::min(lo, atoms.front().first);
    hi = std::max(hi, atoms.back().first);
  }
  const double h = (hi - lo) / static_cast<double>(grid_points - 1);
  std::size_t next_atom = 0;
  double fp = 0.0;
  double x = lo;
  double w1 = 0.0;
  while (next_atom < atoms.size() && atoms[next_atom].first <= x) fp += atoms[next_atom++].second;
  for (std::size_t g = 1; g < grid_points; ++g) {
    const double grid_x = g + 1 == grid_points ? hi : lo + static_cast<double>(g) * h;
    while (x < grid_x) {
      const double stop = next_atom < atoms.size() ? std::min(grid_x, atoms[next_atom].first) : grid_x;
      if (stop > x) w1 += 0.5 * (stop - x) * (std::abs(fp - ref.cdf(x)) + std::abs(fp - ref.cdf(stop)));
      x = stop;
      while (next_atom < atoms.size() && atoms[next_atom].first <= x) fp += atoms[next_atom++].second;
    }
  }
  return w1;
}

/// Streaming histogram on a fixed grid: W1 against an analytic cdf without
/// storing or sorting the samples. Bin resolution bounds the error by the
/// bin width.
class BinnedCdf {
 public:
  BinnedCdf(double lo, double hi, std::size_t bins) : lo_(lo), hi_(hi), counts_(bins, 0.0) {
    if (!(hi > lo) || bins == 0) throw InvalidParams("histogram needs lo < hi and at least one bin");
    width_ = (hi - lo) / static_cast<double>(bins);
  }

  // Grid of `points` edges over mean +- 8 std.
  static BinnedCdf around(const ReferenceDistribution& ref, std::size_t points = 10000) {
    if (!ref.gaussian) throw DimensionUnsupported("reference has no continuous cdf");
    const auto [mean, var] = *ref.gaussian;
    const double sd = std::sqrt(var);
    return BinnedCdf(mean - 8.0 * sd, mean + 8.0 * sd, points - 1);
  }

  void add(double x, double w = 1.0) {
    total_ += w;
    if (x < lo_) {
      below_ += w;
      below_sum_ += w * x;
    } else if (x >= hi_) {
      above_ += w;
      above_sum_ += w * x;
    } else {
      const auto b = std::min(counts_.size() - 1, static_cast<std::size_t>((x - lo_) / width_));
      counts_[b] += w;
    }
  }

  double total() const { return total_; }

  double w1(const ReferenceDistribution& ref) const {
    if (!(total_ > 0.0)) throw EmptyMeasure("histogram is empty");
    // Mass outside the grid is carried to the nearest edge exactly.
    double w1 = (below_ * lo_ - below_sum_ + above_sum_ - above_ * hi_) / total_;
    double cum = below_;
    double prev_gap = std::abs(cum / total_ - ref.cdf(lo_));
    for (std::size_t b = 0; b < counts_.size(); ++b) {
      cum += counts_[b];
      const double edge = lo_ + static_cast<double>(b + 1) * width_;
      const double gap = std::abs(cum / total_ - ref.cdf(edge));
      w1 += 0.5 * width_ * (prev_gap + gap);
      prev_gap = gap;
    }
    return w1;
  }

 private:
  double lo_;
  double hi_;
  double width_;
  std::vector<double> counts_;
  double below_ = 0.0;
  double above_ = 0.0;
  double below_sum_ = 0.0;
  double above_sum_ = 0.0;
  double total_ = 0.0;
};

struct TraceEntry {
  std::uint64_t step = 0;
  double distance = 0.0;
  double mass_per_step = 0.0;
  std::map<std::string, double> extra;
};

class ConvergenceTrace {
 public:
  void push(TraceEntry row) {
    if (!rows_.empty() && row.step <= rows_.back().step)
      throw InvalidParams("trace steps must be strictly increasing");
    rows_.push_back(std::move(row));
  }

  const std::vector<TraceEntry>& rows() const { return rows_; }
  bool empty() const { return rows_.empty(); }
  std::size_t size() const { return rows_.size(); }

 private:
  std::vector<TraceEntry> rows_;
};

struct MassRate {
  double final_rate = 0.0;
  double tail_mean = 0.0;  // mean over the last 10% of rows
};

inline MassRate mass_rate(const ConvergenceTrace& trace) {
  if (trace.empty()) throw EmptyTrace("mass rate of an empty trace");
  const auto& rows = trace.rows();
  const std::size_t tail = std::max<std::size_t>(1, rows.size() / 10);
  double s = 0.0;
  for (std::size_t i = rows.size() - tail; i < rows.size(); ++i) s += rows[i].mass_per_step;
  return {rows.back().mass_per_step, s / static_cast<double>(tail)};
}

struct TraceTrend {
  double head_mean = 0.0;
  double tail_mean = 0.0;
  bool decreasing = false;
};

// Compares the mean distance over the first and last 10% of rows.
inline TraceTrend distance_trend(const ConvergenceTrace& trace) {
  if (trace.empty()) throw EmptyTrace("trend of an empty trace");
  const auto& rows = trace.rows();
  const std::size_t k = std::max<std::size_t>(1, rows.size() / 10);
  TraceTrend t;
  for (std::size_t i = 0; i < k; ++i) {
    t.head_mean += rows[i].distance / static_cast<double>(k);
    t.tail_mean += rows[rows.size() - 1 - i].distance / static_cast<double>(k);
  }
  t.decreasing = t.tail_mean < t.head_mean;
  return t;
}

struct LyapunovProbeReport {
  double max_margin = -std::numeric_limits<double>::infinity();
  double mP_V_over_n = 0.0;  // m_n P . V^{1/q} / n
  bool ok = true;
};

/// Drift margin max_x (Q_x.V - theta V(x) - K) over the current support of
/// m_n, plus the running value of m_n P . V^{1/q} / n.
template <class Space>
LyapunovProbeReport lyapunov_probe(const MvppState<Space>& state, const LyapunovSpec<Space>& spec) {
  const auto& k = state.kernel();
  if (!k.has_mean()) throw MeanUnavailable("Lyapunov probe needs the exact mean kernel");
  LyapunovProbeReport rep;
  const auto& m = state.m();
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m.weight(i) == 0.0) continue;
    const auto x = m.point(i);
    const double bound = spec.theta * spec.V(x) + spec.K;
    const double margin = k.mean_integral(x, spec.V) - bound;
    rep.max_margin = std::max(rep.max_margin, margin);
    if (margin > kBoundTolerance * std::max(1.0, std::abs(bound))) rep.ok = false;
  }
  const double n = std::max<double>(1.0, static_cast<double>(state.step_count()));
  rep.mP_V_over_n = state.mP().integrate([&](auto x) { return std::pow(spec.V(x), 1.0 / spec.q); }) / n;
  return rep;
}

struct SweepSummary {
  std::vector<std::uint64_t> seeds;
  std::vector<double> final_distances;
  double mean = 0.0;
  double max = 0.0;
};

// Worker count: MVPP_THREADS if set, else the hardware concurrency.
inline std::size_t sweep_threads(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MVPP_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) n = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

/// Runs `replica(index, seed)` for every seed, fanned out over worker
/// threads, and aggregates the returned final distances. The first failing
/// replica is rethrown with its seed attached.
inline SweepSummary seed_sweep(const std::vector<std::uint64_t>& seeds,
                               const std::function<double(std::size_t, std::uint64_t)>& replica) {
  if (seeds.empty()) throw InvalidParams("seed sweep needs at least one seed");
  SweepSummary out;
  out.seeds = seeds;
  out.final_distances.assign(seeds.size(), 0.0);
  std::vector<std::exception_ptr> failures(seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < seeds.size(); i = next++) {
      try {
        out.final_distances[i] = replica(i, seeds[i]);
      } catch (...) {
        failures[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = sweep_threads(seeds.size());
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (!failures[i]) continue;
    try {
      std::rethrow_exception(failures[i]);
    } catch (const Error& e) {
      throw ReplicaError(seeds[i], e.what());
    } catch (const std::exception& e) {
      throw ReplicaError(seeds[i], e.what());
    }
  }
  out.mean = std::accumulate(out.final_distances.begin(), out.final_distances.end(), 0.0) /
             static_cast<double>(seeds.size());
  out.max = *std::max_element(out.final_distances.begin(), out.final_distances.end());
  return out;
}

inline SweepSummary seed_sweep(const std::vector<std::uint64_t>& seeds,
                               const std::function<double(std::uint64_t)>& replica) {
  return seed_sweep(seeds, [&](std::size_t, std::uint64_t seed) { return replica(seed); });
}

struct ChiSquareResult {
  double statistic = 0.0;
  double dof = 0.0;
  double p_value = 1.0;
};

/// Pearson goodness-of-fit of observed counts against probabilities. Cells
/// with expected count below `min_expected` are pooled with their neighbour.
inline ChiSquareResult chi_square_gof(std::span<const double> observed, std::span<const double> probs,
                                      double min_expected = 5.0) {
  if (observed.size() != probs.size() || observed.empty())
    throw InvalidParams("observed counts and probabilities must have the same non-zero length");
  const double n = std::accumulate(observed.begin(), observed.end(), 0.0);
  std::vector<std::pair<double, double>> cells;
  double o = 0.0;
  double e = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    o += observed[i];
    e += n * probs[i];
    if (e >= min_expected) {
      cells.emplace_back(o, e);
      o = e = 0.0;
    }
  }
  if (e > 0.0 || o > 0.0) {
    if (cells.empty()) {
      cells.emplace_back(o, e);
    } else {
      cells.back().first += o;
      cells.back().second += e;
    }
  }
  ChiSquareResult r;
  for (const auto& [obs, exp] : cells) {
    if (exp <= 0.0) {
      if (obs > 0.0) return {std::numeric_limits<double>::infinity(), 0.0, 0.0};
      continue;
    }
    r.statistic += (obs - exp) * (obs - exp) / exp;
  }
  r.dof = static_cast<double>(cells.size()) - 1.0;
  if (r.dof < 1.0) return {r.statistic, 0.0, 1.0};
  r.p_value = boost::math::cdf(boost::math::complement(boost::math::chi_squared(r.dof), r.statistic));
  return r;
}

/// Two-sample chi-square homogeneity test on category counts. Sparse
/// categories are pooled until both samples expect at least `min_expected`.
inline ChiSquareResult chi_square_homogeneity(std::span<const double> a, std::span<const double> b,
                                              double min_expected = 5.0) {
  const std::size_t k = std::max(a.size(), b.size());
  const double na = std::accumulate(a.begin(), a.end(), 0.0);
  const double nb = std::accumulate(b.begin(), b.end(), 0.0);
  if (!(na > 0.0) || !(nb > 0.0)) throw InvalidParams("both samples need positive counts");
  const double n = na + nb;
  std::vector<std::pair<double, double>> cells;
  double ca = 0.0;
  double cb = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    ca += i < a.size() ? a[i] : 0.0;
    cb += i < b.size() ? b[i] : 0.0;
    const double tot = ca + cb;
    if (tot * na / n >= min_expected && tot * nb / n >= min_expected) {
      cells.emplace_back(ca, cb);
      ca = cb = 0.0;
    }
  }
  if (ca + cb > 0.0) {
    if (cells.empty()) {
      cells.emplace_back(ca, cb);
    } else {
      cells.back().first += ca;
      cells.back().second += cb;
    }
  }
  ChiSquareResult r;
  for (const auto& [x, y] : cells) {
    const double tot = x + y;
    const double ea = tot * na / n;
    const double eb = tot * nb / n;
    r.statistic += (x - ea) * (x - ea) / ea + (y - eb) * (y - eb) / eb;
  }
  r.dof = static_cast<double>(cells.size()) - 1.0;
  if (r.dof < 1.0) return {r.statistic, 0.0, 1.0};
  r.p_value = boost::math::cdf(boost::math::complement(boost::math::chi_squared(r.dof), r.statistic));
  return r;
}

}  // namespace mvpp
