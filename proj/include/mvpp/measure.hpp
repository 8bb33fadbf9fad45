#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mvpp/error.hpp"
#include "mvpp/fenwick.hpp"
#include "mvpp/io.hpp"
#include "mvpp/rng.hpp"
#include "mvpp/space.hpp"

namespace mvpp {

// Slack below zero tolerated on non-negative measures (float cancellation).
inline constexpr double kTenabilitySlack = 1e-12;
// Incremental updates between two full rebuilds of the sampler.
inline constexpr std::uint64_t kRebuildInterval = std::uint64_t{1} << 20;

/// A finite signed combination of Dirac masses: one realisation of a
/// replacement measure, or its image under a weight kernel.
template <class Space>
class SignedDelta {
 public:
  using point_ref = typename Space::point_ref;

  explicit SignedDelta(std::size_t dim = Space::aggregates ? 1 : 0) : points_(dim) {}

  SignedDelta(std::initializer_list<std::pair<typename Space::point_type, double>> entries)
    requires Space::aggregates
  {
    for (const auto& [x, w] : entries) add(x, w);
  }

  void add(point_ref x, double w) {
    points_.push_back(x);
    weights_.push_back(w);
  }

  void clear() {
    points_.clear();
    weights_.clear();
  }

  std::size_t size() const { return weights_.size(); }
  bool empty() const { return weights_.empty(); }
  std::size_t dim() const { return points_.dim(); }
  point_ref point(std::size_t i) const { return points_[i]; }
  double weight(std::size_t i) const { return weights_[i]; }
  std::span<const double> weights() const { return weights_; }

  double mass() const {
    double s = 0.0;
    for (double w : weights_) s += w;
    return s;
  }

  void scale(double c) {
    for (double& w : weights_) w *= c;
  }

  void reserve(std::size_t n) {
    points_.reserve(n);
    weights_.reserve(n);
  }

 private:
  PointStore<Space> points_;
  std::vector<double> weights_;
};

/// Atomic measure on a discrete or euclidean colour space.
///
/// Discrete atoms are aggregated by key; euclidean atoms are appended one per
/// inserted entry and never merged. A binary indexed tree over the dense atom
/// array is built on the first draw and maintained incrementally afterwards,
/// giving O(log N) sampling under growing support and signed updates.
///
/// Measures flagged non-negative refuse any update that would leave an atom
/// below -1e-12 and throw TenabilityViolation without modifying the measure.
template <class Space>
class WeightedMeasure {
 public:
  using point_ref = typename Space::point_ref;
  using point_type = typename Space::point_type;

  explicit WeightedMeasure(bool nonnegative = true)
    requires Space::aggregates
      : nonnegative_(nonnegative) {}

  explicit WeightedMeasure(std::size_t dim, bool nonnegative = true)
      : points_(dim), nonnegative_(nonnegative) {}

  WeightedMeasure(std::initializer_list<std::pair<point_type, double>> atoms, bool nonnegative = true)
    requires Space::aggregates
      : nonnegative_(nonnegative) {
    SignedDelta<Space> d;
    for (const auto& [x, w] : atoms) d.add(x, w);
    add(d);
  }

  std::size_t size() const { return weights_.size(); }
  bool empty() const { return weights_.empty(); }
  std::size_t dim() const { return points_.dim(); }
  bool nonnegative() const { return nonnegative_; }
  double mass() const { return total_mass_; }

  point_ref point(std::size_t i) const { return points_[i]; }
  double weight(std::size_t i) const { return weights_[i]; }
  std::span<const double> weights() const { return weights_; }
  const PointStore<Space>& points() const { return points_; }

  // Weight at a discrete key (0 if the key has no atom).
  double weight_at(std::int64_t key) const
    requires Space::aggregates
  {
    const auto it = slot_.find(key);
    return it == slot_.end() ? 0.0 : weights_[it->second];
  }

  /// m <- m + d, atomically.
  void add(const SignedDelta<Space>& d) {
    if constexpr (Space::aggregates) {
      coalesce(d);
      check_coalesced();
      for (const auto& [key, net] : scratch_) apply_at_key(key, net);
    } else {
      check_appended(d);
      for (std::size_t i = 0; i < d.size(); ++i) append(d.point(i), d.weight(i));
    }
    maybe_rebuild();
  }

  // Throws exactly when add(d) would throw; never modifies the measure.
  void check(const SignedDelta<Space>& d) const {
    if constexpr (Space::aggregates) {
      coalesce(d);
      check_coalesced();
    } else {
      check_appended(d);
    }
  }

  std::size_t sample_index(RngStream& rng) const {
    if (!(total_mass_ > 0.0) || weights_.empty())
      throw EmptyMeasure("cannot sample from a measure of mass " + format_double(total_mass_));
    if (!indexed_) build_index();
    const double total = tree_.total();
    if (!(total > 0.0)) throw EmptyMeasure("sampler total is not positive");
    std::size_t j = tree_.search(rng.uniform() * total);
    if (j >= weights_.size()) j = weights_.size() - 1;
    while (j > 0 && !(weights_[j] > 0.0)) --j;
    return j;
  }

  point_ref sample(RngStream& rng) const { return points_[sample_index(rng)]; }

  template <class F>
  double integrate(F&& f) const {
    double s = 0.0;
    for (std::size_t i = 0; i < weights_.size(); ++i) s += weights_[i] * f(points_[i]);
    return s;
  }

  WeightedMeasure normalized() const {
    if (!(total_mass_ > 0.0))
      throw EmptyMeasure("cannot normalise a measure of mass " + format_double(total_mass_));
    WeightedMeasure out = *this;
    for (double& w : out.weights_) w /= total_mass_;
    out.total_mass_ = 1.0;
    out.tree_.clear();
    out.indexed_ = false;
    return out;
  }

  // Multiplies every weight by c > 0.
  void scale(double c) {
    for (double& w : weights_) w *= c;
    total_mass_ *= c;
    if (indexed_) tree_.assign(weights_);
  }

  /// Recomputes the cumulative structure and the cached mass from the atoms.
  void rebuild_sampler() {
    total_mass_ = exact_sum(weights_);
    if (indexed_) tree_.assign(weights_);
    updates_since_rebuild_ = 0;
  }

  bool sampler_built() const { return indexed_; }
  double sampler_total() const { return indexed_ ? tree_.total() : 0.0; }
  std::uint64_t updates_since_rebuild() const { return updates_since_rebuild_; }

  // Neumaier-compensated sum of the atom weights.
  double exact_mass() const { return exact_sum(weights_); }

  static double exact_sum(std::span<const double> xs) {
    double sum = 0.0;
    double comp = 0.0;
    for (double x : xs) {
      const double t = sum + x;
      comp += std::abs(sum) >= std::abs(x) ? (sum - t) + x : (x - t) + sum;
      sum = t;
    }
    return sum + comp;
  }

 private:
  void coalesce(const SignedDelta<Space>& d) const
    requires Space::aggregates
  {
    scratch_.clear();
    for (std::size_t i = 0; i < d.size(); ++i) {
      PointStore<Space>::validate(d.point(i));
      if (!std::isfinite(d.weight(i))) throw InvalidParams("delta weight is not finite");
      scratch_.emplace_back(d.point(i), d.weight(i));
    }
    std::stable_sort(scratch_.begin(), scratch_.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::size_t out = 0;
    for (std::size_t i = 0; i < scratch_.size(); ++i) {
      if (out > 0 && scratch_[out - 1].first == scratch_[i].first)
        scratch_[out - 1].second += scratch_[i].second;
      else
        scratch_[out++] = scratch_[i];
    }
    scratch_.resize(out);
  }

  void check_coalesced() const
    requires Space::aggregates
  {
    if (!nonnegative_) return;
    for (const auto& [key, net] : scratch_) {
      const double after = weight_at(key) + net;
      if (after < -kTenabilitySlack)
        throw TenabilityViolation("atom " + std::to_string(key) + " would reach weight " + format_double(after));
    }
  }

  void check_appended(const SignedDelta<Space>& d) const {
    for (std::size_t i = 0; i < d.size(); ++i) {
      PointStore<Space>::validate(d.point(i));
      if (!std::isfinite(d.weight(i))) throw InvalidParams("delta weight is not finite");
      if (d.dim() != points_.dim() && points_.dim() != 0)
        throw InvalidPoint("delta dimension " + std::to_string(d.dim()) + " does not match measure dimension " +
                           std::to_string(points_.dim()));
      if (nonnegative_ && d.weight(i) < -kTenabilitySlack)
        throw TenabilityViolation("appending an atom of weight " + format_double(d.weight(i)));
    }
  }

  void apply_at_key(std::int64_t key, double net)
    requires Space::aggregates
  {
    const auto [it, inserted] = slot_.try_emplace(key, weights_.size());
    if (inserted) {
      append(key, net);
      return;
    }
    double& w = weights_[it->second];
    const double before = w;
    double after = before + net;
    // Cancellation noise such as 1/3 + 1/3 + 1/3 - 1 is snapped to zero.
    if (std::abs(after) <= 1e-12 * (std::abs(before) + std::abs(net))) after = 0.0;
    w = after;
    total_mass_ += after - before;
    if (indexed_) tree_.add(it->second, after - before);
    ++updates_since_rebuild_;
  }

  void append(point_ref x, double w) {
    points_.push_back(x);
    weights_.push_back(w);
    total_mass_ += w;
    if (indexed_) tree_.push_back(w);
    ++updates_since_rebuild_;
  }

  void maybe_rebuild() {
    if (updates_since_rebuild_ >= kRebuildInterval) rebuild_sampler();
  }

  void build_index() const {
    for (double w : weights_)
      if (w < -kTenabilitySlack)
        throw TenabilityViolation("cannot sample from a measure with a negative atom " + format_double(w));
    tree_.assign(weights_);
    indexed_ = true;
  }

  PointStore<Space> points_;
  std::vector<double> weights_;
  std::unordered_map<std::int64_t, std::size_t> slot_;
  bool nonnegative_ = true;
  double total_mass_ = 0.0;
  std::uint64_t updates_since_rebuild_ = 0;
  mutable FenwickTree tree_;
  mutable bool indexed_ = false;
  mutable std::vector<std::pair<std::int64_t, double>> scratch_;
};

using DiscreteMeasure = WeightedMeasure<Discrete>;
using EuclideanMeasure = WeightedMeasure<Euclidean>;
using DiscreteDelta = SignedDelta<Discrete>;
using EuclideanDelta = SignedDelta<Euclidean>;

template <class Space, class F>
double integrate(const WeightedMeasure<Space>& m, F&& f) {
  return m.integrate(std::forward<F>(f));
}

template <class Space>
WeightedMeasure<Space> normalize(const WeightedMeasure<Space>& m) {
  return m.normalized();
}

// {"space":..., "dim":d, "atoms":[[point,weight],...], "mass":m}; discrete
// points are integers, euclidean points are coordinate arrays.
template <class Space>
std::string to_json(const WeightedMeasure<Space>& m) {
  std::string out = "{\"space\":\"";
  out += Space::name;
  out += "\",\"dim\":" + std::to_string(m.dim()) + ",\"atoms\":[";
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (i > 0) out += ',';
    out += '[';
    if constexpr (Space::aggregates) {
      out += std::to_string(m.point(i));
    } else {
      out += '[';
      const auto x = m.point(i);
      for (std::size_t k = 0; k < x.size(); ++k) {
        if (k > 0) out += ',';
        out += format_double(x[k]);
      }
      out += ']';
    }
    out += ',' + format_double(m.weight(i)) + ']';
  }
  out += "],\"mass\":" + format_double(m.mass()) + '}';
  return out;
}

}  // namespace mvpp
