#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mvpp/error.hpp"
#include "mvpp/measure.hpp"
#include "mvpp/rng.hpp"

namespace mvpp {

// Tolerance on every mass-bound and Lyapunov check.
inline constexpr double kBoundTolerance = 1e-9;

/// Random replacement kernel R^{(i)} together with its mean R.
///
/// Both procedures append to `out`; callers clear it first. `mean` is empty
/// when no finite-support representation of R_x is available (continuous
/// sample-path kernels).
template <class Space>
struct ReplacementKernel {
  using point_ref = typename Space::point_ref;
  using Sampler = std::function<void(point_ref, RngStream&, SignedDelta<Space>&)>;
  using Mean = std::function<void(point_ref, SignedDelta<Space>&)>;

  Sampler sampler;
  Mean mean;
  bool is_deterministic = false;
  bool is_signed = false;

  bool has_mean() const { return static_cast<bool>(mean); }

  // A kernel whose every draw equals its mean.
  static ReplacementKernel deterministic(Mean mean_fn, bool is_signed = false) {
    ReplacementKernel k;
    k.sampler = [mean_fn](point_ref x, RngStream&, SignedDelta<Space>& out) { mean_fn(x, out); };
    k.mean = std::move(mean_fn);
    k.is_deterministic = true;
    k.is_signed = is_signed;
    return k;
  }
};

/// Weight kernel of the form P_x = w(x) delta_x; an empty weight function is
/// the identity P_x = delta_x.
template <class Space>
struct WeightKernel {
  using point_ref = typename Space::point_ref;

  std::function<double(point_ref)> weight;

  static WeightKernel identity() { return {}; }
  static WeightKernel scalar(std::function<double(point_ref)> w) { return {std::move(w)}; }

  bool is_identity() const { return !weight; }
  double operator()(point_ref x) const { return weight ? weight(x) : 1.0; }

  // out = dP (out is overwritten).
  void apply(const SignedDelta<Space>& d, SignedDelta<Space>& out) const {
    out.clear();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double w = (*this)(d.point(i));
      if (!(w >= 0.0)) throw InvalidParams("weight kernel returned a negative or NaN weight");
      out.add(d.point(i), w * d.weight(i));
    }
  }

  // Image of a whole measure, m -> mP.
  WeightedMeasure<Space> apply(const WeightedMeasure<Space>& m) const {
    SignedDelta<Space> d(m.dim());
    for (std::size_t i = 0; i < m.size(); ++i) d.add(m.point(i), (*this)(m.point(i)) * m.weight(i));
    WeightedMeasure<Space> out(m.dim(), m.nonnegative());
    out.add(d);
    return out;
  }
};

// Bounds c_1 <= Q_x(E) <= kappa announced for a kernel.
struct MassBounds {
  double c1 = 0.0;
  double kappa = 1.0;
};

/// Q^{(i)} = R^{(i)} P and Q = R P, with an overall scale (rescaling divides
/// every replacement draw by kappa).
template <class Space>
class ComposedKernel {
 public:
  using point_ref = typename Space::point_ref;

  ComposedKernel(ReplacementKernel<Space> r, WeightKernel<Space> p, MassBounds bounds = {})
      : r_(std::move(r)), p_(std::move(p)), bounds_(bounds) {}

  const ReplacementKernel<Space>& replacement() const { return r_; }
  const WeightKernel<Space>& weight() const { return p_; }
  double scale() const { return scale_; }
  MassBounds mass_bounds() const { return bounds_; }
  bool has_mean() const { return r_.has_mean(); }

  // One draw of the (scaled) replacement measure R^{(i)}_x.
  void sample_replacement(point_ref x, RngStream& rng, SignedDelta<Space>& out) const {
    out.clear();
    r_.sampler(x, rng, out);
    if (scale_ != 1.0) out.scale(scale_);
  }

  void replacement_mean(point_ref x, SignedDelta<Space>& out) const {
    if (!r_.has_mean()) throw MeanUnavailable("replacement kernel has no exact mean");
    out.clear();
    r_.mean(x, out);
    if (scale_ != 1.0) out.scale(scale_);
  }

  void apply_weight(const SignedDelta<Space>& d, SignedDelta<Space>& out) const { p_.apply(d, out); }

  // One draw of Q^{(i)}_x.
  void sample(point_ref x, RngStream& rng, SignedDelta<Space>& out) const {
    SignedDelta<Space> r(out.dim());
    sample_replacement(x, rng, r);
    p_.apply(r, out);
  }

  // Q_x.
  void mean(point_ref x, SignedDelta<Space>& out) const {
    SignedDelta<Space> r(out.dim());
    replacement_mean(x, r);
    p_.apply(r, out);
  }

  double mean_mass(point_ref x) const {
    SignedDelta<Space> q;
    mean(x, q);
    return q.mass();
  }

  template <class F>
  double mean_integral(point_ref x, F&& f) const {
    SignedDelta<Space> q;
    mean(x, q);
    double s = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) s += q.weight(i) * f(q.point(i));
    return s;
  }

  ComposedKernel rescaled(double kappa) const {
    if (!(kappa > 0.0)) throw InvalidParams("rescaling constant must be > 0");
    ComposedKernel out = *this;
    out.scale_ = scale_ / kappa;
    out.bounds_.c1 = bounds_.c1 / kappa;
    out.bounds_.kappa = bounds_.kappa / kappa;
    return out;
  }

  void set_mass_bounds(MassBounds b) { bounds_ = b; }

 private:
  ReplacementKernel<Space> r_;
  WeightKernel<Space> p_;
  MassBounds bounds_;
  double scale_ = 1.0;
};

template <class Space>
ComposedKernel<Space> compose(ReplacementKernel<Space> r, WeightKernel<Space> p, MassBounds bounds = {}) {
  return ComposedKernel<Space>(std::move(r), std::move(p), bounds);
}

template <class Space>
ComposedKernel<Space> rescale(const ComposedKernel<Space>& k, double kappa) {
  return k.rescaled(kappa);
}

/// Lyapunov data (V, theta, K, c_1, q) of the drift condition
/// Q_x . V <= theta V(x) + K. The moment exponents r, p and constant A of the
/// moment condition are kept as metadata only.
template <class Space>
struct LyapunovSpec {
  std::function<double(typename Space::point_ref)> V;
  double theta = 0.5;
  double K = 0.0;
  double c1 = 1.0;
  double q = 2.0;
  std::optional<double> moment_r;
  std::optional<double> moment_p;
  std::optional<double> moment_A;
};

struct MassBoundsReport {
  double min_mass = std::numeric_limits<double>::infinity();
  double max_mass = -std::numeric_limits<double>::infinity();
  bool ok = true;
};

// Spot-check of c_1 <= Q_x(E) <= kappa on a finite probe set.
template <class Space>
MassBoundsReport check_mass_bounds(const ComposedKernel<Space>& k,
                                   std::span<const typename Space::point_type> probe) {
  if (!k.has_mean()) throw MeanUnavailable("mass bounds need the exact mean kernel");
  MassBoundsReport rep;
  const MassBounds b = k.mass_bounds();
  for (const auto& x : probe) {
    const double mass = k.mean_mass(x);
    rep.min_mass = std::min(rep.min_mass, mass);
    rep.max_mass = std::max(rep.max_mass, mass);
    if (mass < b.c1 - kBoundTolerance || mass > b.kappa * (1.0 + kBoundTolerance)) rep.ok = false;
  }
  return rep;
}

struct LyapunovReport {
  // max_x (Q_x.V - theta V(x) - K)
  double max_margin = -std::numeric_limits<double>::infinity();
  // the same margin divided by max(1, theta V(x) + K)
  double max_relative_margin = -std::numeric_limits<double>::infinity();
  bool ok = true;
};

// Spot-check of the drift condition. The 1e-9 tolerance is applied relative to
// max(1, theta V(x) + K) since V is typically exponential in x.
template <class Space>
LyapunovReport check_lyapunov(const ComposedKernel<Space>& k, const LyapunovSpec<Space>& spec,
                              std::span<const typename Space::point_type> probe) {
  if (!k.has_mean()) throw MeanUnavailable("Lyapunov check needs the exact mean kernel");
  if (!(spec.theta > 0.0 && spec.theta < spec.c1))
    throw InvalidParams("theta must lie in (0, c1)");
  LyapunovReport rep;
  for (const auto& x : probe) {
    const double vx = spec.V(x);
    if (!(vx >= 1.0) || !std::isfinite(vx)) throw InvalidParams("V must be finite and >= 1 on the probe");
    const double qv = k.mean_integral(x, spec.V);
    const double bound = spec.theta * vx + spec.K;
    const double margin = qv - bound;
    const double rel = margin / std::max(1.0, std::abs(bound));
    rep.max_margin = std::max(rep.max_margin, margin);
    rep.max_relative_margin = std::max(rep.max_relative_margin, rel);
    if (rel > kBoundTolerance) rep.ok = false;
  }
  return rep;
}

}  // namespace mvpp
