#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mvpp/error.hpp"
#include "mvpp/kernels.hpp"
#include "mvpp/measure.hpp"
#include "mvpp/rng.hpp"

namespace mvpp {

template <class Space>
struct StepRecord {
  std::uint64_t n = 0;
  typename Space::point_type drawn_color{};
  double delta_mass = 0.0;  // R^{(n)}_{Y_n}(E)
  double m_mass = 0.0;
  double mP_mass = 0.0;
};

struct EngineOptions {
  // Recompute mP from m every `paranoid_interval` steps (0 disables).
  std::uint64_t paranoid_interval = 0;
};

/// State of a measure-valued Polya process: composition m_n, sampling
/// measure m_n P, occupation counts eta_n of the drawn colours.
template <class Space>
class MvppState {
 public:
  using point_ref = typename Space::point_ref;
  using point_type = typename Space::point_type;

  MvppState(WeightedMeasure<Space> m0, std::shared_ptr<const ComposedKernel<Space>> kernel, std::uint64_t seed,
            EngineOptions options = {})
      : m_(std::move(m0)),
        mP_(m_.dim(), true),
        eta_(m_.dim(), true),
        kernel_(std::move(kernel)),
        rng_(seed, 0),
        options_(options),
        delta_(m_.dim()),
        weighted_(m_.dim()),
        eta_delta_(m_.dim()) {
    if (!kernel_) throw InvalidParams("engine needs a kernel");
    if (!(m_.mass() > 0.0)) throw EmptyMeasure("initial composition has zero mass");
    for (double w : m_.weights())
      if (w < -kTenabilitySlack) throw TenabilityViolation("initial composition has a negative atom");
    mP_ = kernel_->weight().apply(m_);
    if (!(mP_.mass() > 0.0)) throw EmptyMeasure("initial sampling measure m0 P has zero mass");
    initial_mass_ = m_.mass();
  }

  const WeightedMeasure<Space>& m() const { return m_; }
  const WeightedMeasure<Space>& mP() const { return mP_; }
  const WeightedMeasure<Space>& eta() const { return eta_; }
  const ComposedKernel<Space>& kernel() const { return *kernel_; }
  std::shared_ptr<const ComposedKernel<Space>> kernel_ptr() const { return kernel_; }
  std::uint64_t step_count() const { return step_; }
  const RngStream& rng() const { return rng_; }
  double initial_mass() const { return initial_mass_; }
  // Running sum of R^{(i)}_{Y_i}(E).
  double delta_mass_sum() const { return delta_mass_sum_; }
  // min over the run of m_n P(E) / n (n >= 1).
  double min_mP_rate() const { return min_mP_rate_; }
  const point_type& last_drawn() const { return last_drawn_; }

  /// One transition: draw Y from mP, add a replacement draw at Y to m and its
  /// P-image to mP, record Y in eta. All three updates happen or none does.
  StepRecord<Space> step() {
    const std::size_t j = mP_.sample_index(rng_);
    point_type drawn = to_owned(mP_.point(j));
    const point_ref y = as_ref(drawn);

    kernel_->sample_replacement(y, rng_, delta_);
    kernel_->apply_weight(delta_, weighted_);
    eta_delta_.clear();
    eta_delta_.add(y, 1.0);

    m_.check(delta_);
    mP_.check(weighted_);
    m_.add(delta_);
    mP_.add(weighted_);
    eta_.add(eta_delta_);
    ++step_;
    last_drawn_ = std::move(drawn);

    StepRecord<Space> rec;
    rec.n = step_;
    rec.drawn_color = last_drawn_;
    rec.delta_mass = delta_.mass();
    rec.m_mass = m_.mass();
    rec.mP_mass = mP_.mass();
    delta_mass_sum_ += rec.delta_mass;
    min_mP_rate_ = std::min(min_mP_rate_, rec.mP_mass / static_cast<double>(step_));

    if (options_.paranoid_interval > 0 && step_ % options_.paranoid_interval == 0) verify_mP();
    return rec;
  }

  // Recomputes m P from scratch and compares atomwise (1e-9 relative).
  void verify_mP() const {
    const WeightedMeasure<Space> fresh = kernel_->weight().apply(m_);
    const double scale = std::max(1.0, fresh.mass());
    if constexpr (Space::aggregates) {
      for (std::size_t i = 0; i < mP_.size(); ++i) {
        const double want = fresh.weight_at(mP_.point(i));
        if (std::abs(mP_.weight(i) - want) > 1e-9 * std::max(scale, std::abs(want)))
          throw InvariantViolation("incremental mP differs from recomputation at colour " +
                                   std::to_string(mP_.point(i)));
      }
    } else {
      if (fresh.size() != mP_.size()) throw InvariantViolation("incremental mP has the wrong number of atoms");
      for (std::size_t i = 0; i < mP_.size(); ++i)
        if (std::abs(mP_.weight(i) - fresh.weight(i)) > 1e-9 * scale)
          throw InvariantViolation("incremental mP differs from recomputation at atom " + std::to_string(i));
    }
    if (std::abs(mP_.mass() - fresh.mass()) > 1e-9 * scale)
      throw InvariantViolation("incremental mP mass differs from recomputation");
  }

 private:
  static point_ref as_ref(const point_type& x) {
    if constexpr (Space::aggregates)
      return x;
    else
      return std::span<const double>(x);
  }

  WeightedMeasure<Space> m_;
  WeightedMeasure<Space> mP_;
  WeightedMeasure<Space> eta_;
  std::shared_ptr<const ComposedKernel<Space>> kernel_;
  RngStream rng_;
  EngineOptions options_;
  std::uint64_t step_ = 0;
  double initial_mass_ = 0.0;
  double delta_mass_sum_ = 0.0;
  double min_mP_rate_ = std::numeric_limits<double>::infinity();
  point_type last_drawn_{};
  SignedDelta<Space> delta_;
  SignedDelta<Space> weighted_;
  SignedDelta<Space> eta_delta_;
};

template <class Space>
MvppState<Space> init(WeightedMeasure<Space> m0, ComposedKernel<Space> kernel, std::uint64_t seed,
                      EngineOptions options = {}) {
  return MvppState<Space>(std::move(m0), std::make_shared<const ComposedKernel<Space>>(std::move(kernel)), seed,
                          options);
}

/// Pulls a row of named values from the state every `stride` steps.
template <class Space>
struct Observer {
  std::uint64_t stride = 1;
  std::vector<std::string> columns;
  std::function<void(const MvppState<Space>&, std::vector<double>&)> observe;
};

template <class Space>
struct TraceRow {
  StepRecord<Space> record;
  std::vector<double> values;
};

template <class Space>
struct ObserverTrace {
  std::vector<std::string> columns;
  std::vector<TraceRow<Space>> rows;
};

/// Applies `n_steps` transitions; observer k fires after every step whose
/// index is a multiple of its stride. Errors carry the failing step index.
template <class Space>
std::vector<ObserverTrace<Space>> run(MvppState<Space>& state, std::uint64_t n_steps,
                                      std::span<const Observer<Space>> observers = {}) {
  std::vector<ObserverTrace<Space>> traces(observers.size());
  for (std::size_t k = 0; k < observers.size(); ++k) {
    if (observers[k].stride == 0) throw InvalidParams("observer stride must be >= 1");
    traces[k].columns = observers[k].columns;
  }
  for (std::uint64_t i = 0; i < n_steps; ++i) {
    StepRecord<Space> rec;
    try {
      rec = state.step();
    } catch (Error& e) {
      e.attach_step(state.step_count() + 1);
      throw;
    }
    for (std::size_t k = 0; k < observers.size(); ++k) {
      if (rec.n % observers[k].stride != 0) continue;
      TraceRow<Space> row{rec, {}};
      if (observers[k].observe) observers[k].observe(state, row.values);
      traces[k].rows.push_back(std::move(row));
    }
  }
  return traces;
}

template <class Space>
struct NormalizedViews {
  WeightedMeasure<Space> m_over_n;
  WeightedMeasure<Space> m_tilde;
  WeightedMeasure<Space> eta_tilde;
};

template <class Space>
NormalizedViews<Space> normalized_views(const MvppState<Space>& s) {
  if (s.step_count() == 0) throw EmptyMeasure("normalized views need at least one step");
  WeightedMeasure<Space> m_over_n = s.m();
  m_over_n.scale(1.0 / static_cast<double>(s.step_count()));
  return {std::move(m_over_n), s.m().normalized(), s.eta().normalized()};
}

/// Terms of the stochastic-approximation decomposition
/// eta~_{n+1} - eta~_n = gamma_{n+1} (F(eta~_n) + U_{n+1}) tested against f.
struct SaDiagnostic {
  double gamma = 0.0;
  double F_dot_f = 0.0;
  double U_dot_f = 0.0;
  double increment = 0.0;  // (eta~_{n+1} - eta~_n).f computed directly
  double residual = 0.0;   // increment - gamma (F.f + U.f)
};

template <class Space, class F>
SaDiagnostic sa_diagnostic(const MvppState<Space>& before, const MvppState<Space>& after, F&& f) {
  const auto& k = before.kernel();
  if (!k.has_mean()) throw MeanUnavailable("SA diagnostic needs the exact mean kernel");
  const std::uint64_t n = before.step_count();
  if (n < 1) throw InvalidParams("SA diagnostic needs at least one step before");
  if (after.step_count() != n + 1) throw InvalidParams("states must be consecutive");

  const auto& eta = before.eta();
  double etaQ_f = 0.0;
  double etaQ_mass = 0.0;
  double eta_f = 0.0;
  SignedDelta<Space> q;
  // sums over the raw counts, divided by n once
  for (std::size_t i = 0; i < eta.size(); ++i) {
    const double w = eta.weight(i);
    if (w == 0.0) continue;
    k.mean(eta.point(i), q);
    for (std::size_t a = 0; a < q.size(); ++a) {
      etaQ_f += w * q.weight(a) * f(q.point(a));
      etaQ_mass += w * q.weight(a);
    }
    eta_f += w * f(eta.point(i));
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  etaQ_f *= inv_n;
  etaQ_mass *= inv_n;
  eta_f = eta_f / static_cast<double>(n);
  const auto& y = after.last_drawn();
  double f_y;
  if constexpr (Space::aggregates)
    f_y = f(y);
  else
    f_y = f(std::span<const double>(y));

  SaDiagnostic d;
  d.gamma = 1.0 / (static_cast<double>(n + 1) * etaQ_mass);
  d.F_dot_f = etaQ_f - etaQ_mass * eta_f;
  d.U_dot_f = etaQ_mass * f_y - etaQ_f;
  const double eta_next_f = after.eta().integrate(f) / static_cast<double>(n + 1);
  d.increment = eta_next_f - eta_f;
  d.residual = d.increment - d.gamma * (d.F_dot_f + d.U_dot_f);
  return d;
}

}  // namespace mvpp
