#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "mvpp/diagnostics.hpp"
#include "mvpp/engine.hpp"
#include "mvpp/error.hpp"
#include "mvpp/io.hpp"
#include "mvpp/measure.hpp"
#include "mvpp/models.hpp"
#include "mvpp/qsd.hpp"

namespace mvpp {

using json = nlohmann::json;

enum class Mode { run, sweep, accept, qsd_oracle };

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitModelError = 2;
inline constexpr int kExitToleranceFailure = 3;
inline constexpr int kExitIoError = 4;

/// A named statistic that must stay within `tolerance` of `target` for
/// every seed.
struct StatCheck {
  std::string stat;
  double target = 0.0;
  double tolerance = 0.0;
};

struct ExperimentConfig {
  std::string name;
  std::string model;
  json params = json::object();
  std::uint64_t n_steps = 0;
  std::uint64_t seed = 0;
  std::uint64_t observe_stride = 1;
  std::optional<std::string> reference;
  std::string output_dir = ".";
  Mode mode = Mode::run;
  std::vector<std::uint64_t> seeds;
  std::optional<double> tolerance;
  std::vector<StatCheck> checks;
  bool paranoid = false;
};

inline const std::vector<std::string>& known_models() {
  static const std::vector<std::string> names{
      "finite_urn",  "finite_signed_urn", "mm_infty",         "bd_quasi_ergodic", "rrt",
      "rrf",         "protected_nodes",   "sample_path",      "killed_diffusion", "self_interacting"};
  return names;
}

namespace detail {

inline std::size_t line_of(const std::string& text, std::size_t byte) {
  std::size_t line = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i)
    if (text[i] == '\n') ++line;
  return line;
}

inline std::uint64_t get_count(const json& j, const std::string& field) {
  const auto& v = j.at(field);
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer()) {
    if (v.get<std::int64_t>() < 0) throw InvalidParams("field '" + field + "' must be >= 0");
    return static_cast<std::uint64_t>(v.get<std::int64_t>());
  }
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (d >= 0.0 && d == std::floor(d) && d < 1.8e19) return static_cast<std::uint64_t>(d);
    throw InvalidParams("field '" + field + "' must be a non-negative integer");
  }
  throw ParseError(field, "expected a non-negative integer");
}

inline Mode parse_mode(const std::string& s) {
  if (s == "run") return Mode::run;
  if (s == "sweep") return Mode::sweep;
  if (s == "accept") return Mode::accept;
  if (s == "qsd-oracle") return Mode::qsd_oracle;
  throw ParseError("mode", "unknown mode '" + s + "'");
}

}  // namespace detail

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::run: return "run";
    case Mode::sweep: return "sweep";
    case Mode::accept: return "accept";
    case Mode::qsd_oracle: return "qsd-oracle";
  }
  return "run";
}

/// Validates a parsed config document and fills the defaults
/// (observe_stride = max(1, n_steps/1000), seed = 0).
inline ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("", "config must be a JSON object");
  ExperimentConfig cfg;
  if (!j.contains("model")) throw ParseError("model", "missing required field");
  if (!j.at("model").is_string()) throw ParseError("model", "expected a string");
  cfg.model = j.at("model").get<std::string>();
  const auto& names = known_models();
  if (std::find(names.begin(), names.end(), cfg.model) == names.end())
    throw UnknownModel("no model named '" + cfg.model + "'");
  cfg.name = j.value("name", cfg.model);
  if (!j.contains("n_steps")) throw ParseError("n_steps", "missing required field");
  cfg.n_steps = detail::get_count(j, "n_steps");
  if (j.contains("seed")) cfg.seed = detail::get_count(j, "seed");
  cfg.observe_stride = std::max<std::uint64_t>(1, cfg.n_steps / 1000);
  if (j.contains("observe_stride")) {
    cfg.observe_stride = detail::get_count(j, "observe_stride");
    if (cfg.observe_stride < 1) throw InvalidParams("field 'observe_stride' must be >= 1");
  }
  if (j.contains("params")) {
    if (!j.at("params").is_object()) throw ParseError("params", "expected an object");
    cfg.params = j.at("params");
  }
  if (j.contains("reference")) {
    if (!j.at("reference").is_string()) throw ParseError("reference", "expected a string");
    cfg.reference = j.at("reference").get<std::string>();
  }
  if (j.contains("output_dir")) {
    if (!j.at("output_dir").is_string()) throw ParseError("output_dir", "expected a string");
    cfg.output_dir = j.at("output_dir").get<std::string>();
  }
  if (j.contains("mode")) {
    if (!j.at("mode").is_string()) throw ParseError("mode", "expected a string");
    cfg.mode = detail::parse_mode(j.at("mode").get<std::string>());
  }
  if (j.contains("seeds")) {
    if (!j.at("seeds").is_array()) throw ParseError("seeds", "expected an array of integers");
    for (std::size_t i = 0; i < j.at("seeds").size(); ++i) {
      const json wrapper{{"seeds", j.at("seeds")[i]}};
      cfg.seeds.push_back(detail::get_count(wrapper, "seeds"));
    }
  }
  if (j.contains("tolerance")) {
    if (!j.at("tolerance").is_number()) throw ParseError("tolerance", "expected a number");
    cfg.tolerance = j.at("tolerance").get<double>();
    if (!(*cfg.tolerance > 0.0)) throw InvalidParams("field 'tolerance' must be > 0");
  }
  if (j.contains("checks")) {
    if (!j.at("checks").is_array()) throw ParseError("checks", "expected an array");
    for (const auto& c : j.at("checks")) {
      if (!c.is_object() || !c.contains("stat") || !c.contains("target") || !c.contains("tolerance"))
        throw ParseError("checks", "each check needs stat, target and tolerance");
      cfg.checks.push_back({c.at("stat").get<std::string>(), c.at("target").get<double>(),
                            c.at("tolerance").get<double>()});
    }
  }
  if (j.contains("paranoid")) cfg.paranoid = j.at("paranoid").get<bool>();
  return cfg;
}

/// Parses a JSON config document. Syntax errors carry the line number.
inline ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("", e.what(), detail::line_of(text, e.byte == 0 ? 0 : e.byte - 1));
  }
  try {
    return config_from_json(j);
  } catch (const json::type_error& e) {
    throw ParseError("", e.what());
  }
}

/// Outcome of one replica: serialised trace and final measure, the final
/// distance to the reference (NaN without one) and named statistics.
struct ReplicaResult {
  std::string trace_csv;
  std::string final_measure_json;
  double final_distance = std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, double> stats;
  std::vector<std::string> warnings;
};

namespace detail {

inline double num(const json& p, const std::string& key, double fallback) {
  if (!p.contains(key)) return fallback;
  if (!p.at(key).is_number()) throw InvalidParams("parameter '" + key + "' must be a number");
  return p.at(key).get<double>();
}

inline DenseMatrix matrix_param(const json& p, const std::string& key) {
  if (!p.contains(key)) throw InvalidParams("parameter '" + key + "' is required");
  const auto& rows = p.at(key);
  if (!rows.is_array() || rows.empty()) throw InvalidParams("parameter '" + key + "' must be a non-empty matrix");
  DenseMatrix m(rows.size(), rows.at(0).size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i].is_array() || rows[i].size() != m.cols())
      throw InvalidParams("parameter '" + key + "' has a ragged row " + std::to_string(i));
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = rows[i][j].get<double>();
  }
  return m;
}

inline DenseMatrix chain_matrix(const json& p) {
  return p.contains("matrix") ? matrix_param(p, "matrix") : three_state_chain();
}

inline std::vector<double> vector_param(const json& p, const std::string& key) {
  if (!p.contains(key)) return {};
  if (!p.at(key).is_array()) throw InvalidParams("parameter '" + key + "' must be an array");
  return p.at(key).get<std::vector<double>>();
}

// {"-1": 0.3, "1": 0.7} or [[-1, 0.3], [1, 0.7]].
inline IntegerLaw law_param(const json& p, const std::string& key, IntegerLaw fallback) {
  if (!p.contains(key)) return fallback;
  IntegerLaw law;
  const auto& v = p.at(key);
  if (v.is_object()) {
    for (auto it = v.begin(); it != v.end(); ++it) law.emplace_back(std::stoll(it.key()), it.value().get<double>());
  } else if (v.is_array()) {
    for (const auto& e : v) law.emplace_back(e.at(0).get<std::int64_t>(), e.at(1).get<double>());
  } else {
    throw InvalidParams("parameter '" + key + "' must be an object or a list of pairs");
  }
  std::sort(law.begin(), law.end());
  return law;
}

inline HorizonLaw horizon_param(const json& p) {
  if (!p.contains("horizon")) return HorizonLaw::infinite();
  const auto& h = p.at("horizon");
  const std::string kind = h.is_string() ? h.get<std::string>() : h.value("kind", std::string("infinite"));
  const double value = h.is_object() ? h.value("value", 0.0) : 0.0;
  if (kind == "infinite") return HorizonLaw::infinite();
  if (kind == "fixed") return HorizonLaw::fixed(value);
  if (kind == "geometric") return HorizonLaw::geometric(value);
  if (kind == "exponential") return HorizonLaw::exponential(value);
  throw InvalidParams("unknown horizon kind '" + kind + "'");
}

inline KilledDiffusionSpec diffusion_param(const json& p, double default_dt) {
  const auto dim = static_cast<std::size_t>(num(p, "dim", 1));
  auto spec = KilledDiffusionSpec::ornstein_uhlenbeck(dim, num(p, "drift_rate", 2.0), num(p, "kappa", 1.0),
                                                      num(p, "dt", default_dt));
  spec.horizon = horizon_param(p);
  spec.trapezoid = p.value("trapezoid", false);
  return spec;
}

inline std::string color_string(std::int64_t x) { return std::to_string(x); }

inline std::string color_string(const std::vector<double>& x) {
  std::string s;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (i > 0) s += ';';
    s += format_double(x[i]);
  }
  return s;
}

inline ReferenceDistribution pmf_reference(const DiscreteMeasure& limit, const std::string& key) {
  ReferenceDistribution ref;
  ref.kind = ReferenceDistribution::Kind::eigen;
  ref.key = key;
  std::int64_t top = 0;
  for (std::size_t i = 0; i < limit.size(); ++i) top = std::max(top, limit.point(i));
  ref.pmf_values.assign(static_cast<std::size_t>(top) + 1, 0.0);
  for (std::size_t i = 0; i < limit.size(); ++i)
    ref.pmf_values[static_cast<std::size_t>(limit.point(i))] += limit.weight(i) / limit.mass();
  return ref;
}

// Law approached by m~_n for a discrete model: nu when the model says so,
// normalize(nu R) otherwise.
inline ReferenceDistribution limit_of(const ReferenceDistribution& nu, const ModelSpec<Discrete>& spec,
                                      std::size_t cap) {
  if (spec.limit == LimitKind::nu) return nu;
  auto ref = pmf_reference(nu_R(nu, spec.kernel, cap), nu.key + "_R");
  ref.eigenvalue = nu.eigenvalue;
  ref.warnings = nu.warnings;
  return ref;
}

// TV(m / m(E), ref) without materialising the normalised measure.
inline double tv_normalized(const DiscreteMeasure& m, const ReferenceDistribution& ref) {
  const double mass = m.mass();
  double s = 0.0;
  double covered = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double p = ref.pmf(m.point(i));
    s += std::abs(m.weight(i) / mass - p);
    covered += p;
  }
  const double ref_total = std::accumulate(ref.pmf_values.begin(), ref.pmf_values.end(), 0.0);
  s += std::max(0.0, ref_total - covered);
  return std::min(1.0, 0.5 * s);
}

struct DiscreteSetup {
  ModelSpec<Discrete> spec;
  std::optional<ReferenceDistribution> reference;
  std::map<std::string, double> setup_stats;
};

inline std::optional<ReferenceDistribution> discrete_reference(const std::string& key, const ExperimentConfig& cfg,
                                                               const ModelSpec<Discrete>& spec,
                                                               std::map<std::string, double>& setup_stats) {
  const json& p = cfg.params;
  if (key == "none") return std::nullopt;
  if (key == "poisson") return analytic_reference("poisson", {{"rate", spec.params.at("rate")}});
  if (key == "geometric_half" || key == "protected_pi") return analytic_reference(key);
  if (key == "mm_jump_chain")
    return analytic_reference(key, {{"lambda", spec.params.at("lambda")}, {"mu", spec.params.at("mu")}});
  if (key == "protected_nu") return limit_of(analytic_reference(key), spec, 64);
  if (key == "bd_qsd") {
    const double s = spec.params.at("normalizer");
    const double birth = num(p, "birth", 0.1);
    const double exponent = num(p, "birth_exponent", 1.0);
    const double death = num(p, "death", 0.9);
    auto lambda = [=](std::int64_t x) { return birth / std::pow(double(x + 1), exponent) / s; };
    auto mu = [=](std::int64_t) { return death / s; };
    const auto n = static_cast<std::size_t>(num(p, "truncation", 200));
    auto nu = power_iteration_qsd(truncate_bd_kernel(lambda, mu, n));
    const auto nu2 = power_iteration_qsd(truncate_bd_kernel(lambda, mu, 2 * n));
    setup_stats["truncation_stability"] = 0.5 * [&] {
      double d = 0.0;
      for (std::size_t x = 0; x < 2 * n; ++x) d += std::abs(nu.pmf(std::int64_t(x)) - nu2.pmf(std::int64_t(x)));
      return d;
    }();
    setup_stats["theta0"] = *nu.eigenvalue;
    return nu;
  }
  if (key == "eigen" || key == "rrf_qsd") {
    std::size_t n = static_cast<std::size_t>(num(p, "truncation", 200));
    if (spec.name == "finite_urn" || spec.name == "finite_signed_urn") n = matrix_param(p, "matrix").rows();
    if (spec.name == "sample_path") n = chain_matrix(p).rows();
    const auto nu = generator_qsd(kernel_matrix(spec.kernel, n));
    setup_stats["theta0"] = *nu.eigenvalue;
    return limit_of(nu, spec, n);
  }
  throw UnknownReference("no reference named '" + key + "' for model " + spec.name);
}

inline DiscreteSetup discrete_setup(const ExperimentConfig& cfg) {
  const json& p = cfg.params;
  auto spec = [&]() -> ModelSpec<Discrete> {
    if (cfg.model == "finite_urn" || cfg.model == "finite_signed_urn") {
      const DenseMatrix M = matrix_param(p, "matrix");
      std::optional<DiscreteMeasure> m0;
      if (p.contains("m0")) {
        const auto w = vector_param(p, "m0");
        DiscreteDelta d;
        for (std::size_t i = 0; i < w.size(); ++i)
          if (w[i] != 0.0) d.add(static_cast<std::int64_t>(i), w[i]);
        m0.emplace();
        m0->add(d);
      }
      return cfg.model == "finite_urn" ? finite_polya_urn(M, vector_param(p, "weights"), m0)
                                       : finite_signed_urn(M, vector_param(p, "weights"), m0);
    }
    if (cfg.model == "mm_infty") return mm_infty_urn(num(p, "lambda", 1.0), num(p, "mu", 2.0));
    if (cfg.model == "bd_quasi_ergodic") {
      const double birth = num(p, "birth", 0.1);
      const double exponent = num(p, "birth_exponent", 1.0);
      const double death = num(p, "death", 0.9);
      return bd_quasi_ergodic_urn([=](std::int64_t x) { return birth / std::pow(double(x + 1), exponent); },
                                  [=](std::int64_t) { return death; },
                                  static_cast<std::int64_t>(num(p, "probe", 200)));
    }
    if (cfg.model == "rrt") return rrt_outdegree_urn(num(p, "epsilon", 0.25));
    if (cfg.model == "rrf")
      return rrf_urn(law_param(p, "alpha", {{-1, 0.3}, {1, 0.7}}), law_param(p, "beta", {{1, 1.0}}));
    if (cfg.model == "protected_nodes") return protected_nodes_urn(num(p, "epsilon", 0.5));
    if (cfg.model == "sample_path") {
      auto chain = AbsorbedChainSpec::from_matrix(chain_matrix(p), horizon_param(p));
      DiscreteMeasure m0;
      m0.add(DiscreteDelta{{static_cast<std::int64_t>(num(p, "start", 0)), 1.0}});
      return discrete_sample_path_urn(std::move(chain), std::move(m0));
    }
    throw UnknownModel("no discrete model named '" + cfg.model + "'");
  }();
  DiscreteSetup setup{std::move(spec), std::nullopt, {}};
  const std::string key = cfg.reference.value_or(setup.spec.reference_key.value_or("none"));
  setup.reference = discrete_reference(key, cfg, setup.spec, setup.setup_stats);
  return setup;
}

template <class Space>
std::string trace_header(const std::vector<std::string>& diag) {
  std::string s = "step,drawn_color,delta_mass,m_mass,mP_mass";
  for (const auto& c : diag) s += "," + c;
  return s + "\n";
}

template <class Space>
void append_row(std::string& csv, const TraceRow<Space>& row) {
  csv += std::to_string(row.record.n) + ',' + color_string(row.record.drawn_color) + ',' +
         format_double(row.record.delta_mass) + ',' + format_double(row.record.m_mass) + ',' +
         format_double(row.record.mP_mass);
  for (double v : row.values) csv += ',' + format_double(v);
  csv += '\n';
}

inline std::map<std::string, double> discrete_stats(const std::string& model, const MvppState<Discrete>& s) {
  std::map<std::string, double> st;
  const auto& m = s.m();
  st["m_mass"] = m.mass();
  if (s.step_count() > 0) st["mass_rate"] = m.mass() / static_cast<double>(s.step_count());
  st["min_mP_rate"] = s.min_mP_rate();
  if (model == "rrt" || model == "protected_nodes" || model == "rrf") st["p0"] = m.weight_at(0) / m.mass();
  if (model == "protected_nodes") st["all_nodes_protected"] = all_nodes_protected(m);
  return st;
}

inline ReplicaResult run_discrete(const ExperimentConfig& cfg, std::uint64_t seed) {
  auto setup = discrete_setup(cfg);
  EngineOptions opt;
  if (cfg.paranoid) opt.paranoid_interval = 10000;
  auto state = init(setup.spec.m0, setup.spec.kernel, seed, opt);

  const auto& ref = setup.reference;
  const std::string model = cfg.model;
  std::vector<std::string> cols{"m_over_n"};
  if (ref) cols.push_back("distance");
  if (model == "rrt" || model == "protected_nodes" || model == "rrf") cols.push_back("p0");
  if (model == "protected_nodes") cols.push_back("all_nodes_protected");

  Observer<Discrete> obs;
  obs.stride = cfg.observe_stride;
  obs.columns = cols;
  obs.observe = [&](const MvppState<Discrete>& s, std::vector<double>& out) {
    const auto& m = s.m();
    out.push_back(m.mass() / static_cast<double>(s.step_count()));
    if (ref) out.push_back(tv_normalized(m, *ref));
    if (model == "rrt" || model == "protected_nodes" || model == "rrf") out.push_back(m.weight_at(0) / m.mass());
    if (model == "protected_nodes") out.push_back(all_nodes_protected(m));
  };
  const std::array<Observer<Discrete>, 1> observers{obs};
  const auto traces = run(state, cfg.n_steps, std::span<const Observer<Discrete>>(observers));

  ReplicaResult res;
  res.trace_csv = trace_header<Discrete>(cols);
  for (const auto& row : traces[0].rows) append_row(res.trace_csv, row);
  res.final_measure_json = to_json(state.m());
  res.stats = discrete_stats(model, state);
  for (const auto& [k, v] : setup.setup_stats) res.stats[k] = v;
  if (ref && state.m().mass() > 0.0) res.final_distance = tv_normalized(state.m(), *ref);
  res.warnings = setup.spec.warnings;
  if (ref)
    for (const auto& w : ref->warnings) res.warnings.push_back("reference: " + w);
  return res;
}

inline ReferenceDistribution gaussian_reference(const ExperimentConfig& cfg, const KilledDiffusionSpec& spec) {
  const std::string key = cfg.reference.value_or("gaussian");
  if (key != "gaussian") throw UnknownReference("no reference named '" + key + "' for model " + cfg.model);
  if (spec.dim != 1) throw DimensionUnsupported("the gaussian reference is one-dimensional");
  // Constant killing: the QSD is the stationary law N(0, 1/(2c)) of the OU
  // process dX = dB - c X dt.
  const double c = num(cfg.params, "drift_rate", 2.0);
  return analytic_reference("gaussian", {{"mean", 0.0}, {"variance", 1.0 / (2.0 * c)}});
}

inline ReplicaResult run_killed_diffusion(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto dspec = diffusion_param(cfg.params, 1e-2);
  auto spec = killed_diffusion_urn(dspec);
  EngineOptions opt;
  if (cfg.paranoid) opt.paranoid_interval = 10000;
  auto state = init(spec.m0, spec.kernel, seed, opt);
  std::optional<ReferenceDistribution> ref;
  if (cfg.reference.value_or("gaussian") != "none") ref = gaussian_reference(cfg, dspec);

  std::optional<BinnedCdf> hist;
  if (ref) hist.emplace(BinnedCdf::around(*ref));
  std::size_t seen = 0;
  auto absorb = [&](const EuclideanMeasure& m) {
    for (; seen < m.size(); ++seen) hist->add(m.point(seen)[0], m.weight(seen));
  };

  std::vector<std::string> cols{"m_over_n"};
  if (ref) cols.push_back("distance");
  Observer<Euclidean> obs;
  obs.stride = cfg.observe_stride;
  obs.columns = cols;
  obs.observe = [&](const MvppState<Euclidean>& s, std::vector<double>& out) {
    out.push_back(s.m().mass() / static_cast<double>(s.step_count()));
    if (hist) {
      absorb(s.m());
      out.push_back(hist->w1(*ref));
    }
  };
  const std::array<Observer<Euclidean>, 1> observers{obs};
  const auto traces = run(state, cfg.n_steps, std::span<const Observer<Euclidean>>(observers));

  ReplicaResult res;
  res.trace_csv = trace_header<Euclidean>(cols);
  for (const auto& row : traces[0].rows) append_row(res.trace_csv, row);
  if (cfg.params.value("write_measure", true)) res.final_measure_json = to_json(state.m());
  res.stats["m_mass"] = state.m().mass();
  res.stats["atoms"] = static_cast<double>(state.m().size());
  if (state.step_count() > 0) res.stats["mass_rate"] = state.m().mass() / static_cast<double>(state.step_count());
  if (hist) {
    absorb(state.m());
    res.final_distance = hist->w1(*ref);
  }
  res.warnings = spec.warnings;
  return res;
}

// n_steps counts Euler steps; the horizon is n_steps * dt.
inline ReplicaResult run_self_interacting(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto dspec = diffusion_param(cfg.params, 1e-3);
  SelfInteractingOptions opt;
  if (cfg.reference.value_or("gaussian") != "none") opt.reference = gaussian_reference(cfg, dspec);
  opt.trace_every = static_cast<double>(cfg.observe_stride) * dspec.dt;
  opt.keep_atoms = cfg.params.value("write_measure", false);
  RngStream rng(seed, 0);
  if (cfg.n_steps == 0) throw InvalidParams("self_interacting needs n_steps >= 1");
  const auto r = self_interacting_qsd(dspec, static_cast<double>(cfg.n_steps) * dspec.dt, rng, opt);

  ReplicaResult res;
  res.trace_csv = "step,time,distance\n";
  for (const auto& [t, w] : r.w1_trace)
    res.trace_csv += std::to_string(std::llround(t / dspec.dt)) + ',' + format_double(t) + ',' + format_double(w) + '\n';
  if (opt.keep_atoms) res.final_measure_json = to_json(r.occupation());
  res.stats["time"] = r.t;
  res.stats["jumps"] = static_cast<double>(r.jumps);
  if (r.final_w1) res.final_distance = *r.final_w1;
  return res;
}

}  // namespace detail

/// One replica of the configured experiment with the given seed.
inline ReplicaResult run_replica(const ExperimentConfig& cfg, std::uint64_t seed) {
  if (cfg.model == "killed_diffusion") return detail::run_killed_diffusion(cfg, seed);
  if (cfg.model == "self_interacting") return detail::run_self_interacting(cfg, seed);
  return detail::run_discrete(cfg, seed);
}

// Sweeps without an explicit seed list use seed, seed+1, ..., seed+4.
inline constexpr std::uint64_t kDefaultSweepSeeds = 5;

struct ExperimentOutcome {
  int exit_code = kExitOk;
  std::string model;
  std::vector<std::uint64_t> seeds;
  std::vector<double> final_distances;
  double mean = std::numeric_limits<double>::quiet_NaN();
  double max = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> tolerance;
  bool pass = true;
  std::vector<std::string> failures;
  std::vector<std::map<std::string, double>> stats;
  std::vector<std::string> warnings;
  std::string error;
  double seconds = 0.0;
};

inline std::string summary_json(const ExperimentOutcome& o) {
  std::string s = "{\"model\":" + json_string(o.model) + ",\"seeds\":[";
  for (std::size_t i = 0; i < o.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(o.seeds[i]);
  s += "],\"final_distances\":[";
  for (std::size_t i = 0; i < o.final_distances.size(); ++i) s += (i ? "," : "") + json_number(o.final_distances[i]);
  s += "],\"mean\":" + json_number(o.mean) + ",\"max\":" + json_number(o.max) +
       ",\"tolerance\":" + (o.tolerance ? json_number(*o.tolerance) : std::string("null")) +
       ",\"pass\":" + (o.pass ? "true" : "false") + ",\"stats\":[";
  for (std::size_t i = 0; i < o.stats.size(); ++i) {
    s += i ? ",{" : "{";
    bool first = true;
    for (const auto& [k, v] : o.stats[i]) {
      s += (first ? "" : ",") + json_string(k) + ":" + json_number(v);
      first = false;
    }
    s += "}";
  }
  s += "],\"failures\":[";
  for (std::size_t i = 0; i < o.failures.size(); ++i) s += (i ? "," : "") + json_string(o.failures[i]);
  s += "],\"warnings\":[";
  for (std::size_t i = 0; i < o.warnings.size(); ++i) s += (i ? "," : "") + json_string(o.warnings[i]);
  s += "]";
  if (!o.error.empty()) s += ",\"error\":" + json_string(o.error);
  return s + "}\n";
}

namespace detail {

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << content;
  if (!out) throw IoError("failed writing " + path.string());
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

}  // namespace detail

/// Runs a config in its mode (run, sweep or accept) and writes trace.csv,
/// final_measure.json and summary.json (per-seed files in sweeps). Errors are
/// mapped to the exit-code contract rather than thrown.
inline ExperimentOutcome run_experiment(const ExperimentConfig& cfg, bool write_files = true) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentOutcome o;
  o.model = cfg.model;
  o.tolerance = cfg.tolerance;
  if (cfg.mode == Mode::run) {
    o.seeds = {cfg.seed};
  } else if (cfg.seeds.empty()) {
    for (std::uint64_t k = 0; k < kDefaultSweepSeeds; ++k) o.seeds.push_back(cfg.seed + k);
  } else {
    o.seeds = cfg.seeds;
  }
  std::vector<ReplicaResult> results(o.seeds.size());
  try {
    seed_sweep(o.seeds, [&](std::size_t i, std::uint64_t seed) {
      results[i] = run_replica(cfg, seed);
      return results[i].final_distance;
    });
  } catch (const ReplicaError& e) {
    o.exit_code = kExitModelError;
    o.pass = false;
    o.error = e.what();
  }

  if (o.exit_code == kExitOk) {
    for (const auto& r : results) {
      o.final_distances.push_back(r.final_distance);
      o.stats.push_back(r.stats);
    }
    for (const auto& w : results.front().warnings) o.warnings.push_back(w);
    bool have_distance = true;
    double sum = 0.0;
    double mx = -std::numeric_limits<double>::infinity();
    for (double d : o.final_distances) {
      if (std::isnan(d)) have_distance = false;
      sum += d;
      mx = std::max(mx, d);
    }
    if (have_distance) {
      o.mean = sum / static_cast<double>(o.final_distances.size());
      o.max = mx;
    }
    if (cfg.tolerance) {
      if (!have_distance) {
        o.failures.push_back("tolerance set but the model has no reference distance");
      } else if (!(o.max < *cfg.tolerance)) {
        o.failures.push_back("max final distance " + format_double(o.max) + " >= tolerance " +
                             format_double(*cfg.tolerance));
      }
    }
    for (const auto& c : cfg.checks) {
      for (std::size_t i = 0; i < results.size(); ++i) {
        const auto it = results[i].stats.find(c.stat);
        if (it == results[i].stats.end()) {
          o.failures.push_back("statistic '" + c.stat + "' is not reported by " + cfg.model);
          break;
        }
        if (!(std::abs(it->second - c.target) < c.tolerance))
          o.failures.push_back("seed " + std::to_string(o.seeds[i]) + ": " + c.stat + " = " +
                               format_double(it->second) + ", target " + format_double(c.target) + " +- " +
                               format_double(c.tolerance));
      }
    }
    o.pass = o.failures.empty();
    if (!o.pass && cfg.mode == Mode::accept) o.exit_code = kExitToleranceFailure;
  }
  o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (write_files) {
    try {
      const std::filesystem::path dir(cfg.output_dir);
      detail::ensure_dir(dir);
      if (o.exit_code != kExitModelError) {
        const bool single = o.seeds.size() == 1 && cfg.mode == Mode::run;
        for (std::size_t i = 0; i < results.size(); ++i) {
          const std::string suffix = single ? "" : "_seed" + std::to_string(o.seeds[i]);
          detail::write_file(dir / ("trace" + suffix + ".csv"), results[i].trace_csv);
          if (!results[i].final_measure_json.empty())
            detail::write_file(dir / ("final_measure" + suffix + ".json"), results[i].final_measure_json + "\n");
        }
      }
      detail::write_file(dir / "summary.json", summary_json(o));
    } catch (const IoError& e) {
      o.exit_code = kExitIoError;
      o.error = e.what();
    }
  }
  return o;
}

struct SuiteEntry {
  std::string name;
  ExperimentOutcome outcome;
};

struct SuiteReport {
  std::vector<SuiteEntry> entries;
  int exit_code = kExitOk;
};

/// Runs every experiment of a suite document {"experiments": [config, ...]}
/// in accept mode. A failing entry does not stop the suite; the exit code is
/// the worst one seen (0 iff everything passed).
inline SuiteReport accept_suite(const json& suite, const std::string& output_dir, bool paranoid = false) {
  if (!suite.is_object() || !suite.contains("experiments") || !suite.at("experiments").is_array())
    throw ParseError("experiments", "suite needs an 'experiments' array");
  SuiteReport rep;
  for (const auto& e : suite.at("experiments")) {
    SuiteEntry entry;
    entry.name = e.value("name", e.value("model", std::string("?")));
    try {
      auto cfg = config_from_json(e);
      cfg.mode = Mode::accept;
      cfg.paranoid = cfg.paranoid || paranoid;
      cfg.output_dir = (std::filesystem::path(output_dir) / entry.name).string();
      entry.outcome = run_experiment(cfg);
    } catch (const Error& err) {
      entry.outcome.model = e.value("model", std::string("?"));
      entry.outcome.exit_code = kExitModelError;
      entry.outcome.pass = false;
      entry.outcome.error = err.what();
    }
    rep.exit_code = std::max(rep.exit_code, entry.outcome.exit_code);
    rep.entries.push_back(std::move(entry));
  }
  return rep;
}

inline std::string suite_table(const SuiteReport& rep) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-28s %-18s %12s %12s %8s %s\n", "experiment", "model", "max_dist", "tolerance",
                "seconds", "result");
  out << line;
  for (const auto& e : rep.entries) {
    const auto& o = e.outcome;
    std::snprintf(line, sizeof line, "%-28s %-18s %12.6g %12.6g %8.1f %s\n", e.name.c_str(), o.model.c_str(), o.max,
                  o.tolerance.value_or(std::numeric_limits<double>::quiet_NaN()), o.seconds,
                  o.exit_code == kExitModelError ? "ERROR" : (o.pass ? "PASS" : "FAIL"));
    out << line;
    for (const auto& f : o.failures) out << "    " << f << '\n';
    if (!o.error.empty()) out << "    " << o.error << '\n';
  }
  return out.str();
}

/// Reads a square matrix from CSV text (one row per line, commas or
/// whitespace between entries; blank lines and '#' comments skipped).
inline DenseMatrix parse_matrix_csv(const std::string& text) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    for (char& c : line)
      if (c == ',' || c == ';' || c == '\t' || c == '\r') c = ' ';
    std::istringstream ls(line);
    std::vector<double> row;
    std::string tok;
    while (ls >> tok) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ParseError("matrix", "not a number: '" + tok + "'", line_no);
      }
    }
    if (row.empty()) continue;
    if (!rows.empty() && row.size() != rows.front().size())
      throw ParseError("matrix", "row has " + std::to_string(row.size()) + " entries, expected " +
                                     std::to_string(rows.front().size()), line_no);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError("matrix", "no rows");
  DenseMatrix m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  return m;
}

// {"nu":[...],"theta0":...,"iterations":...,"warnings":[...]}
inline std::string qsd_oracle_json(const ReferenceDistribution& ref) {
  std::string s = "{\"nu\":[";
  for (std::size_t i = 0; i < ref.pmf_values.size(); ++i) s += (i ? "," : "") + json_number(ref.pmf_values[i]);
  s += "],\"theta0\":" + json_number(ref.eigenvalue.value_or(std::numeric_limits<double>::quiet_NaN())) +
       ",\"iterations\":" + std::to_string(ref.iterations) + ",\"warnings\":[";
  for (std::size_t i = 0; i < ref.warnings.size(); ++i) s += (i ? "," : "") + json_string(ref.warnings[i]);
  return s + "]}\n";
}

}  // namespace mvpp
