// Command-line driver: mvpp {run|sweep|accept|qsd-oracle} --config PATH

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "mvpp/experiment.hpp"

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw mvpp::IoError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool paranoid = false;
  std::optional<std::string> out;
  bool signed_diagonal = false;
};

int report(const mvpp::ExperimentOutcome& o) {
  std::cout << mvpp::summary_json(o);
  if (!o.error.empty()) std::cerr << "error: " << o.error << '\n';
  for (const auto& f : o.failures) std::cerr << "fail: " << f << '\n';
  return o.exit_code;
}

int run_mode(mvpp::Mode mode, const Options& opt) {
  const std::string text = read_file(opt.config);
  if (mode == mvpp::Mode::accept) {
    const auto doc = mvpp::json::parse(text, nullptr, false);
    if (doc.is_object() && doc.contains("experiments")) {
      const auto rep = mvpp::accept_suite(doc, opt.out.value_or("accept_out"), opt.paranoid);
      std::cout << mvpp::suite_table(rep);
      return rep.exit_code;
    }
  }
  auto cfg = mvpp::parse_config(text);
  cfg.mode = mode;
  if (opt.seed) cfg.seed = *opt.seed;
  if (opt.paranoid) cfg.paranoid = true;
  if (opt.out) cfg.output_dir = *opt.out;
  return report(mvpp::run_experiment(cfg));
}

int qsd_oracle(const Options& opt) {
  const auto g = mvpp::parse_matrix_csv(read_file(opt.config));
  const auto ref = opt.signed_diagonal ? mvpp::generator_qsd(g) : mvpp::power_iteration_qsd(g);
  const std::string body = mvpp::qsd_oracle_json(ref);
  std::cout << body;
  if (opt.out) {
    std::filesystem::create_directories(*opt.out);
    std::ofstream f(std::filesystem::path(*opt.out) / "qsd.json", std::ios::binary);
    if (!(f << body)) throw mvpp::IoError("cannot write qsd.json");
  }
  return mvpp::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Measure-valued Polya process simulator"};
  app.require_subcommand(1);
  Options opt;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "experiment config (JSON) or matrix (CSV) path")->required();
    sub->add_option("--seed", opt.seed, "override the config seed");
    sub->add_flag("--paranoid", opt.paranoid, "recompute mP every 10^4 steps and compare");
    sub->add_option("--out", opt.out, "output directory");
  };
  auto* run = app.add_subcommand("run", "run one replica");
  auto* sweep = app.add_subcommand("sweep", "run one replica per seed");
  auto* accept = app.add_subcommand("accept", "run an experiment or a suite against tolerances");
  auto* oracle = app.add_subcommand("qsd-oracle", "quasi-stationary distribution of a CSV matrix");
  for (auto* sub : {run, sweep, accept, oracle}) add_common(sub);
  oracle->add_flag("--signed", opt.signed_diagonal, "allow a negative diagonal (shifted iteration)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return run_mode(mvpp::Mode::run, opt);
    if (*sweep) return run_mode(mvpp::Mode::sweep, opt);
    if (*accept) return run_mode(mvpp::Mode::accept, opt);
    return qsd_oracle(opt);
  } catch (const mvpp::IoError& e) {
    std::cerr << e.what() << '\n';
    return mvpp::kExitIoError;
  } catch (const mvpp::Error& e) {
    std::cerr << e.what() << '\n';
    return mvpp::kExitModelError;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << e.what() << '\n';
    return mvpp::kExitIoError;
  }
}
