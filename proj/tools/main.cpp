// crvkit: cluster-robust variance estimation and small-sample inference.
// Thin argument shim; all behavior lives in crvkit::run_command.

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <string>

#include "crvkit/crvkit.hpp"

int main(int argc, char** argv) {
  CLI::App app{"cluster-robust inference toolkit"};
  app.require_subcommand(1);

  crvkit::RunOptions opts;
  std::uint64_t seed = 0;

  CLI::App* fit = app.add_subcommand("fit", "fit the model and report coefficient inference");
  CLI::App* test = app.add_subcommand("test", "run Wald tests of linear hypotheses");
  CLI::App* sim = app.add_subcommand("simulate", "run the Monte Carlo experiment grid");
  for (CLI::App* sub : {fit, test, sim}) {
    sub->add_option("--config", opts.config_path, "JSON run configuration file")->required();
    sub->add_option("--out", opts.out_path, "write the report to this file instead of stdout");
  }
  sim->add_option("--threads", opts.threads, "worker threads (default: CRVKIT_THREADS or 1)")
      ->check(CLI::PositiveNumber);
  CLI::Option* seed_opt = sim->add_option("--seed", seed, "override the experiment seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // bad invocation is a configuration error
  }

  opts.seed_set = seed_opt->count() > 0;
  opts.seed = seed;
  const std::string command = app.get_subcommands().front()->get_name();
  return crvkit::run_command(command, opts, std::cout, std::cerr);
}
