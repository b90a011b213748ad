#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "cpto/runner.hpp"

namespace {

struct CommonOptions {
  std::string config_path;
  std::string seeds;
  int steps = -1;
  std::string out;
  int consensus_steps = -1;
  std::string mode;
};

void add_common(CLI::App* cmd, CommonOptions& opt) {
  cmd->add_option("--config", opt.config_path, "JSON configuration file");
  cmd->add_option("--seeds", opt.seeds, "Comma-separated list of seeds");
  cmd->add_option("--steps", opt.steps, "Episode length in control steps");
  cmd->add_option("--out", opt.out, "Output directory");
  cmd->add_option("--consensus-steps", opt.consensus_steps, "Shared segment length Ns");
  cmd->add_option("--mode", opt.mode, "Primal solve mode: kkt-exact | paper-pseudoinverse");
}

cpto::RunConfig resolve(const CommonOptions& opt) {
  cpto::RunConfig config = opt.config_path.empty() ? cpto::parse_config(nlohmann::json::object())
                                                   : cpto::load_config(opt.config_path);
  if (!opt.seeds.empty()) {
    config.seeds.clear();
    std::stringstream ss(opt.seeds);
    std::string token;
    while (std::getline(ss, token, ',')) {
      if (!token.empty()) config.seeds.push_back(std::stoull(token));
    }
    if (config.seeds.empty()) throw std::invalid_argument("--seeds: no seeds given");
  }
  if (opt.steps >= 0) config.steps = opt.steps;
  if (!opt.out.empty()) config.out_dir = opt.out;
  if (opt.consensus_steps >= 0) config.consensus_steps = opt.consensus_steps;
  if (!opt.mode.empty()) config.mode = opt.mode;
  // Re-validate after command-line overrides.
  return cpto::parse_config(cpto::to_json(config));
}

int do_validate(const cpto::RunConfig& config) {
  bool all_ok = true;
  for (uint64_t seed : config.seeds) {
    cpto::Rng rng(seed);
    cpto::World world = cpto::make_world(config, rng);
    cpto::EpisodeLog log;
    cpto::run_episode(world, cpto::initial_ego(config), config.steps, cpto::planner_config(config),
                      seed, log);
    double worst_dev = 0;
    double worst_h = std::numeric_limits<double>::infinity();
    int collisions = 0;
    int converged = 0;
    for (const cpto::EpisodeStep& s : log.steps) {
      if (s.converged) {
        ++converged;
        worst_dev = std::max(worst_dev, s.consensus_deviation);
        worst_h = std::min(worst_h, s.consensus_min_h);
      }
      if (std::isfinite(s.min_true_margin) && s.min_true_margin < 1.0) ++collisions;
    }
    const bool ok = worst_dev <= 1e-2 && worst_h >= 0.0 && collisions == 0;
    all_ok = all_ok && ok;
    std::printf("seed %llu: %d/%zu converged, max consensus deviation %.3e m, "
                "min cross-config h %.4f, collisions %d -> %s\n",
                static_cast<unsigned long long>(seed), converged, log.steps.size(), worst_dev,
                worst_h, collisions, ok ? "OK" : "VIOLATION");
  }
  return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Consensus parallel trajectory optimization simulator"};
  app.require_subcommand(1);

  CommonOptions run_opt, bench_opt, validate_opt;
  CLI::App* cmd_run = app.add_subcommand("run", "Run episodes across seeds and write logs/metrics");
  add_common(cmd_run, run_opt);
  CLI::App* cmd_bench =
      app.add_subcommand("bench", "Sweep candidate/obstacle counts on the dense-traffic fixture");
  add_common(cmd_bench, bench_opt);
  CLI::App* cmd_validate =
      app.add_subcommand("validate", "Check consensus-segment agreement and barrier margins");
  add_common(cmd_validate, validate_opt);

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_run->parsed()) {
      return cpto::run(resolve(run_opt));
    }
    if (cmd_bench->parsed()) {
      cpto::RunConfig config = resolve(bench_opt);
      if (bench_opt.steps < 0) config.steps = 60;  // keep the default sweep quick
      const std::vector<cpto::BenchCell> cells = cpto::bench(config);
      std::printf("%-12s %-10s %-12s %-12s %-12s\n", "trajectories", "obstacles", "avg_ms",
                  "min_ms", "max_ms");
      for (const cpto::BenchCell& cell : cells) {
        std::printf("%-12d %-10d %-12.2f %-12.2f %-12.2f\n", cell.candidates, cell.obstacle_slots,
                    cell.avg_ms, cell.min_ms, cell.max_ms);
      }
      return 0;
    }
    if (cmd_validate->parsed()) {
      cpto::RunConfig config = resolve(validate_opt);
      if (validate_opt.steps < 0) config.steps = 200;
      return do_validate(config);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
