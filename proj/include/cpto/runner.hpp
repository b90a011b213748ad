#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpto/planner.hpp"

namespace cpto {

/// Full run configuration with defaults matching the driving-experiment
/// parameter table. Loaded from JSON; unknown keys and out-of-range values
/// are errors naming the offending key.
struct RunConfig {
  std::string scenario = "static-field";  // static-field | idm-traffic | replay | lane-change
  std::vector<uint64_t> seeds = {1};
  int steps = 600;
  std::string out_dir = "out";
  int workers = 1;

  double horizon = 4.0;
  int planning_steps = 40;
  double control_hz = 10.0;
  int candidates = 5;
  int obstacle_slots = 5;
  int consensus_steps = 6;
  int degree = 10;
  double v_target = 15.0;
  std::string mode = "kkt-exact";  // kkt-exact | paper-pseudoinverse
  bool stagger_terminal = false;
  std::vector<int> config_counts;  // empty = default ladder

  double rho_theta = 5.0, rho_x = 5.0, rho_y = 5.0, rho_obs = 6.0;
  double rho_cons_x = 4.0, rho_cons_y = 4.0, rho_cons_theta = 2.0;
  double relax_alpha = 1.5, eps_pri = 0.1, eps_consensus = 1e-2;
  int iter_max = 200;
  double q_x = 100.0, q_y = 100.0, q_theta = 150.0;
  double boundary_weight = 1e3;
  double fallback_residual_limit = 1.0;

  PerceptionModel perception;
  EllipseParams ellipse;
  double alpha_init = 0.2;
  StateBounds bounds;
  LaneLayout lanes;
  EvaluationWeights weights;

  IdmParams idm;
  double idm_speed_min = 8.5, idm_speed_max = 18.0;
  double traffic_gap_min = 20.0, traffic_gap_max = 45.0;
  std::string replay_path;

  double ego_start_x = -20.0;
  int ego_start_lane = 1;
  double ego_start_speed = 15.0;
  double lead_gap = 10.0;
};

RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::string& path);
nlohmann::json to_json(const RunConfig& config);
uint64_t config_hash(const RunConfig& config);

PlannerConfig planner_config(const RunConfig& config);
EgoState initial_ego(const RunConfig& config);
World make_world(const RunConfig& config, Rng& rng);

/// Builds the scenario world (on a stream derived from the seed, decoupled
/// from the episode stream) and runs one full episode.
EpisodeLog run_scenario_episode(const RunConfig& config, uint64_t seed);

void write_episode_csv(const std::string& path, const EpisodeLog& log);
EpisodeLog read_episode_csv(const std::string& path);
void write_trace_csv(const std::string& path, const EpisodeLog& log);
void write_metrics_json(const std::string& path, const MetricsReport& metrics,
                        const RunConfig& config);

/// Field-by-field log comparison that ignores the solve-time column.
bool logs_equal_ignoring_timing(const std::string& path_a, const std::string& path_b);

/// Executes one episode per seed (optionally on a worker pool), writing the
/// per-step log, iteration trace and metrics summary for each, plus an
/// aggregate summary. Returns a nonzero status on any episode error;
/// partial outputs are retained.
int run(const RunConfig& config);

struct BenchCell {
  int candidates = 0;
  int obstacle_slots = 0;
  double avg_ms = 0, min_ms = 0, max_ms = 0;
  int solves = 0;
};

/// Sweeps candidates in {2..5} x obstacle slots in {3..6} on the
/// dense-traffic fixture and reports solve-time statistics per cell.
std::vector<BenchCell> bench(const RunConfig& config);

}  // namespace cpto
