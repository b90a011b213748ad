#pragma once

#include <optional>

#include "cpto/solver.hpp"
#include "cpto/world.hpp"

namespace cpto {

/// Augmented ego state: positions, heading, yaw rate, speed, accelerations
/// and jerks, all in the global frame.
struct EgoState {
  double px = 0, py = 0;       // [m]
  double theta = 0;            // [rad]
  double thetadot = 0;         // [rad/s]
  double v = 0;                // [m/s]
  double ax = 0, ay = 0;       // [m/s^2]
  double jx = 0, jy = 0;       // [m/s^3]
};

struct EvaluationWeights {
  double safety = 1.0;    // barrier margin over the horizon
  double comfort = 0.3;   // mean absolute jerk
  double accuracy = 0.5;  // speed tracking
};

struct EllipseParams {
  double lx_max = 7.2, lx_min = 6.0;
  double ly_max = 5.4, ly_min = 4.5;
};

struct PlannerConfig {
  int degree = 10;
  int steps = 40;            // N
  double horizon = 4.0;      // T [s]
  int candidates = 5;        // Nc
  int obstacle_slots = 5;    // M
  int consensus_steps = 6;   // Ns
  double alpha_init = 0.2;
  double v_target = 15.0;
  bool stagger_terminal = false;
  double lead_gap = 10.0;  // headway kept to a leading vehicle when capping targets
  // A budget-limited iterate is still executed (it reflects the current
  // obstacles; a stale plan does not) unless its residuals exceed this
  // blow-up limit, in which case the previous plan's next step runs.
  double fallback_residual_limit = 1.0;
  EllipseParams ellipse;
  StateBounds bounds;
  LaneLayout lanes;
  EvaluationWeights weights;
  PerceptionModel perception;
  SolverConfig solver;              // Q matrices filled from defaults when empty
  std::vector<int> config_counts;   // obstacle-count ladder; empty = default
};

struct TerminalTargets {
  Vector x, y;
  std::vector<int> lane;
};

struct CandidateScore {
  double min_h = 0;         // min barrier value over the horizon, own configuration
  double mean_abs_jerk = 0;
  double accuracy_dev = 0;  // mean absolute speed error against the target
  double cost = 0;
};

struct PlanStep {
  ControlPointBatch batch;
  int selected = 0;
  EgoState executed;
  SolveReport report;
  std::vector<CandidateScore> scores;
  ConsensusInvarianceReport consensus_report;
  bool fallback = false;          // executed from the previous plan
  bool no_safe_candidate = false; // least-bad selection used
  bool emergency = false;         // braked instead of entering a collision envelope
};

struct EpisodeStep {
  double t = 0;
  EgoState state;
  int selected = 0;
  double solve_ms = 0;
  int iterations = 0;
  bool converged = false;
  bool fallback = false;
  double min_true_dist = 0;    // Euclidean, ground truth [m]
  double min_true_margin = 0;  // elliptical margin with the minimum axes
  double consensus_deviation = 0;
  double consensus_min_h = 0;
  ResidualBlocks residuals{0, 0, 0, 0};
  std::vector<ResidualBlocks> residual_history;
};

struct EpisodeLog {
  uint64_t seed = 0;
  double dt = 0;
  int candidates = 0;
  std::vector<EpisodeStep> steps;
};

struct MetricsReport {
  double collision_rate = 0;        // fraction of steps with margin < 1
  double mean_nearest_distance = 0; // over steps with at least one obstacle
  double mean_speed_error = 0;
  double mean_abs_ax = 0, mean_abs_ay = 0;
  double max_abs_jx = 0, max_abs_jy = 0;
  double mean_abs_yaw_rate = 0;
  double mean_solve_ms = 0, max_solve_ms = 0;
  int steps = 0;
  int steps_with_obstacles = 0;
  uint64_t seed = 0;
};

/// Longitudinal targets v_target*T ahead (staggered across candidates when
/// enabled), capped by acceleration reachability and by any perceived
/// leader in the target lane. Lateral targets cycle over reachable lane
/// centerlines starting from the current lane.
TerminalTargets sample_terminal_targets(const EgoState& ego, const LaneLayout& lanes,
                                        double v_target, double horizon, int count,
                                        bool stagger = false,
                                        const std::vector<PerceivedObstacle>& perceived = {},
                                        const StateBounds* bounds = nullptr,
                                        double lead_gap = 10.0);

/// Weighted cost over candidates whose own-configuration barrier minimum is
/// nonnegative; ties break toward the lowest index. Falls back to the
/// largest barrier minimum when nothing qualifies and sets *no_safe.
int evaluate_and_select(const std::vector<CandidateScore>& scores, const EvaluationWeights& weights,
                        bool* no_safe = nullptr);

/// Receding-horizon planner: observe, build configurations, solve, validate
/// and execute the first consensus step. Owns the warm-start state.
class Planner {
 public:
  explicit Planner(const PlannerConfig& config);

  const PlannerConfig& config() const { return config_; }
  const BasisSet& basis() const { return basis_; }

  PlanStep step(World& world, EgoState& ego, Rng& rng);

 private:
  ControlPointBatch shift_batch(const ControlPointBatch& batch) const;
  EgoState state_at(const StateSamples& samples, const Matrix& yaw_rate, int row, int column) const;
  EgoState braking_state(const EgoState& ego) const;
  bool stopping_path_unsafe(const EgoState& state,
                            const std::vector<PerceivedObstacle>& perceived,
                            const EgoState& current) const;

  PlannerConfig config_;
  BasisSet basis_;
  Vector alpha_;
  Matrix shift_fit_;              // weighted refit operator for the warm shift
  Eigen::LLT<Matrix> shift_gram_;
  // Warm-start state: the latest solve result, converged or not, so dual
  // progress accumulates across horizons.
  std::optional<WarmStart> warm_;
  // Execution state: the last converged plan, for the fallback path.
  std::optional<ControlPointBatch> executed_plan_;
  int executed_selected_ = 0;
  int steps_since_plan_ = 0;
};

/// Runs the planner against the world for the requested number of steps,
/// appending to log as it goes so a partial record survives an abort.
void run_episode(World& world, const EgoState& initial, int steps, const PlannerConfig& config,
                 uint64_t seed, EpisodeLog& log);

/// Throws std::invalid_argument on an empty log.
MetricsReport compute_metrics(const EpisodeLog& log, double v_target);

}  // namespace cpto
