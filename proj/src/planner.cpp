#include "cpto/planner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace cpto {

TerminalTargets sample_terminal_targets(const EgoState& ego, const LaneLayout& lanes,
                                        double v_target, double horizon, int count, bool stagger,
                                        const std::vector<PerceivedObstacle>& perceived,
                                        const StateBounds* bounds, double lead_gap) {
  if (count < 1) throw std::invalid_argument("sample_terminal_targets: count must be >= 1");
  TerminalTargets targets;
  targets.x.resize(count);
  targets.y.resize(count);
  targets.lane.resize(count);

  // Reachable lanes ordered current, right, left, ...
  const int current = lanes.nearest_lane(ego.py);
  std::vector<int> reachable;
  reachable.push_back(current);
  for (int offset = 1; offset < lanes.count; ++offset) {
    if (current + offset < lanes.count) reachable.push_back(current + offset);
    if (current - offset >= 0) reachable.push_back(current - offset);
  }

  const double vx0 = ego.v * std::cos(ego.theta);
  for (int j = 0; j < count; ++j) {
    double x = ego.px + v_target * horizon;
    if (stagger) {
      const int phase = j % 3;
      const double factor = phase == 0 ? 1.0 : (phase == 1 ? 1.1 : 0.9);
      x = ego.px + v_target * horizon * factor;
    }
    if (bounds) {
      const double lo = ego.px + vx0 * horizon + 0.5 * bounds->ax_min * horizon * horizon;
      const double hi = ego.px + vx0 * horizon + 0.5 * bounds->ax_max * horizon * horizon;
      x = std::clamp(x, lo, hi);
    }
    const int lane = reachable[j % reachable.size()];
    const double lane_y = lanes.center(lane);
    for (const PerceivedObstacle& p : perceived) {
      if (std::abs(p.state.y - lane_y) > lanes.width / 2) continue;
      if (p.state.x <= ego.px) continue;
      const double cap = p.state.x + p.state.vx * horizon - lead_gap - p.state.length;
      x = std::min(x, cap);
    }
    targets.x(j) = std::max(x, ego.px);
    targets.y(j) = lane_y;
    targets.lane[j] = lane;
  }
  return targets;
}

int evaluate_and_select(const std::vector<CandidateScore>& scores, const EvaluationWeights& weights,
                        bool* no_safe) {
  if (scores.empty()) throw std::invalid_argument("evaluate_and_select: no candidates");
  int best = -1;
  double best_cost = std::numeric_limits<double>::infinity();
  for (size_t j = 0; j < scores.size(); ++j) {
    if (scores[j].min_h < 0) continue;
    const double cost = -weights.safety * scores[j].min_h +
                        weights.comfort * scores[j].mean_abs_jerk +
                        weights.accuracy * scores[j].accuracy_dev;
    if (cost < best_cost) {
      best_cost = cost;
      best = static_cast<int>(j);
    }
  }
  if (no_safe) *no_safe = (best < 0);
  if (best >= 0) return best;
  // Least-bad fallback: largest barrier minimum.
  int fallback = 0;
  for (size_t j = 1; j < scores.size(); ++j) {
    if (scores[j].min_h > scores[fallback].min_h) fallback = static_cast<int>(j);
  }
  return fallback;
}

Planner::Planner(const PlannerConfig& config) : config_(config) {
  basis_ = build_basis(config.degree, config.steps, config.horizon);
  alpha_ = barrier_coefficients(config.alpha_init, config.steps).alpha;
  if (config_.solver.Qx.size() == 0) {
    const SolverConfig defaults = default_solver_config(basis_);
    config_.solver.Qx = defaults.Qx;
    config_.solver.Qy = defaults.Qy;
    config_.solver.Qtheta = defaults.Qtheta;
  }
  validate(config_.solver, config_.degree);

  // Warm-shift refit, weighted so the shared consensus segment survives the
  // one-step advance without cross-candidate smear from the extrapolated
  // tail sample.
  Vector weights = Vector::Ones(config_.steps);
  weights.head(std::max(1, config_.consensus_steps)).setConstant(1e3);
  shift_fit_ = basis_.W * weights.asDiagonal();
  shift_gram_.compute(shift_fit_ * basis_.W.transpose());
  if (shift_gram_.info() != Eigen::Success) {
    throw singular_system_error("planner: basis gram matrix is not positive definite");
  }
}

ControlPointBatch Planner::shift_batch(const ControlPointBatch& batch) const {
  // Refit control points to the samples advanced by one grid step; the last
  // sample extrapolates with the terminal slope.
  auto shift_axis = [&](const Matrix& c) {
    Matrix samples = basis_.W.transpose() * c;  // N x Nc
    const int n = static_cast<int>(samples.rows());
    Matrix shifted(n, samples.cols());
    shifted.topRows(n - 1) = samples.bottomRows(n - 1);
    shifted.row(n - 1) = samples.row(n - 1) + (samples.row(n - 1) - samples.row(n - 2));
    return Matrix(shift_gram_.solve(shift_fit_ * shifted));
  };
  ControlPointBatch out;
  out.x = shift_axis(batch.x);
  out.y = shift_axis(batch.y);
  out.theta = shift_axis(batch.theta);
  return out;
}

EgoState Planner::state_at(const StateSamples& samples, const Matrix& yaw_rate, int row,
                           int column) const {
  const StateBounds& b = config_.bounds;
  EgoState s;
  s.px = std::clamp(samples.px(row, column), b.px_min, b.px_max);
  s.py = std::clamp(samples.py(row, column), b.py_min, b.py_max);
  s.theta = samples.theta(row, column);
  s.thetadot = yaw_rate(row, column);
  s.v = std::clamp(samples.speed(row, column), b.v_min, b.v_max);
  s.ax = std::clamp(samples.ax(row, column), b.ax_min, b.ax_max);
  s.ay = std::clamp(samples.ay(row, column), b.ay_min, b.ay_max);
  s.jx = std::clamp(samples.jx(row, column), b.jx_min, b.jx_max);
  s.jy = std::clamp(samples.jy(row, column), b.jy_min, b.jy_max);
  return s;
}

EgoState Planner::braking_state(const EgoState& ego) const {
  EgoState next = ego;
  const double dt = basis_.dt;
  const double v_new = std::max(0.0, ego.v + config_.bounds.ax_min * dt);
  const double v_avg = 0.5 * (ego.v + v_new);
  next.px = ego.px + v_avg * dt * std::cos(ego.theta);
  next.py = ego.py + v_avg * dt * std::sin(ego.theta);
  next.v = v_new;
  next.ax = config_.bounds.ax_min * std::cos(ego.theta);
  next.ay = std::clamp(config_.bounds.ax_min * std::sin(ego.theta), config_.bounds.ay_min,
                       config_.bounds.ay_max);
  next.thetadot = 0;
  next.jx = 0;
  next.jy = 0;
  return next;
}

bool Planner::stopping_path_unsafe(const EgoState& state,
                                   const std::vector<PerceivedObstacle>& perceived,
                                   const EgoState& current) const {
  // Constant-deceleration stop from the candidate state along its heading.
  // Per obstacle: envelopes the vehicle is outside of must stay clear along
  // the whole stop; envelopes it already shares (e.g. traffic alongside)
  // only forbid cutting meaningfully deeper.
  const double dt = basis_.dt;
  std::vector<double> limit(perceived.size());
  for (size_t i = 0; i < perceived.size(); ++i) {
    const PerceivedObstacle& p = perceived[i];
    const double now = scale_factor(current.px, current.py, p.state.x, p.state.y,
                                    config_.ellipse.lx_min, config_.ellipse.ly_min);
    limit[i] = now >= 1.03 ? 1.03 : now - 0.03;
  }
  double v = state.v;
  double px = state.px;
  double py = state.py;
  double tau = dt;
  while (true) {
    for (size_t i = 0; i < perceived.size(); ++i) {
      const PerceivedObstacle& p = perceived[i];
      const double margin =
          scale_factor(px, py, p.state.x + p.state.vx * tau, p.state.y + p.state.vy * tau,
                       config_.ellipse.lx_min, config_.ellipse.ly_min);
      if (margin < limit[i]) return true;
    }
    if (v <= 0) return false;
    const double v_next = std::max(0.0, v + config_.bounds.ax_min * dt);
    const double travel = 0.5 * (v + v_next) * dt;
    px += travel * std::cos(state.theta);
    py += travel * std::sin(state.theta);
    v = v_next;
    tau += dt;
  }
}

PlanStep Planner::step(World& world, EgoState& ego, Rng& rng) {
  PlanStep out;
  const int nc = config_.candidates;
  const int slots = config_.obstacle_slots;

  const std::vector<PerceivedObstacle> perceived =
      observe(world, ego.px, ego.py, config_.perception, rng);
  std::vector<ObstacleConfiguration> configurations = build_configurations(
      perceived, ego.px, ego.py, nc, slots, config_.steps, basis_.dt, config_.config_counts);

  const TerminalTargets targets =
      sample_terminal_targets(ego, config_.lanes, config_.v_target, config_.horizon, nc,
                              config_.stagger_terminal, perceived, &config_.bounds,
                              config_.lead_gap);

  ProblemInputs inputs;
  inputs.initial = {ego.px, ego.py, ego.theta, ego.thetadot, ego.v * std::cos(ego.theta),
                    ego.v * std::sin(ego.theta)};
  inputs.x_target = targets.x;
  inputs.y_target = targets.y;
  inputs.alpha = alpha_;
  inputs.bounds = config_.bounds;
  inputs.consensus_steps = config_.consensus_steps;
  inputs.configurations.reserve(nc);
  std::vector<ObstacleGeometry> geometries;
  geometries.reserve(nc);
  for (const ObstacleConfiguration& cfg : configurations) {
    BoolArray mask(config_.steps, slots);
    for (int i = 0; i < slots; ++i) mask.col(i).setConstant(cfg.mask[i]);
    ObstacleGeometry geom;
    geom.ox = cfg.ox;
    geom.oy = cfg.oy;
    geom.ellipse = ellipse_schedule(config_.ellipse.lx_max, config_.ellipse.lx_min,
                                    config_.ellipse.ly_max, config_.ellipse.ly_min, config_.steps,
                                    mask);
    geometries.push_back(geom);
  }
  inputs.configurations = geometries;

  const ProblemData data = assemble(inputs, basis_, config_.solver);

  if (warm_) warm_->batch = shift_batch(warm_->batch);
  SolveResult result = solve(data, config_.solver, warm_ ? &*warm_ : nullptr);
  out.report = result.report;
  out.batch = result.batch;

  // The latest iterate seeds the next horizon either way; the shift happens
  // at the start of the next step, against the then-current state.
  warm_.emplace();
  warm_->batch = result.batch;
  warm_->lam_theta = result.workspace.lam_theta;
  warm_->lam_nh_x = result.workspace.lam_nh_x;
  warm_->lam_nh_y = result.workspace.lam_nh_y;
  warm_->lam_cons_x = result.workspace.lam_cons_x;
  warm_->lam_cons_y = result.workspace.lam_cons_y;
  warm_->lam_cons_theta = result.workspace.lam_cons_theta;

  const double worst_block = *std::max_element(result.report.final_residuals.begin(),
                                                result.report.final_residuals.end());
  const bool unusable = !result.batch.all_finite() ||
                        (!result.report.converged &&
                         worst_block > config_.fallback_residual_limit);
  if (unusable && executed_plan_) {
    // Keep executing the last usable plan; skip reselection.
    out.fallback = true;
    ++steps_since_plan_;
    const StateSamples samples = eval_states(*executed_plan_, basis_);
    const Matrix yaw_rate = basis_.W1.transpose() * executed_plan_->theta;
    const int row = std::min(steps_since_plan_, config_.steps - 1);
    out.selected = executed_selected_;
    out.executed = state_at(samples, yaw_rate, row, executed_selected_);
    out.consensus_report =
        consensus_invariance_check(*executed_plan_, geometries, basis_, config_.consensus_steps);
    if (stopping_path_unsafe(out.executed, perceived, ego)) {
      out.emergency = true;
      out.executed = braking_state(ego);
    }
    ego = out.executed;
    return out;
  }

  const StateSamples samples = eval_states(result.batch, basis_);
  const Matrix yaw_rate = basis_.W1.transpose() * result.batch.theta;

  out.scores.resize(nc);
  for (int j = 0; j < nc; ++j) {
    CandidateScore& score = out.scores[j];
    score.min_h = std::numeric_limits<double>::infinity();
    const ObstacleGeometry& geom = geometries[j];
    for (int k = 0; k < config_.steps; ++k) {
      for (int i = 0; i < slots; ++i) {
        if (!geom.ellipse.mask(k, i)) continue;
        const double d = scale_factor(samples.px(k, j), samples.py(k, j), geom.ox(k, i),
                                      geom.oy(k, i), geom.ellipse.lx(k, i), geom.ellipse.ly(k, i));
        score.min_h = std::min(score.min_h, d - 1.0);
      }
    }
    score.mean_abs_jerk =
        0.5 * (samples.jx.col(j).cwiseAbs().mean() + samples.jy.col(j).cwiseAbs().mean());
    score.accuracy_dev = (samples.speed.col(j).array() - config_.v_target).abs().mean();
    score.cost = -config_.weights.safety * std::min(score.min_h, 1e6) +
                 config_.weights.comfort * score.mean_abs_jerk +
                 config_.weights.accuracy * score.accuracy_dev;
  }
  out.selected = evaluate_and_select(out.scores, config_.weights, &out.no_safe_candidate);

  out.consensus_report =
      consensus_invariance_check(result.batch, geometries, basis_, config_.consensus_steps);

  out.executed = state_at(samples, yaw_rate, 0, out.selected);
  // Last line of defense: when the planned step could no longer stop
  // outside a perceived collision envelope, brake along the current
  // heading instead.
  if (stopping_path_unsafe(out.executed, perceived, ego)) {
    out.emergency = true;
    out.executed = braking_state(ego);
  }
  ego = out.executed;

  executed_plan_ = result.batch;
  executed_selected_ = out.selected;
  steps_since_plan_ = 0;
  return out;
}

void run_episode(World& world, const EgoState& initial, int steps, const PlannerConfig& config,
                 uint64_t seed, EpisodeLog& log) {
  Planner planner(config);
  Rng rng(seed);
  EgoState ego = initial;
  log.seed = seed;
  log.dt = planner.basis().dt;
  log.candidates = config.candidates;

  for (int s = 0; s < steps; ++s) {
    world.focus_x = ego.px;
    PlanStep plan = planner.step(world, ego, rng);
    step_world(world, planner.basis().dt, rng);

    EpisodeStep entry;
    entry.t = world.time;
    entry.state = ego;
    entry.selected = plan.selected;
    entry.solve_ms = plan.report.wall_time_ms;
    entry.iterations = plan.report.iterations;
    entry.converged = plan.report.converged;
    entry.fallback = plan.fallback;
    entry.consensus_deviation = plan.consensus_report.max_deviation;
    entry.consensus_min_h = plan.consensus_report.min_cross_config_h;
    entry.residuals = plan.report.final_residuals;
    entry.residual_history = plan.report.residual_history;

    entry.min_true_dist = std::numeric_limits<double>::infinity();
    entry.min_true_margin = std::numeric_limits<double>::infinity();
    for (const Obstacle& o : world.obstacles) {
      entry.min_true_dist =
          std::min(entry.min_true_dist, std::hypot(o.x - ego.px, o.y - ego.py));
      entry.min_true_margin =
          std::min(entry.min_true_margin,
                   scale_factor(ego.px, ego.py, o.x, o.y, config.ellipse.lx_min,
                                config.ellipse.ly_min));
    }
    log.steps.push_back(entry);
  }
}

MetricsReport compute_metrics(const EpisodeLog& log, double v_target) {
  if (log.steps.empty()) throw std::invalid_argument("compute_metrics: empty log");
  MetricsReport r;
  r.steps = static_cast<int>(log.steps.size());
  r.seed = log.seed;
  int collisions = 0;
  double dist_sum = 0;
  for (const EpisodeStep& s : log.steps) {
    if (std::isfinite(s.min_true_margin)) {
      ++r.steps_with_obstacles;
      dist_sum += s.min_true_dist;
      if (s.min_true_margin < 1.0) ++collisions;
    }
    r.mean_speed_error += std::abs(s.state.v - v_target);
    r.mean_abs_ax += std::abs(s.state.ax);
    r.mean_abs_ay += std::abs(s.state.ay);
    r.max_abs_jx = std::max(r.max_abs_jx, std::abs(s.state.jx));
    r.max_abs_jy = std::max(r.max_abs_jy, std::abs(s.state.jy));
    r.mean_abs_yaw_rate += std::abs(s.state.thetadot);
    r.mean_solve_ms += s.solve_ms;
    r.max_solve_ms = std::max(r.max_solve_ms, s.solve_ms);
  }
  const double n = static_cast<double>(r.steps);
  r.collision_rate = static_cast<double>(collisions) / n;
  r.mean_nearest_distance = r.steps_with_obstacles > 0 ? dist_sum / r.steps_with_obstacles : 0.0;
  r.mean_speed_error /= n;
  r.mean_abs_ax /= n;
  r.mean_abs_ay /= n;
  r.mean_abs_yaw_rate /= n;
  r.mean_solve_ms /= n;
  return r;
}

}  // namespace cpto
