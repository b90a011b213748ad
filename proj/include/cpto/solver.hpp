#pragma once

#include <array>
#include <stdexcept>
#include <vector>

#include <Eigen/LU>

#include "cpto/barrier.hpp"
#include "cpto/bezier.hpp"

namespace cpto {

/// Raised when a primal system is rank-deficient beyond tolerance
/// (e.g. fewer grid steps than basis functions with no regularizing terms).
struct singular_system_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class SolveMode { paper_pseudoinverse, kkt_exact };

struct SolverConfig {
  double rho_theta = 5.0;
  double rho_x = 5.0;
  double rho_y = 5.0;
  double rho_obs = 6.0;
  double rho_cons_x = 4.0;
  double rho_cons_y = 4.0;
  double rho_cons_theta = 2.0;
  double relax_alpha = 1.5;  // over-relaxation coefficient, in (0, 2)
  double eps_pri = 0.1;      // in [0.1, 1]
  // Positional agreement required of the shared segment before the solve
  // counts as converged [m]. The coarse eps_pri alone stops while members
  // still disagree by an order of magnitude more than the tolerance the
  // forward-invariance validator holds the executed segment to.
  double eps_consensus = 1e-2;
  int iter_max = 200;
  Matrix Qx, Qy, Qtheta;  // (n+1) x (n+1) PSD smoothness weights
  double boundary_weight = 1e3;  // boundary-row scaling in paper-pseudoinverse mode
  SolveMode mode = SolveMode::kkt_exact;
};

/// Acceleration-energy smoothness matrix: weight * W2 W2^T. Vanishes on
/// straight lines, which keeps constant-velocity solutions exact.
Matrix smoothness_weight(const BasisSet& basis, double weight);

/// Table-driven defaults (penalties 5/5/5/6, consensus 4/4/2, smoothness
/// weights 100/100/150, stop at 0.1 within 200 iterations).
SolverConfig default_solver_config(const BasisSet& basis);

/// Throws std::invalid_argument when a config invariant is violated.
void validate(const SolverConfig& config, int degree);

struct StateBounds {
  double px_min = -500.0, px_max = 5000.0;
  double py_min = -9.0, py_max = 9.0;
  double ax_min = -4.0, ax_max = 3.0;
  double ay_min = -5.0, ay_max = 5.0;
  double jx_min = -6.0, jx_max = 6.0;
  double jy_min = -6.0, jy_max = 6.0;
  double v_min = 0.0, v_max = 24.0;
};

struct InitialState {
  double px = 0, py = 0;
  double theta = 0, yaw_rate = 0;
  double vx = 0, vy = 0;
};

struct ProblemInputs {
  InitialState initial;
  std::vector<ObstacleGeometry> configurations;  // one per candidate
  Vector x_target, y_target;                     // terminal positions, length Nc
  Vector alpha;                                  // barrier coefficients, length N
  StateBounds bounds;
  int consensus_steps = 0;
};

/// Assembled constant data for one horizon. Obstacle-related matrices are
/// (N*M) x Nc in step-major row order (row k*M + i); Ah row k*M + i is the
/// k-th basis column, shared across slots and candidates.
struct ProblemData {
  BasisSet basis;
  BoundaryMatrices boundary;
  ConsensusMatrices consensus;
  Vector alpha;
  Matrix Ah;              // (N*M) x (n+1)
  Matrix Ox, Oy, Lx, Ly;  // (N*M) x Nc
  Matrix mask;            // (N*M) x Nc of 0/1
  Matrix G;               // 6N x (n+1)
  Matrix Fx, Fy;          // 6N x Nc
  InitialState initial;
  Vector x_target, y_target;
  int candidates = 0;
  int obstacle_slots = 0;
};

/// One cached primal system: hard-constraint rows plus either a KKT
/// factorization or the normal equations of the weighted stacked system.
struct PrimalSystem {
  Matrix A;  // boundary rows
  Matrix H;  // stationarity matrix
  Eigen::FullPivLU<Matrix> lu;
  SolveMode mode = SolveMode::kkt_exact;
  double boundary_weight = 1.0;

  void factor(const Matrix& hessian, const Matrix& boundary_rows, SolveMode solve_mode,
              double weight);
  /// Solves for the control-point columns given stationarity rhs b and
  /// boundary rhs e (one column per candidate).
  Matrix solve(const Matrix& b, const Matrix& e) const;
};

struct SolverWorkspace {
  ControlPointBatch batch;
  Matrix Zx, Zy;            // 6N x Nc slack
  Matrix Zx_prev, Zy_prev;  // previous slack, for the over-relaxed dual step
  PolarState polar;
  Matrix Yx, Yy, Ytheta;  // consensus globals
  Matrix lam_theta;       // N x Nc, heading-fit dual (theta subproblem)
  Matrix lam_nh_x, lam_nh_y;  // N x Nc, nonholonomic-coupling duals (axis subproblems)
  Matrix lam_x, lam_y;    // (n+1) x Nc
  Matrix lam_obs_x, lam_obs_y;      // (N*M) x Nc
  Matrix lam_cons_x, lam_cons_y;    // 3Ns x Nc
  Matrix lam_cons_theta;            // Ns x Nc
  Matrix V;                         // N x Nc speed profile
  PrimalSystem sys_theta;
  std::vector<PrimalSystem> sys_x, sys_y;  // one per candidate (masks differ)
};

/// Residual blocks: nonholonomic coupling, obstacle equalities, consensus
/// equalities, bound violations. Each is an RMS over its active entries.
using ResidualBlocks = std::array<double, 4>;

struct SolveReport {
  int iterations = 0;
  bool converged = false;
  double wall_time_ms = 0.0;
  std::vector<ResidualBlocks> residual_history;
  ResidualBlocks final_residuals{0, 0, 0, 0};
};

struct SolveResult {
  ControlPointBatch batch;
  SolverWorkspace workspace;
  SolveReport report;
};

/// Warm-start carried between consecutive horizons: the shifted batch plus
/// the coupling duals negotiated by the previous solve. Obstacle and bound
/// duals are not carried (slot identities change between horizons).
struct WarmStart {
  ControlPointBatch batch;
  Matrix lam_theta, lam_nh_x, lam_nh_y;           // empty = start at zero
  Matrix lam_cons_x, lam_cons_y, lam_cons_theta;  // empty = start at zero
  Matrix lam_obs_x, lam_obs_y;  // rows for slots whose obstacle persists
};

ProblemData assemble(const ProblemInputs& inputs, const BasisSet& basis,
                     const SolverConfig& config);

/// Cold starts zero every dual and build the batch as the straight line
/// through the initial conditions. Warm starts take the previous horizon's
/// batch (already shifted by the caller) and optionally re-seed the
/// consensus and coupling duals so the agreement negotiated over previous
/// horizons is not discarded.
SolverWorkspace init_workspace(const ProblemData& data, const SolverConfig& config,
                               const WarmStart* warm_start = nullptr);

void update_c_theta(SolverWorkspace& ws, const ProblemData& data, const SolverConfig& config);
void update_c_x(SolverWorkspace& ws, const ProblemData& data, const SolverConfig& config);
void update_c_y(SolverWorkspace& ws, const ProblemData& data, const SolverConfig& config);
void update_slack(SolverWorkspace& ws, const ProblemData& data);
void update_omega(SolverWorkspace& ws, const ProblemData& data);

/// Scaling-factor step: the geometric fit of the current positions floored
/// by the barrier contraction of the previous scale (via d_update), so the
/// requested margin never decays faster than the barrier allows and the
/// obstacle equalities become exactly satisfiable for non-binding slots.
void update_scale_factors(SolverWorkspace& ws, const ProblemData& data);

void update_consensus(SolverWorkspace& ws, const ProblemData& data);
void update_duals(SolverWorkspace& ws, const ProblemData& data, const SolverConfig& config);

ResidualBlocks primal_residual(const SolverWorkspace& ws, const ProblemData& data);

/// Max pairwise positional deviation of the extracted consensus segments
/// across candidates [m]; 0 without consensus or with one candidate.
double consensus_deviation(const SolverWorkspace& ws, const ProblemData& data);

/// Over-relaxed dual combination (1-alpha)*slack_delta + alpha*residual.
/// With alpha == 1 this reduces bitwise to the plain residual.
Matrix over_relaxed_term(const Matrix& slack_delta, const Matrix& residual, double alpha);

SolveResult solve(const ProblemData& data, const SolverConfig& config,
                  const WarmStart* warm_start = nullptr);

}  // namespace cpto
