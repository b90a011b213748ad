#pragma once

#include <Eigen/Dense>

namespace cpto {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using BoolArray = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Bernstein basis matrices sampled on the planning grid.
///
/// The grid covers nu_k = k/N for k = 1..N (column c of W corresponds to
/// k = c+1). Step 0 of the planning horizon is the first grid column; it is
/// the row the boundary matrices pin to the current state. W1..W3 are the
/// analytic first/second/third time derivatives of the basis, so that
/// W1^T C is the velocity sequence of the curve with control points C.
struct BasisSet {
  int degree = 0;       // n
  int steps = 0;        // N
  double horizon = 0;   // T [s]
  double dt = 0;        // T / N
  Matrix W;             // (n+1) x N basis values
  Matrix W1, W2, W3;    // (n+1) x N time-derivative values
};

/// Rows extracted from the basis at the first and last grid steps.
struct BoundaryMatrices {
  Matrix A0;        // 2 x (n+1): value and first-derivative rows at step 0
  Matrix Af_xy;     // 1 x (n+1): value row at the final step
  Matrix Af_theta;  // 2 x (n+1): value and first-derivative rows at the final step
};

/// Consensus extraction matrices for the first Ns grid steps.
/// xy stacks value/velocity/acceleration blocks so xy^T C is
/// [positions; velocities; accelerations] (3*Ns rows); theta carries
/// value rows only. steps == 0 disables consensus entirely.
struct ConsensusMatrices {
  int steps = 0;  // Ns
  Matrix xy;      // (n+1) x 3*Ns
  Matrix theta;   // (n+1) x Ns
};

/// Decision variables for a batch of candidate trajectories, one column each.
struct ControlPointBatch {
  Matrix x, y, theta;  // (n+1) x Nc

  int count() const { return static_cast<int>(x.cols()); }
  int order() const { return static_cast<int>(x.rows()) - 1; }
  bool all_finite() const {
    return x.allFinite() && y.allFinite() && theta.allFinite();
  }
};

/// Trajectory samples on the grid, N x Nc each.
struct StateSamples {
  Matrix px, py, theta;
  Matrix vx, vy, ax, ay, jx, jy;
  Matrix speed;  // sqrt(vx^2 + vy^2), elementwise
};

/// Single Bernstein polynomial B_{i,n}(u), u in [0, 1].
double bernstein(int i, int n, double u);

/// Analytic d^m/du^m of B_{i,n} at u, for m in {1, 2, 3}.
double bernstein_derivative(int i, int n, double u, int order);

/// Throws std::invalid_argument unless degree >= 3, steps >= 2, horizon > 0.
BasisSet build_basis(int degree, int steps, double horizon);

BoundaryMatrices build_boundary(const BasisSet& basis);

/// Throws std::out_of_range unless 0 <= consensus_steps < basis.steps.
/// consensus_steps == 0 yields empty matrices (consensus switched off).
ConsensusMatrices build_consensus(const BasisSet& basis, int consensus_steps);

/// Throws std::invalid_argument on degree mismatch between batch and basis.
StateSamples eval_states(const ControlPointBatch& batch, const BasisSet& basis);

}  // namespace cpto
