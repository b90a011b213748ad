#pragma once

// Shared fixtures and independent oracles for the solver tests and the
// acceptance suite. The oracles assemble each primal subproblem naively,
// straight from the problem definition, and solve it with a different
// factorization than the implementation (QR/full-pivot LU on the explicit
// stacked system instead of cached factorizations).

#include <cmath>
#include <random>

#include <Eigen/QR>

#include "cpto/solver.hpp"
#include "cpto/world.hpp"

namespace cpto::testing {

inline BoolArray full_mask(int steps, int slots) {
  BoolArray mask(steps, slots);
  mask.setConstant(true);
  return mask;
}

struct RandomInstance {
  ProblemData data;
  SolverConfig config;
};

inline RandomInstance make_random_instance(Rng& rng, SolveMode mode) {
  std::uniform_int_distribution<int> degree_pick(3, 4);
  std::uniform_int_distribution<int> steps_pick(6, 8);
  std::uniform_int_distribution<int> nc_pick(1, 2);
  std::uniform_int_distribution<int> slots_pick(0, 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);

  const int degree = degree_pick(rng);
  const int steps = steps_pick(rng);
  const int nc = nc_pick(rng);
  const int slots = slots_pick(rng);
  std::uniform_int_distribution<int> ns_pick(0, std::min(2, steps - 1));
  const int ns = ns_pick(rng);

  const BasisSet basis = build_basis(degree, steps, 2.0 + 2.0 * unit(rng));

  SolverConfig config;
  config.mode = mode;
  config.boundary_weight = 1.0;  // plain pseudoinverse; keeps the stack well conditioned
  config.rho_theta = 0.5 + 5.0 * unit(rng);
  config.rho_x = 0.5 + 5.0 * unit(rng);
  config.rho_y = 0.5 + 5.0 * unit(rng);
  config.rho_obs = 0.5 + 5.0 * unit(rng);
  config.rho_cons_x = 0.5 + 4.0 * unit(rng);
  config.rho_cons_y = 0.5 + 4.0 * unit(rng);
  config.rho_cons_theta = 0.5 + 2.0 * unit(rng);
  const int n1 = degree + 1;
  Vector qx(n1), qy(n1), qt(n1);
  for (int i = 0; i < n1; ++i) {
    qx(i) = 0.5 + 2.0 * unit(rng);
    qy(i) = 0.5 + 2.0 * unit(rng);
    qt(i) = 0.5 + 2.0 * unit(rng);
  }
  config.Qx = qx.asDiagonal();
  config.Qy = qy.asDiagonal();
  config.Qtheta = qt.asDiagonal();

  ProblemInputs inputs;
  inputs.initial = {2.0 * sym(rng), 2.0 * sym(rng), 0.3 * sym(rng),
                    0.2 * sym(rng), 2.0 * sym(rng), 0.5 * sym(rng)};
  inputs.consensus_steps = ns;
  inputs.x_target.resize(nc);
  inputs.y_target.resize(nc);
  for (int j = 0; j < nc; ++j) {
    inputs.x_target(j) = inputs.initial.px + inputs.initial.vx * basis.horizon + sym(rng);
    inputs.y_target(j) = inputs.initial.py + sym(rng);
  }
  inputs.alpha = barrier_coefficients(0.2, steps).alpha;
  inputs.bounds.px_min = -25.0;
  inputs.bounds.px_max = 25.0;
  inputs.bounds.py_min = -8.0;
  inputs.bounds.py_max = 8.0;
  inputs.bounds.ax_min = -4.0;
  inputs.bounds.ax_max = 3.0;
  inputs.bounds.ay_min = -5.0;
  inputs.bounds.ay_max = 5.0;
  inputs.bounds.jx_min = -6.0;
  inputs.bounds.jx_max = 6.0;
  inputs.bounds.jy_min = -6.0;
  inputs.bounds.jy_max = 6.0;

  for (int j = 0; j < nc; ++j) {
    ObstacleGeometry geom;
    geom.ox = Matrix::Zero(steps, slots);
    geom.oy = Matrix::Zero(steps, slots);
    BoolArray mask(steps, slots);
    for (int i = 0; i < slots; ++i) {
      const bool active = unit(rng) < 0.7;
      mask.col(i).setConstant(active);
      for (int k = 0; k < steps; ++k) {
        geom.ox(k, i) = 5.0 * sym(rng);
        geom.oy(k, i) = 5.0 * sym(rng);
      }
    }
    if (slots > 0) {
      geom.ellipse = ellipse_schedule(1.0 + 2.0 * unit(rng), 0.8, 1.0 + unit(rng), 0.6, steps, mask);
    } else {
      geom.ellipse.lx.resize(steps, 0);
      geom.ellipse.ly.resize(steps, 0);
      geom.ellipse.mask.resize(steps, 0);
    }
    inputs.configurations.push_back(geom);
  }

  RandomInstance instance;
  instance.data = assemble(inputs, basis, config);
  instance.config = config;
  return instance;
}

/// Fills every workspace field with bounded random values of the right
/// shape, so a single primal update can be checked in isolation.
inline void randomize_workspace(SolverWorkspace& ws, const ProblemData& data, Rng& rng) {
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  auto fill = [&](Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = sym(rng);
    }
  };
  fill(ws.batch.x);
  fill(ws.batch.y);
  fill(ws.batch.theta);
  ws.batch.x.array() += data.initial.px;
  ws.batch.y.array() += data.initial.py;
  fill(ws.lam_theta);
  fill(ws.lam_nh_x);
  fill(ws.lam_nh_y);
  fill(ws.lam_x);
  fill(ws.lam_y);
  fill(ws.lam_obs_x);
  fill(ws.lam_obs_y);
  fill(ws.lam_cons_x);
  fill(ws.lam_cons_y);
  fill(ws.lam_cons_theta);
  fill(ws.Yx);
  fill(ws.Yy);
  fill(ws.Ytheta);
  fill(ws.Zx);
  ws.Zx = ws.Zx.cwiseAbs();
  fill(ws.Zy);
  ws.Zy = ws.Zy.cwiseAbs();
  for (Eigen::Index r = 0; r < ws.V.rows(); ++r) {
    for (Eigen::Index c = 0; c < ws.V.cols(); ++c) ws.V(r, c) = 0.5 + std::abs(sym(rng));
  }
  fill(ws.polar.omega);
  fill(ws.polar.scale);
  ws.polar.scale = ws.polar.scale.cwiseAbs().array() + 1.0;
}

/// Dense oracle for the x/y updates: per-column stacked system assembled
/// with explicit loops and solved by QR (pseudoinverse mode) or full-pivot LU on
/// the KKT system (exact mode).
inline Matrix oracle_update_axis(const SolverWorkspace& ws, const ProblemData& data,
                                 const SolverConfig& config, bool axis_x) {
  const BasisSet& basis = data.basis;
  const int n1 = basis.degree + 1;
  const int nc = data.candidates;
  const double rho_bound = axis_x ? config.rho_x : config.rho_y;
  const double rho_cons = axis_x ? config.rho_cons_x : config.rho_cons_y;
  const Matrix& q = axis_x ? config.Qx : config.Qy;
  const Matrix& f = axis_x ? data.Fx : data.Fy;
  const Matrix& z = axis_x ? ws.Zx : ws.Zy;
  const Matrix& lam = axis_x ? ws.lam_x : ws.lam_y;
  const Matrix& lam_nh = axis_x ? ws.lam_nh_x : ws.lam_nh_y;
  const Matrix& lam_obs = axis_x ? ws.lam_obs_x : ws.lam_obs_y;
  const Matrix& lam_cons = axis_x ? ws.lam_cons_x : ws.lam_cons_y;
  const Matrix& y_cons = axis_x ? ws.Yx : ws.Yy;
  const Matrix& centers = axis_x ? data.Ox : data.Oy;
  const Matrix& axes = axis_x ? data.Lx : data.Ly;

  Matrix a(3, n1);
  a << data.boundary.A0, data.boundary.Af_xy;

  Matrix solution(n1, nc);
  for (int j = 0; j < nc; ++j) {
    Matrix h = q + rho_bound * data.G.transpose() * data.G +
               config.rho_theta * basis.W1 * basis.W1.transpose();
    Vector b = Vector::Zero(n1);
    b -= lam.col(j);
    b -= basis.W1 * lam_nh.col(j);
    for (int k = 0; k < basis.steps; ++k) {
      const double heading = basis.W.col(k).dot(ws.batch.theta.col(j));
      const double trig = axis_x ? std::cos(heading) : std::sin(heading);
      b += config.rho_theta * ws.V(k, j) * trig * basis.W1.col(k);
    }
    for (int r = 0; r < data.Ah.rows(); ++r) {
      if (data.mask(r, j) == 0.0) continue;
      const Vector row = data.Ah.row(r).transpose();
      h += config.rho_obs * row * row.transpose();
      const double trig =
          axis_x ? std::cos(ws.polar.omega(r, j)) : std::sin(ws.polar.omega(r, j));
      const double pull = centers(r, j) + axes(r, j) * ws.polar.scale(r, j) * trig;
      b += -lam_obs(r, j) * row + config.rho_obs * pull * row;
    }
    if (data.consensus.steps > 0) {
      h += rho_cons * data.consensus.xy * data.consensus.xy.transpose();
      b += -data.consensus.xy * lam_cons.col(j) + rho_cons * data.consensus.xy * y_cons.col(j);
    }
    b += rho_bound * data.G.transpose() * (f.col(j) - z.col(j));

    Vector e(3);
    e << (axis_x ? data.initial.px : data.initial.py),
        (axis_x ? data.initial.vx : data.initial.vy),
        (axis_x ? data.x_target(j) : data.y_target(j));

    if (config.mode == SolveMode::kkt_exact) {
      Matrix kkt = Matrix::Zero(n1 + 3, n1 + 3);
      kkt.topLeftCorner(n1, n1) = h;
      kkt.topRightCorner(n1, 3) = a.transpose();
      kkt.bottomLeftCorner(3, n1) = a;
      Vector rhs(n1 + 3);
      rhs << b, e;
      solution.col(j) = Eigen::FullPivLU<Matrix>(kkt).solve(rhs).head(n1);
    } else {
      Matrix stack(n1 + 3, n1);
      stack.topRows(n1) = h;
      stack.bottomRows(3) = config.boundary_weight * a;
      Vector rhs(n1 + 3);
      rhs << b, config.boundary_weight * e;
      solution.col(j) = stack.colPivHouseholderQr().solve(rhs);
    }
  }
  return solution;
}

/// Dense oracle for the heading update.
inline Matrix oracle_update_theta(const SolverWorkspace& ws, const ProblemData& data,
                                  const SolverConfig& config) {
  const BasisSet& basis = data.basis;
  const int n1 = basis.degree + 1;
  const int nc = data.candidates;

  Matrix a(4, n1);
  a << data.boundary.A0, data.boundary.Af_theta;

  Matrix h = config.Qtheta + config.rho_theta * basis.W * basis.W.transpose();
  if (data.consensus.steps > 0) {
    h += config.rho_cons_theta * data.consensus.theta * data.consensus.theta.transpose();
  }

  Matrix solution(n1, nc);
  for (int j = 0; j < nc; ++j) {
    Vector b = Vector::Zero(n1);
    b -= basis.W * ws.lam_theta.col(j);
    for (int k = 0; k < basis.steps; ++k) {
      const double vy = basis.W1.col(k).dot(ws.batch.y.col(j));
      const double vx = basis.W1.col(k).dot(ws.batch.x.col(j));
      b += config.rho_theta * std::atan2(vy, vx) * basis.W.col(k);
    }
    if (data.consensus.steps > 0) {
      b += -data.consensus.theta * ws.lam_cons_theta.col(j) +
           config.rho_cons_theta * data.consensus.theta * ws.Ytheta.col(j);
    }
    Vector e(4);
    e << data.initial.theta, data.initial.yaw_rate, 0.0, 0.0;

    if (config.mode == SolveMode::kkt_exact) {
      Matrix kkt = Matrix::Zero(n1 + 4, n1 + 4);
      kkt.topLeftCorner(n1, n1) = h;
      kkt.topRightCorner(n1, 4) = a.transpose();
      kkt.bottomLeftCorner(4, n1) = a;
      Vector rhs(n1 + 4);
      rhs << b, e;
      solution.col(j) = Eigen::FullPivLU<Matrix>(kkt).solve(rhs).head(n1);
    } else {
      Matrix stack(n1 + 4, n1);
      stack.topRows(n1) = h;
      stack.bottomRows(4) = config.boundary_weight * a;
      Vector rhs(n1 + 4);
      rhs << b, config.boundary_weight * e;
      solution.col(j) = stack.colPivHouseholderQr().solve(rhs);
    }
  }
  return solution;
}

/// Finite-difference derivative oracle on a unit-scale random batch: the
/// worst deviation between the analytic velocity rows and central
/// differences of the sampled positions.
inline double max_fd_error_probe(int steps) {
  const BasisSet basis = build_basis(10, steps, 4.0);
  std::mt19937_64 rng(123);
  std::uniform_real_distribution<double> unit(-0.2, 0.2);
  Matrix c = Matrix::NullaryExpr(11, 4, [&]() { return unit(rng); });
  const Matrix p = basis.W.transpose() * c;
  const Matrix v = basis.W1.transpose() * c;
  double worst = 0.0;
  for (int k = 1; k + 1 < steps; ++k) {
    for (int j = 0; j < 4; ++j) {
      worst = std::max(worst, std::abs((p(k + 1, j) - p(k - 1, j)) / (2.0 * basis.dt) - v(k, j)));
    }
  }
  return worst;
}

/// Obstacle-free straight-road fixture used by the convergence criteria.
inline ProblemInputs straight_road_inputs(int steps, int candidates, double horizon,
                                          double speed) {
  ProblemInputs inputs;
  inputs.initial = {0.0, 0.0, 0.0, 0.0, speed, 0.0};
  inputs.consensus_steps = 6;
  inputs.alpha = barrier_coefficients(0.2, steps).alpha;
  inputs.x_target = Vector::Constant(candidates, speed * horizon);
  inputs.y_target = Vector::Zero(candidates);
  for (int j = 0; j < candidates; ++j) {
    ObstacleGeometry geom;
    geom.ox.resize(steps, 0);
    geom.oy.resize(steps, 0);
    geom.ellipse.lx.resize(steps, 0);
    geom.ellipse.ly.resize(steps, 0);
    geom.ellipse.mask.resize(steps, 0);
    inputs.configurations.push_back(geom);
  }
  return inputs;
}

}  // namespace cpto::testing
