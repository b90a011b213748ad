#include "cpto/bezier.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cpto {

namespace {

double binomial(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  double out = 1.0;
  for (int j = 0; j < k; ++j) {
    out = out * static_cast<double>(n - j) / static_cast<double>(j + 1);
  }
  return out;
}

}  // namespace

double bernstein(int i, int n, double u) {
  if (i < 0 || i > n) return 0.0;
  return binomial(n, i) * std::pow(u, i) * std::pow(1.0 - u, n - i);
}

double bernstein_derivative(int i, int n, double u, int order) {
  if (order == 0) return bernstein(i, n, u);
  if (order < 0 || order > 3) {
    throw std::invalid_argument("bernstein_derivative: order must be in [0, 3]");
  }
  if (order > n) return 0.0;
  // d^m/du^m B_{i,n} = n!/(n-m)! * sum_r (-1)^r C(m,r) B_{i-m+r, n-m}
  double falling = 1.0;
  for (int j = 0; j < order; ++j) falling *= static_cast<double>(n - j);
  double acc = 0.0;
  for (int r = 0; r <= order; ++r) {
    const double sign = (r % 2 == 0) ? 1.0 : -1.0;
    acc += sign * binomial(order, r) * bernstein(i - order + r, n - order, u);
  }
  return falling * acc;
}

BasisSet build_basis(int degree, int steps, double horizon) {
  if (degree < 3) throw std::invalid_argument("build_basis: degree must be >= 3");
  if (steps < 2) throw std::invalid_argument("build_basis: steps must be >= 2");
  if (!(horizon > 0)) throw std::invalid_argument("build_basis: horizon must be > 0");

  BasisSet basis;
  basis.degree = degree;
  basis.steps = steps;
  basis.horizon = horizon;
  basis.dt = horizon / steps;
  const int rows = degree + 1;
  basis.W.resize(rows, steps);
  basis.W1.resize(rows, steps);
  basis.W2.resize(rows, steps);
  basis.W3.resize(rows, steps);

  const double t1 = 1.0 / horizon;
  const double t2 = t1 * t1;
  const double t3 = t2 * t1;
  for (int c = 0; c < steps; ++c) {
    const double u = static_cast<double>(c + 1) / steps;
    for (int i = 0; i < rows; ++i) {
      basis.W(i, c) = bernstein(i, degree, u);
      basis.W1(i, c) = bernstein_derivative(i, degree, u, 1) * t1;
      basis.W2(i, c) = bernstein_derivative(i, degree, u, 2) * t2;
      basis.W3(i, c) = bernstein_derivative(i, degree, u, 3) * t3;
    }
  }
  return basis;
}

BoundaryMatrices build_boundary(const BasisSet& basis) {
  const int cols = basis.degree + 1;
  const int last = basis.steps - 1;
  BoundaryMatrices b;
  // Step 0 (nu = 0) lives outside the sampled grid and is exposed only
  // here; by endpoint interpolation its rows are exact in the control
  // points. The terminal rows coincide with the last grid column (nu = 1).
  b.A0.resize(2, cols);
  for (int i = 0; i < cols; ++i) {
    b.A0(0, i) = bernstein(i, basis.degree, 0.0);
    b.A0(1, i) = bernstein_derivative(i, basis.degree, 0.0, 1) / basis.horizon;
  }
  b.Af_xy = basis.W.col(last).transpose();
  b.Af_theta.resize(2, cols);
  b.Af_theta.row(0) = basis.W.col(last).transpose();
  b.Af_theta.row(1) = basis.W1.col(last).transpose();
  return b;
}

ConsensusMatrices build_consensus(const BasisSet& basis, int consensus_steps) {
  if (consensus_steps < 0 || consensus_steps >= basis.steps) {
    throw std::out_of_range("build_consensus: consensus steps must satisfy 0 <= Ns < N, got " +
                            std::to_string(consensus_steps));
  }
  ConsensusMatrices cons;
  cons.steps = consensus_steps;
  const int rows = basis.degree + 1;
  cons.xy.resize(rows, 3 * consensus_steps);
  cons.theta.resize(rows, consensus_steps);
  if (consensus_steps == 0) return cons;
  cons.xy << basis.W.leftCols(consensus_steps), basis.W1.leftCols(consensus_steps),
      basis.W2.leftCols(consensus_steps);
  cons.theta = basis.W.leftCols(consensus_steps);
  return cons;
}

StateSamples eval_states(const ControlPointBatch& batch, const BasisSet& basis) {
  if (batch.x.rows() != basis.degree + 1 || batch.y.rows() != basis.degree + 1 ||
      batch.theta.rows() != basis.degree + 1) {
    throw std::invalid_argument("eval_states: control point rows do not match basis degree");
  }
  if (batch.y.cols() != batch.x.cols() || batch.theta.cols() != batch.x.cols()) {
    throw std::invalid_argument("eval_states: control point matrices must share shape");
  }
  StateSamples s;
  s.px = basis.W.transpose() * batch.x;
  s.py = basis.W.transpose() * batch.y;
  s.theta = basis.W.transpose() * batch.theta;
  s.vx = basis.W1.transpose() * batch.x;
  s.vy = basis.W1.transpose() * batch.y;
  s.ax = basis.W2.transpose() * batch.x;
  s.ay = basis.W2.transpose() * batch.y;
  s.jx = basis.W3.transpose() * batch.x;
  s.jy = basis.W3.transpose() * batch.y;
  s.speed = (s.vx.array().square() + s.vy.array().square()).sqrt().matrix();
  return s;
}

}  // namespace cpto
