#include "cpto/barrier.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace cpto {

EllipseSchedule ellipse_schedule(double lx_max, double lx_min, double ly_max, double ly_min,
                                 int steps, const BoolArray& mask) {
  if (!(lx_min > 0) || !(ly_min > 0)) {
    throw std::invalid_argument("ellipse_schedule: axis minima must be positive");
  }
  if (lx_min > lx_max || ly_min > ly_max) {
    throw std::invalid_argument("ellipse_schedule: axis min exceeds max");
  }
  if (steps < 2 || mask.rows() != steps) {
    throw std::invalid_argument("ellipse_schedule: mask rows must equal steps >= 2");
  }
  EllipseSchedule out;
  out.mask = mask;
  const int slots = static_cast<int>(mask.cols());
  out.lx = Matrix::Zero(steps, slots);
  out.ly = Matrix::Zero(steps, slots);
  for (int k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) / (steps - 1);
    const double lx = lx_max + t * (lx_min - lx_max);
    const double ly = ly_max + t * (ly_min - ly_max);
    for (int i = 0; i < slots; ++i) {
      if (mask(k, i)) {
        out.lx(k, i) = lx;
        out.ly(k, i) = ly;
      }
    }
  }
  return out;
}

BarrierCoefficients barrier_coefficients(double alpha_init, int steps) {
  if (!(alpha_init > 0) || alpha_init > 1) {
    throw std::invalid_argument("barrier_coefficients: alpha_init must be in (0, 1]");
  }
  if (steps < 2) throw std::invalid_argument("barrier_coefficients: steps must be >= 2");
  BarrierCoefficients out;
  out.alpha.resize(steps);
  for (int k = 0; k < steps; ++k) {
    out.alpha(k) = alpha_init + static_cast<double>(k) * (1.0 - alpha_init) / (steps - 1);
  }
  return out;
}

double polar_angle(double px, double py, double ox, double oy, double lx, double ly) {
  return std::atan2(lx * (py - oy), ly * (px - ox));
}

double scale_factor(double px, double py, double ox, double oy, double lx, double ly) {
  const double ex = (px - ox) / lx;
  const double ey = (py - oy) / ly;
  return std::sqrt(ex * ex + ey * ey);
}

BarrierValues barrier_values(const PolarState& polar) {
  BarrierValues values;
  values.h = polar.scale.array() - 1.0;
  return values;
}

Matrix d_update(const Matrix& scale_prev, const BarrierCoefficients& alpha, int obstacle_slots) {
  if (obstacle_slots < 1 || scale_prev.rows() % obstacle_slots != 0 ||
      scale_prev.rows() / obstacle_slots != alpha.alpha.size()) {
    throw std::invalid_argument("d_update: rows must equal steps * obstacle_slots");
  }
  Matrix out(scale_prev.rows(), scale_prev.cols());
  for (Eigen::Index r = 0; r < scale_prev.rows(); ++r) {
    const double a = alpha.alpha(r / obstacle_slots);
    for (Eigen::Index c = 0; c < scale_prev.cols(); ++c) {
      out(r, c) = std::max(1.0, 1.0 + (1.0 - a) * (scale_prev(r, c) - 1.0));
    }
  }
  return out;
}

BoolArray bf_condition(const Matrix& h_next, const Matrix& h_curr,
                       const BarrierCoefficients& alpha, int obstacle_slots,
                       const BoolArray* mask) {
  if (h_next.rows() != h_curr.rows() || h_next.cols() != h_curr.cols()) {
    throw std::invalid_argument("bf_condition: shape mismatch");
  }
  BoolArray out(h_next.rows(), h_next.cols());
  for (Eigen::Index r = 0; r < h_next.rows(); ++r) {
    const double a = alpha.alpha(r / obstacle_slots);
    for (Eigen::Index c = 0; c < h_next.cols(); ++c) {
      if (mask && !(*mask)(r, c)) {
        out(r, c) = true;
        continue;
      }
      const double hc = h_curr(r, c);
      const double tol = 1e-12 * std::max(1.0, std::abs(hc));
      out(r, c) = (h_next(r, c) - hc) >= (-a * hc - tol);
    }
  }
  return out;
}

ConsensusInvarianceReport consensus_invariance_check(const ControlPointBatch& batch,
                                                     const std::vector<ObstacleGeometry>& configs,
                                                     const BasisSet& basis, int consensus_steps) {
  ConsensusInvarianceReport report;
  report.min_cross_config_h = std::numeric_limits<double>::infinity();
  if (consensus_steps <= 0) return report;

  const Matrix px = basis.W.leftCols(consensus_steps).transpose() * batch.x;   // Ns x Nc
  const Matrix py = basis.W.leftCols(consensus_steps).transpose() * batch.y;

  const int count = batch.count();
  for (int a = 0; a < count; ++a) {
    for (int b = a + 1; b < count; ++b) {
      const double dx = (px.col(a) - px.col(b)).cwiseAbs().maxCoeff();
      const double dy = (py.col(a) - py.col(b)).cwiseAbs().maxCoeff();
      report.max_deviation = std::max({report.max_deviation, dx, dy});
    }
  }

  for (int j = 0; j < count; ++j) {
    for (const ObstacleGeometry& geom : configs) {
      const int slots = static_cast<int>(geom.ox.cols());
      for (int k = 0; k < consensus_steps; ++k) {
        for (int i = 0; i < slots; ++i) {
          if (!geom.ellipse.mask(k, i)) continue;
          const double d = scale_factor(px(k, j), py(k, j), geom.ox(k, i), geom.oy(k, i),
                                        geom.ellipse.lx(k, i), geom.ellipse.ly(k, i));
          report.min_cross_config_h = std::min(report.min_cross_config_h, d - 1.0);
        }
      }
    }
  }
  return report;
}

}  // namespace cpto
