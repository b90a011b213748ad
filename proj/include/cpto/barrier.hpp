#pragma once

#include "cpto/bezier.hpp"

namespace cpto {

/// Per-step safety-ellipse axes for M obstacle slots. Axes interpolate
/// linearly from the max value at step 0 down to the min value at the last
/// step. Rows with mask == false are virtual padding: axes zeroed and the
/// slot excluded from every residual, dual and penalty downstream.
struct EllipseSchedule {
  Matrix lx, ly;   // N x M [m]
  BoolArray mask;  // N x M, true = active obstacle slot
};

/// Barrier coefficient ramp alpha_k, from alpha_init at step 0 to 1 at the
/// last step.
struct BarrierCoefficients {
  Vector alpha;  // length N, entries in (0, 1]
};

/// Polar decomposition of the batch relative to the obstacle slots.
/// Rows are step-major: row k*M + i is (step k, obstacle slot i).
struct PolarState {
  Matrix omega;  // (N*M) x Nc [rad]
  Matrix scale;  // (N*M) x Nc, scaling factors d (>= 1 on active entries)
};

/// Barrier values h = d - 1 on active entries.
struct BarrierValues {
  Matrix h;  // (N*M) x Nc
};

/// One obstacle configuration as seen by the optimizer: predicted centers
/// plus the ellipse schedule that applies to it.
struct ObstacleGeometry {
  Matrix ox, oy;  // N x M predicted centers [m]
  EllipseSchedule ellipse;
};

struct ConsensusInvarianceReport {
  // Max pairwise positional deviation [m] between extracted consensus
  // segments across trajectories.
  double max_deviation = 0.0;
  // Min over (trajectory, configuration) of h on the consensus segment;
  // +inf when no configuration has an active obstacle there.
  double min_cross_config_h = 0.0;
};

/// Throws std::invalid_argument unless max >= min > 0 for both axes.
EllipseSchedule ellipse_schedule(double lx_max, double lx_min, double ly_max, double ly_min,
                                 int steps, const BoolArray& mask);

/// Throws std::invalid_argument unless 0 < alpha_init <= 1 and steps >= 2.
BarrierCoefficients barrier_coefficients(double alpha_init, int steps);

/// Four-quadrant angle of the axis-scaled offset; 0 when the offset is zero.
double polar_angle(double px, double py, double ox, double oy, double lx, double ly);

/// Ellipse scaling factor d = sqrt(((px-ox)/lx)^2 + ((py-oy)/ly)^2).
double scale_factor(double px, double py, double ox, double oy, double lx, double ly);

/// Barrier values h = d - 1 of a polar state.
BarrierValues barrier_values(const PolarState& polar);

/// Barrier contraction D+ = max(1, 1 + (1 - alpha_k)(D - 1)) with alpha_k
/// broadcast along obstacle slots and trajectory columns. scale_prev has
/// steps*obstacle_slots rows in step-major order.
Matrix d_update(const Matrix& scale_prev, const BarrierCoefficients& alpha, int obstacle_slots);

/// True where h_next - h_curr >= -alpha_k * h_curr (up to fp tolerance, so
/// the exact contraction boundary produced by d_update counts as satisfied).
/// Masked entries are true.
BoolArray bf_condition(const Matrix& h_next, const Matrix& h_curr,
                       const BarrierCoefficients& alpha, int obstacle_slots,
                       const BoolArray* mask = nullptr);

/// Validates the consensus-segment guarantees of a solved batch: pairwise
/// agreement of the extracted segments and the cross-configuration barrier
/// minimum evaluated from the segment positions.
ConsensusInvarianceReport consensus_invariance_check(const ControlPointBatch& batch,
                                                     const std::vector<ObstacleGeometry>& configs,
                                                     const BasisSet& basis, int consensus_steps);

}  // namespace cpto
