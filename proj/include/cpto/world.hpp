#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "cpto/barrier.hpp"
#include "cpto/bezier.hpp"

namespace cpto {

using Rng = std::mt19937_64;

struct Obstacle {
  int id = 0;
  double x = 0, y = 0;    // center [m]
  double vx = 0, vy = 0;  // [m/s]
  double length = 4.5, width = 2.0;
  int lane = 0;
  double desired_speed = 15.0;   // IDM set speed
  double existence_range = 35.0; // distance below which detection is certain
};

struct PerceptionModel {
  double sigma_px = 1.0;   // [m]
  double sigma_py = 0.5;   // [m]
  double sigma_vx = 0.5;   // [m/s]
  double sigma_vy = 0.1;   // [m/s]
  double fully_observed_dist = 15.0;  // s_d [m]
  double existence_mean = 35.0;       // s_e distribution [m]
  double existence_std = 10.0;
  double rear_range = 10.0;     // rear longitudinal perception range [m]
  double lateral_range = 10.0;  // lateral perception range [m]
};

struct PerceivedObstacle {
  Obstacle state;   // sampled (noisy) snapshot
  bool certain = false;
  double distance = 0;  // true distance at observation time
};

/// One obstacle hypothesis handed to the optimizer: the k nearest perceived
/// obstacles padded with virtual entries up to the slot count.
struct ObstacleConfiguration {
  std::vector<Obstacle> obstacles;  // length = slot count; virtual entries zeroed
  std::vector<bool> mask;           // length = slot count
  Matrix ox, oy;                    // N x slots constant-velocity predictions
};

struct IdmParams {
  double desired_speed = 15.0;  // v0 [m/s]
  double time_headway = 1.0;    // [s]
  double min_gap = 10.0;        // s0 [m]
  double max_accel = 1.4;       // a [m/s^2]
  double comfort_decel = 2.0;   // b [m/s^2]
  double exponent = 4.0;        // delta
  double noise_variance = 0.2;  // additive accel noise [(m/s^2)^2]
};

struct LaneLayout {
  int count = 5;
  double width = 3.6;
  double first_center_y = -7.2;

  double center(int lane) const { return first_center_y + lane * width; }
  int nearest_lane(double y) const;
  double left_edge() const { return first_center_y - width / 2; }
  double right_edge() const { return center(count - 1) + width / 2; }
};

enum class WorldMode { constant_velocity, idm, replay, static_field };

struct ReplayFrame {
  int frame = 0;
  double x = 0, y = 0, vx = 0, vy = 0;
};

struct ReplayLog {
  double frame_rate_hz = 12.5;
  std::map<int, std::vector<ReplayFrame>> tracks;  // vehicle id -> contiguous frames
};

struct World {
  WorldMode mode = WorldMode::constant_velocity;
  std::vector<Obstacle> obstacles;
  double time = 0;
  LaneLayout lanes;
  IdmParams idm;
  // Static-field spawning state: obstacles appear ahead of focus_x with
  // exponential gaps of the given mean across the whole road.
  double focus_x = 0;
  double spawn_frontier = 0;
  double spawn_gap_mean = 15.0;
  double spawn_lookahead = 120.0;
  double despawn_behind = 60.0;
  int next_id = 0;
  int spawned_count = 0;
  double existence_mean = 35.0, existence_std = 10.0, existence_floor = 15.0;
  ReplayLog replay;
  std::map<int, double> existence_cache;  // replay vehicles, drawn at first sight
};

/// Distance-dependent noise level: 0 inside the fully-observed threshold,
/// otherwise sigma_bar / max(10/(s_dis + 0.1), 1).
double noise_sigma(double sigma_bar, double distance, double fully_observed_dist);

/// The raw formula with the threshold disabled.
double noise_sigma_raw(double sigma_bar, double distance);

std::vector<PerceivedObstacle> observe(const World& world, double ego_x, double ego_y,
                                       const PerceptionModel& model, Rng& rng);

/// Constant-velocity prediction rows for grid steps 1..N.
void predict_constant_velocity(const Obstacle& obstacle, int steps, double dt, int slot,
                               Matrix& ox, Matrix& oy);

double idm_accel_deterministic(double gap, double v, double v_lead, const IdmParams& params);

/// IDM acceleration with additive Gaussian noise, clamped to [accel_min,
/// accel_max]. Nonpositive gaps brake at accel_min.
double idm_accel(double gap, double v, double v_lead, const IdmParams& params, Rng& rng,
                 double accel_min = -4.0, double accel_max = 3.0);

/// Nearest-obstacle configurations with a nondecreasing count ladder.
/// counts may be empty, in which case the default ladder is used
/// ({2,3,3,4,5} for five candidates, otherwise linear from 2 to the slot
/// count). Ties in distance break by obstacle id.
std::vector<ObstacleConfiguration> build_configurations(
    const std::vector<PerceivedObstacle>& perceived, double ego_x, double ego_y, int candidates,
    int slots, int steps, double dt, const std::vector<int>& counts = {});

std::vector<int> default_config_counts(int candidates, int slots);

/// Parses the replay CSV (header "frame_rate_hz=<value>", then rows
/// vehicle_id,frame,x_m,y_m,vx_mps,vy_mps). Throws std::runtime_error with
/// the offending line number on malformed rows and on per-vehicle frame
/// gaps.
ReplayLog load_replay(const std::string& path);

/// Linear interpolation of all replay tracks present at the given time.
std::vector<Obstacle> replay_states_at(const ReplayLog& log, double time);

void step_world(World& world, double dt, Rng& rng);

/// Static-field spawner: tops up obstacles ahead of focus_x with
/// exponential gaps and culls entries far behind. Called by step_world in
/// static_field mode and once at scenario construction for the initial fill.
void spawn_field(World& world, Rng& rng);

}  // namespace cpto
