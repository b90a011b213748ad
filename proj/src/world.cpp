#include "cpto/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace cpto {

int LaneLayout::nearest_lane(double y) const {
  int best = 0;
  double best_dist = std::abs(y - center(0));
  for (int i = 1; i < count; ++i) {
    const double d = std::abs(y - center(i));
    if (d < best_dist) {
      best_dist = d;
      best = i;
    }
  }
  return best;
}

double noise_sigma_raw(double sigma_bar, double distance) {
  return sigma_bar / std::max(10.0 / (distance + 0.1), 1.0);
}

double noise_sigma(double sigma_bar, double distance, double fully_observed_dist) {
  if (distance < fully_observed_dist) return 0.0;
  return noise_sigma_raw(sigma_bar, distance);
}

std::vector<PerceivedObstacle> observe(const World& world, double ego_x, double ego_y,
                                       const PerceptionModel& model, Rng& rng) {
  std::vector<PerceivedObstacle> out;
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (const Obstacle& o : world.obstacles) {
    const double dx = o.x - ego_x;
    const double dy = o.y - ego_y;
    if (dx < -model.rear_range) continue;
    if (std::abs(dy) > model.lateral_range) continue;
    const double dist = std::hypot(dx, dy);

    PerceivedObstacle p;
    p.distance = dist;
    p.state = o;
    if (dist < model.fully_observed_dist) {
      p.certain = true;
      out.push_back(p);
      continue;
    }
    if (dist < o.existence_range) {
      p.certain = true;
    } else {
      // Linear ramp from certain detection at s_e down to none at 2 s_e;
      // produces the sporadic appearances/disappearances of distant objects.
      const double prob =
          std::clamp((2.0 * o.existence_range - dist) / o.existence_range, 0.0, 1.0);
      if (unit(rng) >= prob) continue;
      p.certain = false;
    }
    p.state.x += gauss(rng) * noise_sigma(model.sigma_px, dist, model.fully_observed_dist);
    p.state.y += gauss(rng) * noise_sigma(model.sigma_py, dist, model.fully_observed_dist);
    p.state.vx += gauss(rng) * noise_sigma(model.sigma_vx, dist, model.fully_observed_dist);
    p.state.vy += gauss(rng) * noise_sigma(model.sigma_vy, dist, model.fully_observed_dist);
    out.push_back(p);
  }
  return out;
}

void predict_constant_velocity(const Obstacle& obstacle, int steps, double dt, int slot,
                               Matrix& ox, Matrix& oy) {
  for (int k = 0; k < steps; ++k) {
    const double t = (k + 1) * dt;
    ox(k, slot) = obstacle.x + t * obstacle.vx;
    oy(k, slot) = obstacle.y + t * obstacle.vy;
  }
}

double idm_accel_deterministic(double gap, double v, double v_lead, const IdmParams& params) {
  const double free_term = 1.0 - std::pow(v / params.desired_speed, params.exponent);
  if (!(gap < std::numeric_limits<double>::infinity())) {
    return params.max_accel * free_term;
  }
  const double desired_gap =
      params.min_gap + std::max(0.0, v * params.time_headway +
                                         v * (v - v_lead) /
                                             (2.0 * std::sqrt(params.max_accel *
                                                              params.comfort_decel)));
  const double ratio = desired_gap / gap;
  return params.max_accel * (free_term - ratio * ratio);
}

double idm_accel(double gap, double v, double v_lead, const IdmParams& params, Rng& rng,
                 double accel_min, double accel_max) {
  if (gap <= 0.0) return accel_min;
  std::normal_distribution<double> noise(0.0, std::sqrt(params.noise_variance));
  const double a = idm_accel_deterministic(gap, v, v_lead, params) + noise(rng);
  return std::clamp(a, accel_min, accel_max);
}

std::vector<int> default_config_counts(int candidates, int slots) {
  if (candidates == 5) return {2, 3, 3, std::min(4, slots), std::min(5, slots)};
  std::vector<int> counts(candidates);
  if (candidates == 1) {
    counts[0] = slots;
    return counts;
  }
  for (int j = 0; j < candidates; ++j) {
    const double t = static_cast<double>(j) / (candidates - 1);
    counts[j] = std::min(slots, 2 + static_cast<int>(std::floor(t * (slots - 2) + 0.5)));
  }
  for (int j = 1; j < candidates; ++j) counts[j] = std::max(counts[j], counts[j - 1]);
  return counts;
}

std::vector<ObstacleConfiguration> build_configurations(
    const std::vector<PerceivedObstacle>& perceived, double ego_x, double ego_y, int candidates,
    int slots, int steps, double dt, const std::vector<int>& counts) {
  std::vector<int> ladder = counts.empty() ? default_config_counts(candidates, slots) : counts;
  if (static_cast<int>(ladder.size()) != candidates) {
    throw std::invalid_argument("build_configurations: count ladder size must equal candidates");
  }

  std::vector<std::pair<double, const PerceivedObstacle*>> ranked;
  ranked.reserve(perceived.size());
  for (const PerceivedObstacle& p : perceived) {
    ranked.emplace_back(std::hypot(p.state.x - ego_x, p.state.y - ego_y), &p);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return a.second->state.id < b.second->state.id;
  });

  std::vector<ObstacleConfiguration> configs(candidates);
  const int available = static_cast<int>(ranked.size());
  for (int j = 0; j < candidates; ++j) {
    ObstacleConfiguration& cfg = configs[j];
    const int take = std::min({ladder[j], slots, available});
    cfg.obstacles.assign(slots, Obstacle{});
    cfg.mask.assign(slots, false);
    cfg.ox = Matrix::Zero(steps, slots);
    cfg.oy = Matrix::Zero(steps, slots);
    for (int i = 0; i < take; ++i) {
      cfg.obstacles[i] = ranked[i].second->state;
      cfg.mask[i] = true;
      predict_constant_velocity(cfg.obstacles[i], steps, dt, i, cfg.ox, cfg.oy);
    }
  }
  return configs;
}

ReplayLog load_replay(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_replay: cannot open " + path);
  ReplayLog log;
  std::string line;
  int line_no = 0;

  if (!std::getline(in, line)) throw std::runtime_error("load_replay: empty file " + path);
  ++line_no;
  const std::string key = "frame_rate_hz=";
  const auto pos = line.find(key);
  if (pos == std::string::npos) {
    throw std::runtime_error("load_replay: line 1: missing frame_rate_hz header");
  }
  try {
    log.frame_rate_hz = std::stod(line.substr(pos + key.size()));
  } catch (const std::exception&) {
    throw std::runtime_error("load_replay: line 1: malformed frame rate");
  }
  if (!(log.frame_rate_hz > 0)) {
    throw std::runtime_error("load_replay: line 1: frame rate must be positive");
  }

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line.rfind("vehicle_id", 0) == 0) continue;  // optional column header
    std::stringstream ss(line);
    std::string field;
    double values[6];
    int parsed = 0;
    while (std::getline(ss, field, ',') && parsed < 6) {
      try {
        values[parsed] = std::stod(field);
      } catch (const std::exception&) {
        throw std::runtime_error("load_replay: line " + std::to_string(line_no) +
                                 ": malformed field '" + field + "'");
      }
      ++parsed;
    }
    if (parsed != 6) {
      throw std::runtime_error("load_replay: line " + std::to_string(line_no) +
                               ": expected 6 fields");
    }
    ReplayFrame frame;
    frame.frame = static_cast<int>(values[1]);
    frame.x = values[2];
    frame.y = values[3];
    frame.vx = values[4];
    frame.vy = values[5];
    log.tracks[static_cast<int>(values[0])].push_back(frame);
  }

  for (auto& [id, frames] : log.tracks) {
    std::sort(frames.begin(), frames.end(),
              [](const ReplayFrame& a, const ReplayFrame& b) { return a.frame < b.frame; });
    for (size_t i = 1; i < frames.size(); ++i) {
      if (frames[i].frame != frames[i - 1].frame + 1) {
        throw std::runtime_error("load_replay: vehicle " + std::to_string(id) +
                                 ": non-contiguous frames " + std::to_string(frames[i - 1].frame) +
                                 " -> " + std::to_string(frames[i].frame));
      }
    }
  }
  return log;
}

std::vector<Obstacle> replay_states_at(const ReplayLog& log, double time) {
  std::vector<Obstacle> out;
  for (const auto& [id, frames] : log.tracks) {
    const double fpos = time * log.frame_rate_hz;  // absolute frame coordinate
    const double f0 = frames.front().frame;
    const double f1 = frames.back().frame;
    if (fpos < f0 - 1e-9 || fpos > f1 + 1e-9) continue;
    const double clamped = std::clamp(fpos, f0, f1);
    const size_t lo =
        std::min(static_cast<size_t>(clamped - f0), frames.size() - 1);
    const size_t hi = std::min(lo + 1, frames.size() - 1);
    const double t = clamped - f0 - static_cast<double>(lo);
    const ReplayFrame& a = frames[lo];
    const ReplayFrame& b = frames[hi];
    Obstacle o;
    o.id = id;
    o.x = a.x + t * (b.x - a.x);
    o.y = a.y + t * (b.y - a.y);
    o.vx = a.vx + t * (b.vx - a.vx);
    o.vy = a.vy + t * (b.vy - a.vy);
    out.push_back(o);
  }
  return out;
}

void spawn_field(World& world, Rng& rng) {
  std::exponential_distribution<double> gap(1.0 / world.spawn_gap_mean);
  std::uniform_int_distribution<int> lane(0, world.lanes.count - 1);
  std::normal_distribution<double> existence(world.existence_mean, world.existence_std);
  while (world.spawn_frontier < world.focus_x + world.spawn_lookahead) {
    world.spawn_frontier += gap(rng);
    Obstacle o;
    o.id = world.next_id++;
    o.x = world.spawn_frontier;
    o.lane = lane(rng);
    o.y = world.lanes.center(o.lane);
    o.vx = 0;
    o.vy = 0;
    o.existence_range = std::max(world.existence_floor, existence(rng));
    world.obstacles.push_back(o);
    ++world.spawned_count;
  }
  std::erase_if(world.obstacles,
                [&](const Obstacle& o) { return o.x < world.focus_x - world.despawn_behind; });
}

namespace {

void step_idm(World& world, double dt, Rng& rng) {
  // Leader lookup per lane from the current (pre-step) state, then a
  // synchronous update.
  std::vector<double> accel(world.obstacles.size(), 0.0);
  for (size_t i = 0; i < world.obstacles.size(); ++i) {
    const Obstacle& o = world.obstacles[i];
    const Obstacle* leader = nullptr;
    for (const Obstacle& other : world.obstacles) {
      if (other.id == o.id || other.lane != o.lane || other.x <= o.x) continue;
      if (!leader || other.x < leader->x) leader = &other;
    }
    IdmParams params = world.idm;
    params.desired_speed = o.desired_speed;
    if (leader) {
      const double gap = leader->x - o.x - leader->length;
      accel[i] = idm_accel(gap, o.vx, leader->vx, params, rng);
    } else {
      std::normal_distribution<double> noise(0.0, std::sqrt(params.noise_variance));
      accel[i] = std::clamp(idm_accel_deterministic(
                                std::numeric_limits<double>::infinity(), o.vx, 0.0, params) +
                                noise(rng),
                            -4.0, 3.0);
    }
  }
  for (size_t i = 0; i < world.obstacles.size(); ++i) {
    Obstacle& o = world.obstacles[i];
    o.vx = std::clamp(o.vx + accel[i] * dt, 0.0, 24.0);
    o.x += o.vx * dt;
  }
}

}  // namespace

void step_world(World& world, double dt, Rng& rng) {
  if (!(dt > 0)) throw std::invalid_argument("step_world: dt must be > 0");
  switch (world.mode) {
    case WorldMode::constant_velocity:
      for (Obstacle& o : world.obstacles) {
        o.x += o.vx * dt;
        o.y += o.vy * dt;
      }
      break;
    case WorldMode::idm:
      step_idm(world, dt, rng);
      break;
    case WorldMode::replay: {
      std::vector<Obstacle> states = replay_states_at(world.replay, world.time + dt);
      std::normal_distribution<double> existence(world.existence_mean, world.existence_std);
      for (Obstacle& o : states) {
        auto it = world.existence_cache.find(o.id);
        if (it == world.existence_cache.end()) {
          it = world.existence_cache
                   .emplace(o.id, std::max(world.existence_floor, existence(rng)))
                   .first;
        }
        o.existence_range = it->second;
      }
      world.obstacles = std::move(states);
      break;
    }
    case WorldMode::static_field:
      spawn_field(world, rng);
      break;
  }
  world.time += dt;
}

}  // namespace cpto
