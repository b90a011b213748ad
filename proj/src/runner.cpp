#include "cpto/runner.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace cpto {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void require_known_keys(const json& j, const std::set<std::string>& known,
                        const std::string& scope) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) {
      throw std::invalid_argument("config: unknown key '" + scope + it.key() + "'");
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void check_range(double value, double lo, double hi, const std::string& key) {
  if (value < lo || value > hi) {
    std::ostringstream msg;
    msg << "config: '" << key << "' = " << value << " outside allowed range [" << lo << ", " << hi
        << "]";
    throw std::invalid_argument(msg.str());
  }
}

}  // namespace

RunConfig parse_config(const json& j) {
  static const std::set<std::string> top_keys = {
      "scenario",      "seeds",           "steps",         "out_dir",        "workers",
      "horizon",       "planning_steps",  "control_hz",    "candidates",     "obstacle_slots",
      "consensus_steps", "degree",        "v_target",      "mode",           "stagger_terminal",
      "config_counts", "solver",          "perception",    "ellipse",        "alpha_init",
      "bounds",        "lanes",           "weights",       "idm",            "idm_speed_min",
      "idm_speed_max", "traffic_gap_min", "traffic_gap_max", "replay_path",
      "ego_start_x",   "ego_start_lane",  "ego_start_speed", "lead_gap"};
  require_known_keys(j, top_keys, "");

  RunConfig c;
  read(j, "scenario", c.scenario);
  if (c.scenario != "static-field" && c.scenario != "idm-traffic" && c.scenario != "replay" &&
      c.scenario != "lane-change") {
    throw std::invalid_argument("config: 'scenario' must be one of static-field, idm-traffic, "
                                "replay, lane-change");
  }

  // Scenario presets, overridable by explicit keys below.
  if (c.scenario == "replay") {
    c.control_hz = 12.5;
    c.planning_steps = 50;
    c.steps = 450;
    c.ego_start_x = -2.0;
  } else if (c.scenario == "lane-change") {
    c.ego_start_x = 15.0;
    c.ego_start_lane = 2;
  }

  read(j, "seeds", c.seeds);
  read(j, "steps", c.steps);
  read(j, "out_dir", c.out_dir);
  read(j, "workers", c.workers);
  read(j, "horizon", c.horizon);
  read(j, "planning_steps", c.planning_steps);
  read(j, "control_hz", c.control_hz);
  read(j, "candidates", c.candidates);
  read(j, "obstacle_slots", c.obstacle_slots);
  read(j, "consensus_steps", c.consensus_steps);
  read(j, "degree", c.degree);
  read(j, "v_target", c.v_target);
  read(j, "mode", c.mode);
  read(j, "stagger_terminal", c.stagger_terminal);
  read(j, "config_counts", c.config_counts);
  read(j, "idm_speed_min", c.idm_speed_min);
  read(j, "idm_speed_max", c.idm_speed_max);
  read(j, "traffic_gap_min", c.traffic_gap_min);
  read(j, "traffic_gap_max", c.traffic_gap_max);
  read(j, "replay_path", c.replay_path);
  read(j, "ego_start_x", c.ego_start_x);
  read(j, "ego_start_lane", c.ego_start_lane);
  read(j, "ego_start_speed", c.ego_start_speed);
  read(j, "lead_gap", c.lead_gap);
  read(j, "alpha_init", c.alpha_init);

  if (j.contains("solver")) {
    const json& s = j.at("solver");
    require_known_keys(s,
                       {"rho_theta", "rho_x", "rho_y", "rho_obs", "rho_cons_x", "rho_cons_y",
                        "rho_cons_theta", "relax_alpha", "eps_pri", "eps_consensus", "iter_max",
                        "q_x", "q_y", "q_theta", "boundary_weight",
                        "fallback_residual_limit"},
                       "solver.");
    read(s, "rho_theta", c.rho_theta);
    read(s, "rho_x", c.rho_x);
    read(s, "rho_y", c.rho_y);
    read(s, "rho_obs", c.rho_obs);
    read(s, "rho_cons_x", c.rho_cons_x);
    read(s, "rho_cons_y", c.rho_cons_y);
    read(s, "rho_cons_theta", c.rho_cons_theta);
    read(s, "relax_alpha", c.relax_alpha);
    read(s, "eps_pri", c.eps_pri);
    read(s, "eps_consensus", c.eps_consensus);
    read(s, "fallback_residual_limit", c.fallback_residual_limit);
    read(s, "iter_max", c.iter_max);
    read(s, "q_x", c.q_x);
    read(s, "q_y", c.q_y);
    read(s, "q_theta", c.q_theta);
    read(s, "boundary_weight", c.boundary_weight);
  }
  if (j.contains("perception")) {
    const json& p = j.at("perception");
    require_known_keys(p,
                       {"sigma_px", "sigma_py", "sigma_vx", "sigma_vy", "fully_observed_dist",
                        "existence_mean", "existence_std", "rear_range", "lateral_range"},
                       "perception.");
    read(p, "sigma_px", c.perception.sigma_px);
    read(p, "sigma_py", c.perception.sigma_py);
    read(p, "sigma_vx", c.perception.sigma_vx);
    read(p, "sigma_vy", c.perception.sigma_vy);
    read(p, "fully_observed_dist", c.perception.fully_observed_dist);
    read(p, "existence_mean", c.perception.existence_mean);
    read(p, "existence_std", c.perception.existence_std);
    read(p, "rear_range", c.perception.rear_range);
    read(p, "lateral_range", c.perception.lateral_range);
  }
  if (j.contains("ellipse")) {
    const json& e = j.at("ellipse");
    require_known_keys(e, {"lx_max", "lx_min", "ly_max", "ly_min"}, "ellipse.");
    read(e, "lx_max", c.ellipse.lx_max);
    read(e, "lx_min", c.ellipse.lx_min);
    read(e, "ly_max", c.ellipse.ly_max);
    read(e, "ly_min", c.ellipse.ly_min);
  }
  if (j.contains("bounds")) {
    const json& b = j.at("bounds");
    require_known_keys(b,
                       {"px_min", "px_max", "py_min", "py_max", "ax_min", "ax_max", "ay_min",
                        "ay_max", "jx_min", "jx_max", "jy_min", "jy_max", "v_min", "v_max"},
                       "bounds.");
    read(b, "px_min", c.bounds.px_min);
    read(b, "px_max", c.bounds.px_max);
    read(b, "py_min", c.bounds.py_min);
    read(b, "py_max", c.bounds.py_max);
    read(b, "ax_min", c.bounds.ax_min);
    read(b, "ax_max", c.bounds.ax_max);
    read(b, "ay_min", c.bounds.ay_min);
    read(b, "ay_max", c.bounds.ay_max);
    read(b, "jx_min", c.bounds.jx_min);
    read(b, "jx_max", c.bounds.jx_max);
    read(b, "jy_min", c.bounds.jy_min);
    read(b, "jy_max", c.bounds.jy_max);
    read(b, "v_min", c.bounds.v_min);
    read(b, "v_max", c.bounds.v_max);
  }
  if (j.contains("lanes")) {
    const json& l = j.at("lanes");
    require_known_keys(l, {"count", "width", "first_center_y"}, "lanes.");
    read(l, "count", c.lanes.count);
    read(l, "width", c.lanes.width);
    read(l, "first_center_y", c.lanes.first_center_y);
  }
  if (j.contains("weights")) {
    const json& w = j.at("weights");
    require_known_keys(w, {"safety", "comfort", "accuracy"}, "weights.");
    read(w, "safety", c.weights.safety);
    read(w, "comfort", c.weights.comfort);
    read(w, "accuracy", c.weights.accuracy);
  }
  if (j.contains("idm")) {
    const json& i = j.at("idm");
    require_known_keys(i,
                       {"desired_speed", "time_headway", "min_gap", "max_accel", "comfort_decel",
                        "exponent", "noise_variance"},
                       "idm.");
    read(i, "desired_speed", c.idm.desired_speed);
    read(i, "time_headway", c.idm.time_headway);
    read(i, "min_gap", c.idm.min_gap);
    read(i, "max_accel", c.idm.max_accel);
    read(i, "comfort_decel", c.idm.comfort_decel);
    read(i, "exponent", c.idm.exponent);
    read(i, "noise_variance", c.idm.noise_variance);
  }

  // Range validation against the experiment parameter table.
  check_range(c.bounds.v_min, 0.0, 24.0, "bounds.v_min");
  check_range(c.bounds.v_max, 0.0, 24.0, "bounds.v_max");
  check_range(c.bounds.px_min, -500.0, 5000.0, "bounds.px_min");
  check_range(c.bounds.px_max, -500.0, 5000.0, "bounds.px_max");
  check_range(c.bounds.ax_min, -4.0, 3.0, "bounds.ax_min");
  check_range(c.bounds.ax_max, -4.0, 3.0, "bounds.ax_max");
  check_range(c.bounds.ay_min, -5.0, 5.0, "bounds.ay_min");
  check_range(c.bounds.ay_max, -5.0, 5.0, "bounds.ay_max");
  check_range(c.bounds.jx_min, -6.0, 6.0, "bounds.jx_min");
  check_range(c.bounds.jx_max, -6.0, 6.0, "bounds.jx_max");
  check_range(c.bounds.jy_min, -6.0, 6.0, "bounds.jy_min");
  check_range(c.bounds.jy_max, -6.0, 6.0, "bounds.jy_max");
  check_range(c.v_target, 0.0, 24.0, "v_target");
  if (c.mode != "kkt-exact" && c.mode != "paper-pseudoinverse") {
    throw std::invalid_argument("config: 'mode' must be kkt-exact or paper-pseudoinverse");
  }
  if (c.degree < 3) throw std::invalid_argument("config: 'degree' must be >= 3");
  if (c.candidates < 1) throw std::invalid_argument("config: 'candidates' must be >= 1");
  if (c.obstacle_slots < 0) throw std::invalid_argument("config: 'obstacle_slots' must be >= 0");
  if (c.consensus_steps < 0 || c.consensus_steps >= c.planning_steps) {
    throw std::invalid_argument("config: 'consensus_steps' must satisfy 0 <= Ns < planning_steps");
  }
  if (c.workers < 1) throw std::invalid_argument("config: 'workers' must be >= 1");
  if (c.seeds.empty()) throw std::invalid_argument("config: 'seeds' must not be empty");
  if (c.steps < 0) throw std::invalid_argument("config: 'steps' must be >= 0");
  if (c.ego_start_lane < 0 || c.ego_start_lane >= c.lanes.count) {
    throw std::invalid_argument("config: 'ego_start_lane' outside lane count");
  }
  if (std::abs(c.control_hz * c.horizon - c.planning_steps) > 1e-6) {
    throw std::invalid_argument(
        "config: 'planning_steps' must equal control_hz * horizon (execution step = grid step)");
  }
  if (c.scenario == "replay" && c.replay_path.empty()) {
    throw std::invalid_argument("config: 'replay_path' required for the replay scenario");
  }
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
    return parse_config(json::object());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error("load_config: " + path + ": " + e.what());
  }
  return parse_config(j);
}

json to_json(const RunConfig& c) {
  json j;
  j["scenario"] = c.scenario;
  j["seeds"] = c.seeds;
  j["steps"] = c.steps;
  j["out_dir"] = c.out_dir;
  j["workers"] = c.workers;
  j["horizon"] = c.horizon;
  j["planning_steps"] = c.planning_steps;
  j["control_hz"] = c.control_hz;
  j["candidates"] = c.candidates;
  j["obstacle_slots"] = c.obstacle_slots;
  j["consensus_steps"] = c.consensus_steps;
  j["degree"] = c.degree;
  j["v_target"] = c.v_target;
  j["mode"] = c.mode;
  j["stagger_terminal"] = c.stagger_terminal;
  j["config_counts"] = c.config_counts;
  j["alpha_init"] = c.alpha_init;
  j["idm_speed_min"] = c.idm_speed_min;
  j["idm_speed_max"] = c.idm_speed_max;
  j["traffic_gap_min"] = c.traffic_gap_min;
  j["traffic_gap_max"] = c.traffic_gap_max;
  j["replay_path"] = c.replay_path;
  j["ego_start_x"] = c.ego_start_x;
  j["ego_start_lane"] = c.ego_start_lane;
  j["ego_start_speed"] = c.ego_start_speed;
  j["lead_gap"] = c.lead_gap;
  j["solver"] = {{"rho_theta", c.rho_theta},
                 {"rho_x", c.rho_x},
                 {"rho_y", c.rho_y},
                 {"rho_obs", c.rho_obs},
                 {"rho_cons_x", c.rho_cons_x},
                 {"rho_cons_y", c.rho_cons_y},
                 {"rho_cons_theta", c.rho_cons_theta},
                 {"relax_alpha", c.relax_alpha},
                 {"eps_pri", c.eps_pri},
                 {"eps_consensus", c.eps_consensus},
                 {"fallback_residual_limit", c.fallback_residual_limit},
                 {"iter_max", c.iter_max},
                 {"q_x", c.q_x},
                 {"q_y", c.q_y},
                 {"q_theta", c.q_theta},
                 {"boundary_weight", c.boundary_weight}};
  j["perception"] = {{"sigma_px", c.perception.sigma_px},
                     {"sigma_py", c.perception.sigma_py},
                     {"sigma_vx", c.perception.sigma_vx},
                     {"sigma_vy", c.perception.sigma_vy},
                     {"fully_observed_dist", c.perception.fully_observed_dist},
                     {"existence_mean", c.perception.existence_mean},
                     {"existence_std", c.perception.existence_std},
                     {"rear_range", c.perception.rear_range},
                     {"lateral_range", c.perception.lateral_range}};
  j["ellipse"] = {{"lx_max", c.ellipse.lx_max},
                  {"lx_min", c.ellipse.lx_min},
                  {"ly_max", c.ellipse.ly_max},
                  {"ly_min", c.ellipse.ly_min}};
  j["bounds"] = {{"px_min", c.bounds.px_min}, {"px_max", c.bounds.px_max},
                 {"py_min", c.bounds.py_min}, {"py_max", c.bounds.py_max},
                 {"ax_min", c.bounds.ax_min}, {"ax_max", c.bounds.ax_max},
                 {"ay_min", c.bounds.ay_min}, {"ay_max", c.bounds.ay_max},
                 {"jx_min", c.bounds.jx_min}, {"jx_max", c.bounds.jx_max},
                 {"jy_min", c.bounds.jy_min}, {"jy_max", c.bounds.jy_max},
                 {"v_min", c.bounds.v_min},   {"v_max", c.bounds.v_max}};
  j["lanes"] = {{"count", c.lanes.count},
                {"width", c.lanes.width},
                {"first_center_y", c.lanes.first_center_y}};
  j["weights"] = {{"safety", c.weights.safety},
                  {"comfort", c.weights.comfort},
                  {"accuracy", c.weights.accuracy}};
  j["idm"] = {{"desired_speed", c.idm.desired_speed},
              {"time_headway", c.idm.time_headway},
              {"min_gap", c.idm.min_gap},
              {"max_accel", c.idm.max_accel},
              {"comfort_decel", c.idm.comfort_decel},
              {"exponent", c.idm.exponent},
              {"noise_variance", c.idm.noise_variance}};
  return j;
}

uint64_t config_hash(const RunConfig& config) {
  const std::string dump = to_json(config).dump();
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : dump) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

PlannerConfig planner_config(const RunConfig& c) {
  PlannerConfig p;
  p.degree = c.degree;
  p.steps = c.planning_steps;
  p.horizon = c.horizon;
  p.candidates = c.candidates;
  p.obstacle_slots = c.obstacle_slots;
  p.consensus_steps = c.consensus_steps;
  p.alpha_init = c.alpha_init;
  p.v_target = c.v_target;
  p.stagger_terminal = c.stagger_terminal;
  p.lead_gap = c.lead_gap;
  p.ellipse = c.ellipse;
  p.bounds = c.bounds;
  p.lanes = c.lanes;
  p.weights = c.weights;
  p.perception = c.perception;
  p.config_counts = c.config_counts;
  p.solver.rho_theta = c.rho_theta;
  p.solver.rho_x = c.rho_x;
  p.solver.rho_y = c.rho_y;
  p.solver.rho_obs = c.rho_obs;
  p.solver.rho_cons_x = c.rho_cons_x;
  p.solver.rho_cons_y = c.rho_cons_y;
  p.solver.rho_cons_theta = c.rho_cons_theta;
  p.solver.relax_alpha = c.relax_alpha;
  p.solver.eps_pri = c.eps_pri;
  p.solver.eps_consensus = c.eps_consensus;
  p.fallback_residual_limit = c.fallback_residual_limit;
  p.solver.iter_max = c.iter_max;
  p.solver.boundary_weight = c.boundary_weight;
  p.solver.mode =
      c.mode == "kkt-exact" ? SolveMode::kkt_exact : SolveMode::paper_pseudoinverse;
  const BasisSet basis = build_basis(c.degree, c.planning_steps, c.horizon);
  p.solver.Qx = smoothness_weight(basis, c.q_x);
  p.solver.Qy = smoothness_weight(basis, c.q_y);
  p.solver.Qtheta = smoothness_weight(basis, c.q_theta);
  return p;
}

EgoState initial_ego(const RunConfig& c) {
  EgoState ego;
  ego.px = c.ego_start_x;
  ego.py = c.lanes.center(c.ego_start_lane);
  ego.v = c.ego_start_speed;
  return ego;
}

namespace {

void populate_idm_corridor(World& world, const RunConfig& c, Rng& rng, double slow_lane_speed) {
  std::uniform_real_distribution<double> gap(c.traffic_gap_min, c.traffic_gap_max);
  std::uniform_real_distribution<double> speed(c.idm_speed_min, c.idm_speed_max);
  std::normal_distribution<double> existence(c.perception.existence_mean,
                                             c.perception.existence_std);
  const double ego_x = c.ego_start_x;
  const double corridor_end =
      ego_x + c.steps / c.control_hz * c.bounds.v_max + 300.0;
  for (int lane = 0; lane < c.lanes.count; ++lane) {
    double x = ego_x - 80.0;
    while (x < corridor_end) {
      x += gap(rng);
      const bool ego_bubble = lane == c.ego_start_lane && std::abs(x - ego_x) < 30.0;
      double v = speed(rng);
      if (slow_lane_speed > 0 && lane == c.ego_start_lane) v = slow_lane_speed;
      if (ego_bubble) continue;
      Obstacle o;
      o.id = world.next_id++;
      o.lane = lane;
      o.x = x;
      o.y = world.lanes.center(lane);
      o.vx = v;
      o.desired_speed = v;
      o.existence_range =
          std::max(c.perception.fully_observed_dist, existence(rng));
      world.obstacles.push_back(o);
    }
  }
}

}  // namespace

World make_world(const RunConfig& c, Rng& rng) {
  World world;
  world.lanes = c.lanes;
  world.idm = c.idm;
  world.existence_mean = c.perception.existence_mean;
  world.existence_std = c.perception.existence_std;
  world.existence_floor = c.perception.fully_observed_dist;
  world.focus_x = c.ego_start_x;

  if (c.scenario == "static-field") {
    world.mode = WorldMode::static_field;
    world.spawn_frontier = c.ego_start_x + 30.0;
    spawn_field(world, rng);
  } else if (c.scenario == "idm-traffic") {
    world.mode = WorldMode::idm;
    populate_idm_corridor(world, c, rng, /*slow_lane_speed=*/0.0);
  } else if (c.scenario == "lane-change") {
    world.mode = WorldMode::idm;
    // Congested home lane gives the planner a reason to move over.
    populate_idm_corridor(world, c, rng, std::max(1.0, c.idm_speed_min));
  } else if (c.scenario == "replay") {
    world.mode = WorldMode::replay;
    world.replay = load_replay(c.replay_path);
    std::vector<Obstacle> states = replay_states_at(world.replay, 0.0);
    std::normal_distribution<double> existence(world.existence_mean, world.existence_std);
    for (Obstacle& o : states) {
      auto it = world.existence_cache.emplace(o.id, 0.0).first;
      it->second = std::max(world.existence_floor, existence(rng));
      o.existence_range = it->second;
    }
    world.obstacles = std::move(states);
  }
  return world;
}

void write_episode_csv(const std::string& path, const EpisodeLog& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_episode_csv: cannot open " + path);
  out << "# seed=" << log.seed << " dt=" << fmt(log.dt) << " candidates=" << log.candidates
      << "\n";
  out << "t_s,px_m,py_m,theta_rad,thetadot_radps,v_mps,ax,ay,jx,jy,selected_idx,solve_ms,"
         "converged,min_true_dist_m,min_h_consensus,min_true_margin\n";
  for (const EpisodeStep& s : log.steps) {
    out << fmt(s.t) << ',' << fmt(s.state.px) << ',' << fmt(s.state.py) << ','
        << fmt(s.state.theta) << ',' << fmt(s.state.thetadot) << ',' << fmt(s.state.v) << ','
        << fmt(s.state.ax) << ',' << fmt(s.state.ay) << ',' << fmt(s.state.jx) << ','
        << fmt(s.state.jy) << ',' << s.selected << ',' << fmt(s.solve_ms) << ','
        << (s.converged ? 1 : 0) << ',' << fmt(s.min_true_dist) << ','
        << fmt(s.consensus_min_h) << ',' << fmt(s.min_true_margin) << "\n";
  }
}

EpisodeLog read_episode_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_episode_csv: cannot open " + path);
  EpisodeLog log;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::stringstream ss(line.substr(1));
      std::string token;
      while (ss >> token) {
        const auto eq = token.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = token.substr(0, eq);
        const std::string value = token.substr(eq + 1);
        if (key == "seed") log.seed = std::stoull(value);
        if (key == "dt") log.dt = std::stod(value);
        if (key == "candidates") log.candidates = std::stoi(value);
      }
      continue;
    }
    if (line.rfind("t_s,", 0) == 0) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 16) {
      throw std::runtime_error("read_episode_csv: bad column count in " + path);
    }
    EpisodeStep s;
    s.t = std::stod(fields[0]);
    s.state.px = std::stod(fields[1]);
    s.state.py = std::stod(fields[2]);
    s.state.theta = std::stod(fields[3]);
    s.state.thetadot = std::stod(fields[4]);
    s.state.v = std::stod(fields[5]);
    s.state.ax = std::stod(fields[6]);
    s.state.ay = std::stod(fields[7]);
    s.state.jx = std::stod(fields[8]);
    s.state.jy = std::stod(fields[9]);
    s.selected = std::stoi(fields[10]);
    s.solve_ms = std::stod(fields[11]);
    s.converged = fields[12] == "1";
    s.min_true_dist = std::stod(fields[13]);
    s.consensus_min_h = std::stod(fields[14]);
    s.min_true_margin = std::stod(fields[15]);
    log.steps.push_back(s);
  }
  return log;
}

void write_trace_csv(const std::string& path, const EpisodeLog& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_trace_csv: cannot open " + path);
  out << "step,iter,res_nonholonomic,res_obstacle,res_consensus,res_bounds\n";
  for (size_t s = 0; s < log.steps.size(); ++s) {
    const auto& history = log.steps[s].residual_history;
    for (size_t i = 0; i < history.size(); ++i) {
      out << s << ',' << (i + 1) << ',' << fmt(history[i][0]) << ',' << fmt(history[i][1]) << ','
          << fmt(history[i][2]) << ',' << fmt(history[i][3]) << "\n";
    }
  }
}

namespace {

json metrics_to_json(const MetricsReport& m) {
  return json{{"collision_rate", m.collision_rate},
              {"mean_nearest_distance", m.mean_nearest_distance},
              {"mean_speed_error", m.mean_speed_error},
              {"mean_abs_ax", m.mean_abs_ax},
              {"mean_abs_ay", m.mean_abs_ay},
              {"max_abs_jx", m.max_abs_jx},
              {"max_abs_jy", m.max_abs_jy},
              {"mean_abs_yaw_rate", m.mean_abs_yaw_rate},
              {"mean_solve_ms", m.mean_solve_ms},
              {"max_solve_ms", m.max_solve_ms},
              {"steps", m.steps},
              {"steps_with_obstacles", m.steps_with_obstacles},
              {"seed", m.seed}};
}

}  // namespace

void write_metrics_json(const std::string& path, const MetricsReport& metrics,
                        const RunConfig& config) {
  json j = metrics_to_json(metrics);
  j["config_hash"] = config_hash(config);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_metrics_json: cannot open " + path);
  out << j.dump(2) << "\n";
}

bool logs_equal_ignoring_timing(const std::string& path_a, const std::string& path_b) {
  std::ifstream a(path_a), b(path_b);
  if (!a || !b) return false;
  std::string la, lb;
  while (true) {
    const bool ra = static_cast<bool>(std::getline(a, la));
    const bool rb = static_cast<bool>(std::getline(b, lb));
    if (ra != rb) return false;
    if (!ra) return true;
    if (la == lb) continue;
    // Tolerate differences in the solve_ms column only (index 11).
    std::stringstream sa(la), sb(lb);
    std::string fa, fb;
    int idx = 0;
    while (true) {
      const bool ga = static_cast<bool>(std::getline(sa, fa, ','));
      const bool gb = static_cast<bool>(std::getline(sb, fb, ','));
      if (ga != gb) return false;
      if (!ga) break;
      if (idx != 11 && fa != fb) return false;
      ++idx;
    }
  }
}

EpisodeLog run_scenario_episode(const RunConfig& config, uint64_t seed) {
  Rng world_rng(seed * 0x9E3779B97F4A7C15ULL + 0x2545F4914F6CDD1DULL);
  World world = make_world(config, world_rng);
  EpisodeLog log;
  run_episode(world, initial_ego(config), config.steps, planner_config(config), seed, log);
  return log;
}

namespace {

struct EpisodeOutcome {
  bool ok = false;
  std::string error;
  MetricsReport metrics;
};

EpisodeOutcome run_one_episode(const RunConfig& config, uint64_t seed) {
  EpisodeOutcome outcome;
  EpisodeLog log;
  const fs::path dir(config.out_dir);
  try {
    Rng world_rng(seed * 0x9E3779B97F4A7C15ULL + 0x2545F4914F6CDD1DULL);
    World world = make_world(config, world_rng);
    run_episode(world, initial_ego(config), config.steps, planner_config(config), seed, log);
    outcome.metrics = compute_metrics(log, config.v_target);
    outcome.ok = true;
  } catch (const std::exception& e) {
    outcome.error = e.what();
  }
  // Partial logs are still written on failure.
  const std::string tag = "seed" + std::to_string(seed);
  if (!log.steps.empty() || outcome.ok) {
    write_episode_csv((dir / ("episode_" + tag + ".csv")).string(), log);
    write_trace_csv((dir / ("trace_" + tag + ".csv")).string(), log);
  }
  if (outcome.ok) {
    write_metrics_json((dir / ("metrics_" + tag + ".json")).string(), outcome.metrics, config);
  }
  return outcome;
}

}  // namespace

int run(const RunConfig& config) {
  const fs::path dir(config.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  {
    // Probe writability up front, before any simulation work.
    const fs::path probe = dir / ".write_probe";
    std::ofstream out(probe);
    if (!out) {
      std::cerr << "run: output directory '" << config.out_dir << "' is not writable\n";
      return 2;
    }
    out.close();
    fs::remove(probe, ec);
  }

  const size_t n = config.seeds.size();
  std::vector<EpisodeOutcome> outcomes(n);
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= n) return;
      outcomes[i] = run_one_episode(config, config.seeds[i]);
    }
  };
  const int workers = std::min<int>(config.workers, static_cast<int>(n));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  json aggregate;
  aggregate["episodes"] = json::array();
  MetricsReport mean;
  int ok_count = 0;
  int failures = 0;
  for (size_t i = 0; i < n; ++i) {
    if (!outcomes[i].ok) {
      ++failures;
      std::cerr << "seed " << config.seeds[i] << ": episode failed: " << outcomes[i].error << "\n";
      continue;
    }
    const MetricsReport& m = outcomes[i].metrics;
    aggregate["episodes"].push_back(metrics_to_json(m));
    mean.collision_rate += m.collision_rate;
    mean.mean_nearest_distance += m.mean_nearest_distance;
    mean.mean_speed_error += m.mean_speed_error;
    mean.mean_abs_ax += m.mean_abs_ax;
    mean.mean_abs_ay += m.mean_abs_ay;
    mean.max_abs_jx = std::max(mean.max_abs_jx, m.max_abs_jx);
    mean.max_abs_jy = std::max(mean.max_abs_jy, m.max_abs_jy);
    mean.mean_abs_yaw_rate += m.mean_abs_yaw_rate;
    mean.mean_solve_ms += m.mean_solve_ms;
    mean.max_solve_ms = std::max(mean.max_solve_ms, m.max_solve_ms);
    ++ok_count;
  }
  if (ok_count > 0) {
    mean.collision_rate /= ok_count;
    mean.mean_nearest_distance /= ok_count;
    mean.mean_speed_error /= ok_count;
    mean.mean_abs_ax /= ok_count;
    mean.mean_abs_ay /= ok_count;
    mean.mean_abs_yaw_rate /= ok_count;
    mean.mean_solve_ms /= ok_count;
    aggregate["mean"] = metrics_to_json(mean);
  }
  aggregate["config_hash"] = config_hash(config);
  aggregate["failures"] = failures;
  std::ofstream out(dir / "summary.json");
  out << aggregate.dump(2) << "\n";

  std::printf("%-8s %-10s %-10s %-10s %-10s %-10s %-10s\n", "seed", "coll_rate", "near_m",
              "v_err", "yaw_rate", "avg_ms", "max_ms");
  for (size_t i = 0; i < n; ++i) {
    if (!outcomes[i].ok) continue;
    const MetricsReport& m = outcomes[i].metrics;
    std::printf("%-8llu %-10.4f %-10.3f %-10.3f %-10.4f %-10.2f %-10.2f\n",
                static_cast<unsigned long long>(config.seeds[i]), m.collision_rate,
                m.mean_nearest_distance, m.mean_speed_error, m.mean_abs_yaw_rate, m.mean_solve_ms,
                m.max_solve_ms);
  }
  if (ok_count > 0) {
    std::printf("%-8s %-10.4f %-10.3f %-10.3f %-10.4f %-10.2f %-10.2f\n", "mean",
                mean.collision_rate, mean.mean_nearest_distance, mean.mean_speed_error,
                mean.mean_abs_yaw_rate, mean.mean_solve_ms, mean.max_solve_ms);
  }
  return failures == 0 ? 0 : 1;
}

std::vector<BenchCell> bench(const RunConfig& config) {
  std::vector<BenchCell> cells;
  for (int nc : {2, 3, 4, 5}) {
    for (int m : {3, 4, 5, 6}) {
      RunConfig c = config;
      c.scenario = "idm-traffic";
      c.idm_speed_min = 6.0;
      c.idm_speed_max = 22.0;
      c.candidates = nc;
      c.obstacle_slots = m;
      c.config_counts.clear();

      BenchCell cell;
      cell.candidates = nc;
      cell.obstacle_slots = m;
      cell.min_ms = std::numeric_limits<double>::infinity();
      const EpisodeLog log = run_scenario_episode(c, c.seeds.front());
      for (const EpisodeStep& s : log.steps) {
        cell.avg_ms += s.solve_ms;
        cell.min_ms = std::min(cell.min_ms, s.solve_ms);
        cell.max_ms = std::max(cell.max_ms, s.solve_ms);
        ++cell.solves;
      }
      if (cell.solves > 0) cell.avg_ms /= cell.solves;
      cells.push_back(cell);
    }
  }
  return cells;
}

}  // namespace cpto
