#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "atlas/locsim.hpp"
#include "atlas/ranking.hpp"
#include "atlas/summarizer.hpp"
#include "atlas/worldgen.hpp"

namespace atlas {

struct ScheduleEntry {
  std::string label;
  Condition condition;
  // Free-form phase tag, e.g. "stable", "sweep", "post".
  std::string phase;
};

struct Scenario {
  std::string name;
  WorldSpec world;
  TriangulationParams triangulation;
  SortieNoise noise;
  LocSimParams locsim;
  SummarizerOptions summarizer;
  std::vector<ScheduleEntry> schedule;
  std::uint64_t landmark_cap = 3000;
  // Caps swept by experiments; unbounded_cap is the unsummarized map.
  std::vector<std::uint64_t> caps;
  double threshold_m = 0.10;
  std::vector<SelectionPolicy> policies;
  std::uint64_t world_seed = 1;
  std::uint64_t sortie_seed = 2;

  void validate() const {
    if (schedule.empty()) throw Error(ErrorCode::invalid_argument, "scenario schedule is empty");
    if (!(threshold_m > 0.0)) throw Error(ErrorCode::invalid_argument, "threshold must be positive");
    if (landmark_cap == 0) throw Error(ErrorCode::invalid_argument, "landmark cap must be positive");
    if (world.waypoints.size() < 3) throw Error(ErrorCode::invalid_argument, "trajectory needs >= 3 waypoints");
    for (const auto& p : policies) p.validate();
  }

  ProcessConfig process_config() const { return {threshold_m, locsim, summarizer, triangulation}; }

  World make_world(std::uint64_t run_seed) const { return generate_world(world, hash_all(world_seed, run_seed)); }

  SortieDataset make_sortie(const World& w, std::size_t index, std::uint64_t run_seed) const {
    const auto& e = schedule.at(index);
    return generate_sortie(w, e.condition, noise, hash_all(sortie_seed, run_seed, index), e.label,
                           static_cast<std::int64_t>(index + 1));
  }
};

inline std::vector<std::array<double, 2>> rounded_loop(double length, double width, double corner, std::size_t per_corner) {
  std::vector<std::array<double, 2>> pts;
  const double hx = length / 2 - corner, hy = width / 2 - corner;
  const std::array<std::array<double, 2>, 4> centers{{{hx, hy}, {-hx, hy}, {-hx, -hy}, {hx, -hy}}};
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t k = 0; k <= per_corner; ++k) {
      const double a = (static_cast<double>(c) + static_cast<double>(k) / static_cast<double>(per_corner)) *
                       std::numbers::pi / 2.0;
      pts.push_back({centers[c][0] + corner * std::cos(a), centers[c][1] + corner * std::sin(a)});
    }
  }
  return pts;
}

inline std::vector<SelectionPolicy> default_policy_grid() {
  std::vector<SelectionPolicy> grid;
  grid.push_back(SelectionPolicy::reference());
  for (double sr : {0.2, 0.3, 0.4}) grid.push_back({Ranking::f_rank, sr, 1800, 11, 10, 1});
  grid.push_back({Ranking::f_rand, 0.2, 1800, 13, 10, 1});
  grid.push_back({Ranking::f_orig, 0.2, 1800, 17, 10, 1});
  return grid;
}

/// Afternoon-to-night transition in a city block: conditions stay nearly
/// constant, then sweep quickly through dusk into night.
inline Scenario city_dusk() {
  Scenario s;
  s.name = "city_dusk";
  s.world.waypoints = rounded_loop(120.0, 60.0, 12.0, 6);
  s.world.corridor_half_width = 10.0;
  s.world.density = 1.5;
  s.world.kernels = {0.025, 0.06, 0.6, 1.0};
  s.world.poses_per_sortie = 200;
  s.noise = {0.05, 0.005};
  s.landmark_cap = 3000;
  s.caps = {2000, 3000, unbounded_cap};
  s.policies = default_policy_grid();
  s.world_seed = 0xC17D;
  s.sortie_seed = 0xD05C;
  s.schedule = {
      {"13:00", Condition(0.300), "stable"}, {"14:00", Condition(0.305), "stable"},
      {"15:00", Condition(0.298), "stable"}, {"16:00", Condition(0.310), "stable"},
      {"16:30", Condition(0.312), "stable"}, {"17:00", Condition(0.320), "stable"},
      {"17:15", Condition(0.440), "sweep"},  {"17:30", Condition(0.580), "sweep"},
      {"17:43", Condition(0.720), "sweep"},  {"18:00", Condition(0.750), "post"},
  };
  return s;
}

/// A year of daytime visits to a parking lot: appearance drifts once around
/// the whole circle with large visit-to-visit jitter.
inline Scenario parking_year() {
  Scenario s;
  s.name = "parking_year";
  s.world.waypoints = rounded_loop(90.0, 50.0, 10.0, 6);
  s.world.corridor_half_width = 10.0;
  s.world.density = 2.0;
  s.world.kernels = {0.025, 0.07, 0.9, 1.0};
  s.world.poses_per_sortie = 200;
  s.noise = {0.05, 0.005};
  s.landmark_cap = 6000;
  s.caps = {4000, 6000, unbounded_cap};
  s.policies = default_policy_grid();
  s.world_seed = 0x9A4C;
  s.sortie_seed = 0x1EA5;
  static constexpr std::array<const char*, 12> months{"Aug", "Sep", "Oct", "Nov", "Dec", "Jan",
                                                      "Feb", "Mar", "Apr", "May", "Jun", "Jul"};
  // Fixed jitter so the schedule is part of the scenario, not of a seed.
  static constexpr std::array<double, 25> jitter{0.000,  0.010,  -0.015, 0.020,  0.045,  -0.010, 0.030,
                                                 -0.040, 0.015,  0.050,  -0.020, 0.035,  -0.045, 0.010,
                                                 0.040,  -0.030, 0.025,  -0.050, 0.020,  0.045,  -0.015,
                                                 0.030,  -0.035, 0.015,  0.000};
  for (std::size_t j = 0; j < jitter.size(); ++j) {
    const double drift = 0.04 * static_cast<double>(j);
    s.schedule.push_back({std::string(months[(j / 2) % 12]) + "-" + std::to_string(j + 1),
                          Condition(drift + jitter[j]), "drift"});
  }
  return s;
}

inline std::vector<Scenario> builtin_scenarios() { return {city_dusk(), parking_year()}; }

inline Scenario builtin_scenario(const std::string& name) {
  for (auto& s : builtin_scenarios()) {
    if (s.name == name) return s;
  }
  throw Error(ErrorCode::invalid_argument, "unknown scenario '" + name + "'");
}

inline nlohmann::json cap_to_json(std::uint64_t cap) {
  return cap == unbounded_cap ? nlohmann::json("inf") : nlohmann::json(cap);
}

inline std::uint64_t cap_from_json(const nlohmann::json& j) {
  if (j.is_string() && j.get<std::string>() == "inf") return unbounded_cap;
  if (j.is_null()) return unbounded_cap;
  const auto v = j.get<std::uint64_t>();
  if (v == 0) throw Error(ErrorCode::invalid_argument, "cap must be positive");
  return v;
}

inline nlohmann::json scenario_to_json(const Scenario& s) {
  using nlohmann::json;
  json sched = json::array();
  for (const auto& e : s.schedule) sched.push_back({{"label", e.label}, {"condition", e.condition.value}, {"phase", e.phase}});
  json caps = json::array();
  for (auto c : s.caps) caps.push_back(cap_to_json(c));
  json policies = json::array();
  for (const auto& p : s.policies) policies.push_back(policy_to_json(p));
  json waypoints = json::array();
  for (const auto& w : s.world.waypoints) waypoints.push_back({w[0], w[1]});
  return {
      {"name", s.name},
      {"trajectory", {{"waypoints", waypoints}, {"poses_per_sortie", s.world.poses_per_sortie}}},
      {"landmark_field",
       {{"density", s.world.density},
        {"corridor_half_width", s.world.corridor_half_width},
        {"height_max", s.world.height_max},
        {"kernel_width", {s.world.kernels.width_min, s.world.kernels.width_max}},
        {"kernel_peak", {s.world.kernels.peak_min, s.world.kernels.peak_max}}}},
      {"triangulation",
       {{"track_threshold", s.triangulation.track_threshold},
        {"observation_range", s.triangulation.observation_range},
        {"transient_rate", s.triangulation.transient_rate},
        {"transient_detection", s.triangulation.transient_detection}}},
      {"noise", {{"position_sigma", s.noise.position_sigma}, {"heading_sigma", s.noise.heading_sigma}}},
      {"localization",
       {{"candidate_radius", s.locsim.candidate_radius},
        {"sigma0", s.locsim.pose_error.sigma0},
        {"floor", s.locsim.pose_error.floor},
        {"n_min", s.locsim.pose_error.n_min},
        {"failure_error", s.locsim.pose_error.failure_error}}},
      {"summarizer",
       {{"b", s.summarizer.b},
        {"lambda", s.summarizer.lambda},
        {"gamma", s.summarizer.gamma},
        {"exact_limit", s.summarizer.exact_limit}}},
      {"schedule", sched},
      {"landmark_cap", cap_to_json(s.landmark_cap)},
      {"caps", caps},
      {"threshold_m", s.threshold_m},
      {"policies", policies},
      {"seeds", {{"world", s.world_seed}, {"sortie", s.sortie_seed}}},
  };
}

/// Parses a scenario spec; absent sections keep the defaults of `base`.
inline Scenario scenario_from_json(const nlohmann::json& j, Scenario base = {}) {
  Scenario s = std::move(base);
  try {
    s.name = j.value("name", s.name);
    if (j.contains("trajectory")) {
      const auto& t = j["trajectory"];
      if (t.contains("waypoints")) {
        s.world.waypoints.clear();
        for (const auto& w : t["waypoints"]) s.world.waypoints.push_back({w.at(0).get<double>(), w.at(1).get<double>()});
        // The loop closes implicitly; drop an explicit closing waypoint.
        if (s.world.waypoints.size() >= 2) {
          const auto& a = s.world.waypoints.front();
          const auto& b = s.world.waypoints.back();
          if (std::hypot(a[0] - b[0], a[1] - b[1]) < 1e-6) s.world.waypoints.pop_back();
        }
      }
      s.world.poses_per_sortie = t.value("poses_per_sortie", s.world.poses_per_sortie);
    }
    if (j.contains("landmark_field")) {
      const auto& f = j["landmark_field"];
      s.world.density = f.value("density", s.world.density);
      s.world.corridor_half_width = f.value("corridor_half_width", s.world.corridor_half_width);
      s.world.height_max = f.value("height_max", s.world.height_max);
      if (f.contains("kernel_width")) {
        s.world.kernels.width_min = f["kernel_width"].at(0).get<double>();
        s.world.kernels.width_max = f["kernel_width"].at(1).get<double>();
      }
      if (f.contains("kernel_peak")) {
        s.world.kernels.peak_min = f["kernel_peak"].at(0).get<double>();
        s.world.kernels.peak_max = f["kernel_peak"].at(1).get<double>();
      }
    }
    if (j.contains("triangulation")) {
      const auto& t = j["triangulation"];
      s.triangulation.track_threshold = t.value("track_threshold", s.triangulation.track_threshold);
      s.triangulation.observation_range = t.value("observation_range", s.triangulation.observation_range);
      s.triangulation.transient_rate = t.value("transient_rate", s.triangulation.transient_rate);
      s.triangulation.transient_detection = t.value("transient_detection", s.triangulation.transient_detection);
    }
    if (j.contains("noise")) {
      s.noise.position_sigma = j["noise"].value("position_sigma", s.noise.position_sigma);
      s.noise.heading_sigma = j["noise"].value("heading_sigma", s.noise.heading_sigma);
    }
    if (j.contains("localization")) {
      const auto& l = j["localization"];
      s.locsim.candidate_radius = l.value("candidate_radius", s.locsim.candidate_radius);
      s.locsim.pose_error.sigma0 = l.value("sigma0", s.locsim.pose_error.sigma0);
      s.locsim.pose_error.floor = l.value("floor", s.locsim.pose_error.floor);
      s.locsim.pose_error.n_min = l.value("n_min", s.locsim.pose_error.n_min);
      s.locsim.pose_error.failure_error = l.value("failure_error", s.locsim.pose_error.failure_error);
    }
    if (j.contains("summarizer")) {
      const auto& m = j["summarizer"];
      s.summarizer.b = m.value("b", s.summarizer.b);
      s.summarizer.lambda = m.value("lambda", s.summarizer.lambda);
      s.summarizer.gamma = m.value("gamma", s.summarizer.gamma);
      s.summarizer.exact_limit = m.value("exact_limit", s.summarizer.exact_limit);
    }
    if (j.contains("schedule")) {
      s.schedule.clear();
      for (const auto& e : j["schedule"]) {
        s.schedule.push_back({e.at("label").get<std::string>(), Condition(e.at("condition").get<double>()),
                              e.value("phase", std::string{})});
      }
    }
    if (j.contains("landmark_cap")) s.landmark_cap = cap_from_json(j["landmark_cap"]);
    if (j.contains("caps")) {
      s.caps.clear();
      for (const auto& c : j["caps"]) s.caps.push_back(cap_from_json(c));
    }
    s.threshold_m = j.value("threshold_m", s.threshold_m);
    if (j.contains("policies")) {
      s.policies.clear();
      for (const auto& p : j["policies"]) s.policies.push_back(policy_from_json(p));
    }
    if (j.contains("seeds")) {
      s.world_seed = j["seeds"].value("world", s.world_seed);
      s.sortie_seed = j["seeds"].value("sortie", s.sortie_seed);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::invalid_argument, std::string("scenario spec: ") + e.what());
  }
  s.validate();
  return s;
}

}  // namespace atlas
