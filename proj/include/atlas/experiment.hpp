#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <future>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "atlas/locsim.hpp"
#include "atlas/map_io.hpp"
#include "atlas/scenario.hpp"
#include "atlas/stats.hpp"

namespace atlas {

inline constexpr int metrics_schema_version = 1;

struct ExperimentConfig {
  // Built-in scenario name or path of a scenario spec file, as given.
  std::string scenario_ref;
  Scenario scenario;
  std::vector<SelectionPolicy> policies;
  std::vector<std::uint64_t> caps;
  double threshold_m = 0.10;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "out";
  // Policy whose run decides between rich and observation session.
  SelectionPolicy decision = SelectionPolicy::reference();
  // Also localize f_rank policies against the map without observation sessions.
  bool with_without = true;
  std::size_t jobs = 1;

  void validate() const {
    scenario.validate();
    if (policies.empty()) throw Error(ErrorCode::invalid_argument, "at least one policy is required");
    if (seeds.empty()) throw Error(ErrorCode::invalid_argument, "at least one seed is required");
    if (caps.empty()) throw Error(ErrorCode::invalid_argument, "at least one cap is required");
    if (!(threshold_m > 0.0)) throw Error(ErrorCode::invalid_argument, "threshold_m must be positive");
    for (const auto& p : policies) p.validate();
    for (auto c : caps) {
      if (c == 0) throw Error(ErrorCode::invalid_argument, "cap must be positive");
    }
    decision.validate();
  }
};

/// Resolves a built-in scenario name or a spec file. A spec file may name a
/// built-in scenario under "base" and override any of its sections.
inline Scenario load_scenario(const std::string& ref) {
  for (const auto& s : builtin_scenarios()) {
    if (s.name == ref) return s;
  }
  if (!std::filesystem::exists(ref)) throw Error(ErrorCode::invalid_argument, "unknown scenario '" + ref + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(ref));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::invalid_argument, "scenario spec " + ref + ": " + e.what());
  }
  Scenario base = j.contains("base") ? builtin_scenario(j["base"].get<std::string>()) : Scenario{};
  return scenario_from_json(j, std::move(base));
}

inline ExperimentConfig default_config(const std::string& scenario_ref) {
  ExperimentConfig c;
  c.scenario_ref = scenario_ref;
  c.scenario = load_scenario(scenario_ref);
  c.policies = c.scenario.policies;
  c.caps = c.scenario.caps;
  c.threshold_m = c.scenario.threshold_m;
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json policies = nlohmann::json::array();
  for (const auto& p : c.policies) policies.push_back(policy_to_json(p));
  nlohmann::json caps = nlohmann::json::array();
  for (auto cap : c.caps) caps.push_back(cap_to_json(cap));
  return {{"scenario", c.scenario_ref},
          {"scenario_spec", scenario_to_json(c.scenario)},
          {"policies", policies},
          {"caps", caps},
          {"threshold_m", c.threshold_m},
          {"seeds", c.seeds},
          {"output_dir", c.output_dir},
          {"decision", policy_to_json(c.decision)},
          {"with_without", c.with_without}};
}

/// Reads a config document. An embedded "scenario_spec" takes precedence
/// over resolving "scenario" so that a run directory is self-contained.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    c.scenario_ref = j.value("scenario", std::string("city_dusk"));
    if (j.contains("scenario_spec")) {
      c.scenario = scenario_from_json(j["scenario_spec"], Scenario{});
    } else {
      c.scenario = load_scenario(c.scenario_ref);
    }
    c.policies = c.scenario.policies;
    c.caps = c.scenario.caps;
    c.threshold_m = c.scenario.threshold_m;
    if (j.contains("policies")) {
      c.policies.clear();
      for (const auto& p : j["policies"]) c.policies.push_back(policy_from_json(p));
    }
    if (j.contains("caps")) {
      c.caps.clear();
      for (const auto& v : j["caps"]) c.caps.push_back(cap_from_json(v));
    }
    c.threshold_m = j.value("threshold_m", c.threshold_m);
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    c.output_dir = j.value("output_dir", c.output_dir);
    if (j.contains("decision")) c.decision = policy_from_json(j["decision"]);
    c.with_without = j.value("with_without", c.with_without);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::invalid_argument, std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

struct MetricsRow {
  std::string scenario;
  std::uint64_t cap = unbounded_cap;
  std::uint64_t seed = 0;
  std::size_t sortie_index = 0;
  std::string sortie_id;
  double condition = 0.0;
  std::string phase;
  std::string policy;
  std::string ranking;
  double sr = 1.0;
  std::uint64_t m = 0;
  double rms_m = 0.0;
  std::optional<double> mean_r_obs;
  std::optional<double> r_obs_totals;
  std::size_t r_obs_skipped = 0;
  std::size_t landmarks_sent = 0;
  std::size_t failures = 0;
  std::string session_kind;
  std::size_t n_landmarks_before = 0;
  std::size_t n_landmarks_after = 0;
  std::size_t n_rich_sessions = 0;
  std::size_t n_obs_sessions = 0;
  // Rich sessions in the map the sortie was localized against.
  std::size_t stage = 0;
  bool regression = false;
  bool self_localization = false;
};

struct Fig5Row {
  std::string scenario;
  std::uint64_t cap = unbounded_cap;
  std::uint64_t seed = 0;
  std::size_t sortie_index = 0;
  std::string sortie_id;
  std::size_t stage = 0;
  std::size_t n_obs_sessions = 0;
  std::string policy;
  std::optional<double> r_obs_with;
  std::optional<double> r_obs_without;
  bool regression = false;
};

struct CompositionRow {
  std::string scenario;
  std::uint64_t cap = unbounded_cap;
  std::uint64_t seed = 0;
  std::size_t sortie_index = 0;
  std::string sortie_id;
  std::size_t stage = 0;
  std::uint64_t session_id = 0;
  std::string session_label;
  std::size_t n_landmarks = 0;
};

struct CellResult {
  std::uint64_t cap = unbounded_cap;
  std::uint64_t seed = 0;
  std::vector<MetricsRow> rows;
  std::vector<Fig5Row> fig5;
  std::vector<CompositionRow> composition;
  std::vector<nlohmann::json> reports;
  MultiSessionMap final_map;
  std::size_t cap_violations = 0;
};

inline std::string cell_map_path(std::uint64_t cap, std::uint64_t seed) {
  return "maps/cap" + (cap == unbounded_cap ? std::string("inf") : std::to_string(cap)) + "_seed" +
         std::to_string(seed) + ".json";
}

namespace detail {

inline std::optional<double> defined_mean(const ObservationRatio& r) {
  if (r.per_iteration.size() == r.skipped) return std::nullopt;
  return r.mean;
}

inline std::optional<double> defined_totals(const ObservationRatio& r) {
  if (r.per_iteration.size() == r.skipped) return std::nullopt;
  return r.ratio_of_totals;
}

inline MetricsRow base_row(const Scenario& sc, std::uint64_t cap, std::uint64_t seed, std::size_t j,
                           const SortieDataset& d, const LocalizationRun& run, const LocalizationRun& ref) {
  MetricsRow r;
  r.scenario = sc.name;
  r.cap = cap;
  r.seed = seed;
  r.sortie_index = j;
  r.sortie_id = d.label;
  r.condition = d.condition.value;
  r.phase = sc.schedule.at(j).phase;
  r.policy = run.policy.name();
  r.ranking = to_string(run.policy.ranking);
  r.sr = run.policy.selection_ratio;
  r.m = run.policy.max_selected;
  r.rms_m = run.rms_translation;
  const auto ratio = observation_ratio(run, ref);
  r.mean_r_obs = defined_mean(ratio);
  r.r_obs_totals = defined_totals(ratio);
  r.r_obs_skipped = ratio.skipped;
  r.landmarks_sent = run.landmarks_selected();
  r.failures = run.failures;
  return r;
}

/// One localization per distinct policy; the reference run is always first.
inline std::vector<LocalizationRun> localize_all(const MultiSessionMap& map, const World& w, const SortieDataset& d,
                                                 std::span<const SelectionPolicy> policies, const LocSimParams& params) {
  std::vector<LocalizationRun> runs;
  runs.push_back(localize_dataset(map, w, d, SelectionPolicy::reference(), params));
  for (const auto& p : policies) {
    if (p == SelectionPolicy::reference()) continue;
    runs.push_back(localize_dataset(map, w, d, p, params));
  }
  return runs;
}

inline const LocalizationRun& run_for(const std::vector<LocalizationRun>& runs, const SelectionPolicy& p) {
  for (const auto& r : runs) {
    if (r.policy == p) return r;
  }
  throw Error(ErrorCode::invalid_argument, "no run for policy " + p.name());
}

inline std::vector<Fig5Row> with_without(const Scenario& sc, std::uint64_t cap, std::uint64_t seed, std::size_t j,
                                         const SortieDataset& d, const MultiSessionMap& map, const World& w,
                                         const std::vector<LocalizationRun>& runs,
                                         std::span<const SelectionPolicy> policies, const LocSimParams& params,
                                         bool regression) {
  std::vector<Fig5Row> out;
  const LocalizationRun& ref = runs.front();
  const bool has_obs = map.count_sessions(SessionKind::observation) > 0;
  std::optional<MultiSessionMap> without;
  for (const auto& p : policies) {
    if (p.ranking != Ranking::f_rank) continue;
    Fig5Row row;
    row.scenario = sc.name;
    row.cap = cap;
    row.seed = seed;
    row.sortie_index = j;
    row.sortie_id = d.label;
    row.stage = map.count_sessions(SessionKind::rich);
    row.n_obs_sessions = map.count_sessions(SessionKind::observation);
    row.policy = p.name();
    row.regression = regression;
    const auto& with_run = run_for(runs, p);
    row.r_obs_with = defined_mean(observation_ratio(with_run, ref));
    if (!has_obs) {
      row.r_obs_without = row.r_obs_with;
    } else {
      if (!without) without = map.without_observation_sessions();
      row.r_obs_without = defined_mean(observation_ratio(localize_dataset(*without, w, d, p, params), ref));
    }
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace detail

/// Processes the scenario's sorties in schedule order on a fresh map with the
/// given cap, localizing every sortie with every policy against the map
/// available at that time.
inline CellResult run_cell(const ExperimentConfig& cfg, std::uint64_t cap, std::uint64_t seed) {
  const Scenario& sc = cfg.scenario;
  CellResult cell;
  cell.cap = cap;
  cell.seed = seed;
  const World world = sc.make_world(seed);
  ProcessConfig pc = sc.process_config();
  pc.threshold_m = cfg.threshold_m;
  MultiSessionMap map(cap);

  std::vector<SelectionPolicy> policies = cfg.policies;
  if (std::find(policies.begin(), policies.end(), cfg.decision) == policies.end()) policies.push_back(cfg.decision);

  for (std::size_t j = 0; j < sc.schedule.size(); ++j) {
    const SortieDataset d = sc.make_sortie(world, j, seed);
    const auto runs = detail::localize_all(map, world, d, policies, pc.locsim);
    if (cfg.with_without) {
      auto f5 = detail::with_without(sc, cap, seed, j, d, map, world, runs, cfg.policies, pc.locsim, false);
      cell.fig5.insert(cell.fig5.end(), f5.begin(), f5.end());
    }
    ProcessedSortie done = incorporate_sortie(map, world, d, detail::run_for(runs, cfg.decision), pc);
    const SortieReport& rep = done.report;

    for (const auto& p : cfg.policies) {
      MetricsRow row = detail::base_row(sc, cap, seed, j, d, detail::run_for(runs, p), runs.front());
      row.session_kind = to_string(rep.session_kind);
      row.n_landmarks_before = rep.n_landmarks_before;
      row.n_landmarks_after = rep.n_landmarks_after;
      row.n_rich_sessions = rep.n_rich_sessions;
      row.n_obs_sessions = rep.n_obs_sessions;
      row.stage = map.count_sessions(SessionKind::rich);
      cell.rows.push_back(std::move(row));
    }

    auto report = report_to_json(rep);
    report["scenario"] = sc.name;
    report["cap"] = cap_to_json(cap);
    report["seed"] = seed;
    report["sortie_index"] = j;
    cell.reports.push_back(std::move(report));

    map = std::move(done.map);
    if (cap != unbounded_cap && map.landmarks().size() > cap) ++cell.cap_violations;

    std::map<SessionId, std::size_t> per_session;
    for (const auto& [id, lm] : map.landmarks()) ++per_session[lm.origin_session];
    for (const auto& s : map.sessions()) {
      if (s.kind != SessionKind::rich) continue;
      auto it = per_session.find(s.id);
      cell.composition.push_back({sc.name, cap, seed, j, d.label, map.count_sessions(SessionKind::rich), s.id.value,
                                  s.label, it == per_session.end() ? 0 : it->second});
    }
  }
  cell.final_map = std::move(map);
  return cell;
}

/// Runs every (cap, seed) cell; results are ordered by cap then seed
/// regardless of how many jobs run in parallel.
inline std::vector<CellResult> run_chronological(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<std::uint64_t, std::uint64_t>> cells;
  for (auto cap : cfg.caps) {
    for (auto seed : cfg.seeds) cells.emplace_back(cap, seed);
  }
  std::vector<CellResult> out(cells.size());
  const std::size_t jobs = std::max<std::size_t>(1, cfg.jobs);
  for (std::size_t start = 0; start < cells.size(); start += jobs) {
    std::vector<std::future<CellResult>> batch;
    for (std::size_t i = start; i < std::min(cells.size(), start + jobs); ++i) {
      batch.push_back(std::async(jobs > 1 ? std::launch::async : std::launch::deferred,
                                 [&, i] { return run_cell(cfg, cells[i].first, cells[i].second); }));
    }
    for (std::size_t i = 0; i < batch.size(); ++i) out[start + i] = batch[i].get();
  }
  return out;
}

struct RegressionCheck {
  std::size_t sortie_index = 0;
  std::string policy;
  double chronological_rms = 0.0;
  double regression_rms = 0.0;
  bool ok = true;
};

struct RegressionResult {
  std::vector<MetricsRow> rows;
  std::vector<Fig5Row> fig5;
  std::vector<RegressionCheck> checks;
};

inline constexpr double regression_tolerance_m = 0.01;

/// Rejects a final map that was not produced by this scenario and seed.
inline void check_map_matches(const Scenario& sc, const World& world, const MultiSessionMap& map) {
  for (const auto& s : map.sessions()) {
    const auto idx = s.timestamp - 1;
    if (idx < 0 || static_cast<std::size_t>(idx) >= sc.schedule.size() ||
        sc.schedule[static_cast<std::size_t>(idx)].label != s.label)
      throw Error(ErrorCode::invalid_argument, "map session '" + s.label + "' is not part of scenario " + sc.name);
  }
  std::size_t linked = 0;
  for (const auto& [id, lm] : map.landmarks()) linked += world.field_index(lm.position).has_value();
  if (!map.landmarks().empty() && 2 * linked < map.landmarks().size())
    throw Error(ErrorCode::invalid_argument, "map landmarks do not belong to this scenario's world");
}

/// Re-localizes every dataset against the final map with every policy.
/// `chronological` are the cell's rows from run_cell.
inline RegressionResult run_regression(const ExperimentConfig& cfg, const MultiSessionMap& final_map, std::uint64_t cap,
                                       std::uint64_t seed, const std::vector<MetricsRow>& chronological) {
  const Scenario& sc = cfg.scenario;
  const World world = sc.make_world(seed);
  check_map_matches(sc, world, final_map);
  const LocSimParams params = sc.locsim;
  RegressionResult out;
  for (std::size_t j = 0; j < sc.schedule.size(); ++j) {
    const SortieDataset d = sc.make_sortie(world, j, seed);
    const auto runs = detail::localize_all(final_map, world, d, cfg.policies, params);
    if (cfg.with_without) {
      auto f5 = detail::with_without(sc, cap, seed, j, d, final_map, world, runs, cfg.policies, params, true);
      out.fig5.insert(out.fig5.end(), f5.begin(), f5.end());
    }
    for (const auto& p : cfg.policies) {
      const auto& run = detail::run_for(runs, p);
      MetricsRow row = detail::base_row(sc, cap, seed, j, d, run, runs.front());
      row.regression = true;
      row.n_landmarks_before = row.n_landmarks_after = final_map.landmarks().size();
      row.n_rich_sessions = final_map.count_sessions(SessionKind::rich);
      row.n_obs_sessions = final_map.count_sessions(SessionKind::observation);
      row.stage = row.n_rich_sessions;
      auto chrono = std::find_if(chronological.begin(), chronological.end(), [&](const MetricsRow& r) {
        return !r.regression && r.cap == cap && r.seed == seed && r.sortie_index == j && r.policy == row.policy;
      });
      if (chrono == chronological.end())
        throw Error(ErrorCode::invalid_argument, "no chronological row for " + d.label + " / " + row.policy);
      row.session_kind = chrono->session_kind;
      row.self_localization = chrono->session_kind == to_string(SessionKind::rich);
      out.checks.push_back({j, row.policy, chrono->rms_m, row.rms_m,
                            row.rms_m <= chrono->rms_m + regression_tolerance_m});
      out.rows.push_back(std::move(row));
    }
  }
  return out;
}

struct HeldOutResult {
  std::vector<double> conditions;
  // Policy name -> mean r_obs per held-out sortie.
  std::map<std::string, std::vector<double>> r_obs;
};

/// Localizes fresh sorties at random conditions (disjoint from the schedule's
/// sortie seeds) against a given map.
inline HeldOutResult evaluate_held_out(const Scenario& sc, const World& world, const MultiSessionMap& map,
                                       std::uint64_t seed, std::size_t n_sorties,
                                       std::span<const SelectionPolicy> policies) {
  HeldOutResult out;
  std::mt19937_64 rng(hash_all(sc.sortie_seed, seed, 0x68656c64ULL));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < n_sorties; ++i) {
    const Condition c(unit(rng));
    const SortieDataset d = generate_sortie(world, c, sc.noise, hash_all(sc.sortie_seed, seed, 0x68656c64ULL, i),
                                            "held-out-" + std::to_string(i + 1));
    out.conditions.push_back(c.value);
    const auto runs = detail::localize_all(map, world, d, policies, sc.locsim);
    for (const auto& p : policies) {
      out.r_obs[p.name()].push_back(observation_ratio(detail::run_for(runs, p), runs.front()).mean);
    }
  }
  return out;
}

namespace csv {

inline std::string num(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

inline std::string opt(const std::optional<double>& v) { return v ? num(*v) : std::string{}; }

inline std::string cap(std::uint64_t c) { return c == unbounded_cap ? "inf" : std::to_string(c); }

inline std::string join(const std::vector<std::string>& fields) {
  std::string s;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (fields[i].find_first_of(",\"\n") != std::string::npos)
      throw Error(ErrorCode::invalid_argument, "csv field needs quoting: " + fields[i]);
    if (i) s += ',';
    s += fields[i];
  }
  return s + '\n';
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(ErrorCode::corrupt_stream, "csv column '" + name + "' missing");
    return static_cast<std::size_t>(it - header.begin());
  }
};

inline std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline Table parse(const std::string& text) {
  Table t;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split(line);
    if (first) {
      t.header = std::move(fields);
      first = false;
      continue;
    }
    if (fields.size() != t.header.size()) throw Error(ErrorCode::corrupt_stream, "csv row has wrong field count");
    t.rows.push_back(std::move(fields));
  }
  return t;
}

inline std::uint64_t parse_cap(const std::string& s) { return s == "inf" ? unbounded_cap : std::stoull(s); }
inline std::optional<double> parse_opt(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

}  // namespace csv

inline const std::vector<std::string>& metrics_header() {
  static const std::vector<std::string> h{
      "sortie_id",      "condition",      "policy",          "sr",
      "m",              "rms_m",          "mean_r_obs",      "session_kind",
      "n_landmarks_before", "n_landmarks_after", "n_rich_sessions", "n_obs_sessions",
      "r_obs_totals",   "r_obs_skipped",  "landmarks_sent",  "failures",
      "stage",          "scenario",       "cap",             "seed",
      "sortie_index",   "phase",          "ranking",         "regression",
      "self_localization"};
  return h;
}

inline std::string metrics_line(const MetricsRow& r) {
  return csv::join({r.sortie_id,
                    csv::num(r.condition, 4),
                    r.policy,
                    csv::num(r.sr, 2),
                    csv::cap(r.m),
                    csv::num(r.rms_m),
                    csv::opt(r.mean_r_obs),
                    r.session_kind,
                    std::to_string(r.n_landmarks_before),
                    std::to_string(r.n_landmarks_after),
                    std::to_string(r.n_rich_sessions),
                    std::to_string(r.n_obs_sessions),
                    csv::opt(r.r_obs_totals),
                    std::to_string(r.r_obs_skipped),
                    std::to_string(r.landmarks_sent),
                    std::to_string(r.failures),
                    std::to_string(r.stage),
                    r.scenario,
                    csv::cap(r.cap),
                    std::to_string(r.seed),
                    std::to_string(r.sortie_index),
                    r.phase,
                    r.ranking,
                    r.regression ? "true" : "false",
                    r.self_localization ? "true" : "false"});
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string s = csv::join(metrics_header());
  for (const auto& r : rows) s += metrics_line(r);
  return s;
}

inline std::vector<MetricsRow> parse_metrics(const std::string& text) {
  const auto t = csv::parse(text);
  std::vector<MetricsRow> out;
  auto col = [&](const char* n) { return t.column(n); };
  const std::size_t c_id = col("sortie_id"), c_cond = col("condition"), c_pol = col("policy"), c_sr = col("sr"),
                    c_m = col("m"), c_rms = col("rms_m"), c_r = col("mean_r_obs"), c_kind = col("session_kind"),
                    c_lb = col("n_landmarks_before"), c_la = col("n_landmarks_after"), c_nr = col("n_rich_sessions"),
                    c_no = col("n_obs_sessions"), c_rt = col("r_obs_totals"), c_rs = col("r_obs_skipped"),
                    c_sent = col("landmarks_sent"), c_fail = col("failures"), c_stage = col("stage"),
                    c_sc = col("scenario"), c_cap = col("cap"), c_seed = col("seed"), c_idx = col("sortie_index"),
                    c_phase = col("phase"), c_rank = col("ranking"), c_reg = col("regression"),
                    c_self = col("self_localization");
  try {
    for (const auto& f : t.rows) {
      MetricsRow r;
      r.sortie_id = f[c_id];
      r.condition = std::stod(f[c_cond]);
      r.policy = f[c_pol];
      r.sr = std::stod(f[c_sr]);
      r.m = csv::parse_cap(f[c_m]);
      r.rms_m = std::stod(f[c_rms]);
      r.mean_r_obs = csv::parse_opt(f[c_r]);
      r.session_kind = f[c_kind];
      r.n_landmarks_before = std::stoull(f[c_lb]);
      r.n_landmarks_after = std::stoull(f[c_la]);
      r.n_rich_sessions = std::stoull(f[c_nr]);
      r.n_obs_sessions = std::stoull(f[c_no]);
      r.r_obs_totals = csv::parse_opt(f[c_rt]);
      r.r_obs_skipped = std::stoull(f[c_rs]);
      r.landmarks_sent = std::stoull(f[c_sent]);
      r.failures = std::stoull(f[c_fail]);
      r.stage = std::stoull(f[c_stage]);
      r.scenario = f[c_sc];
      r.cap = csv::parse_cap(f[c_cap]);
      r.seed = std::stoull(f[c_seed]);
      r.sortie_index = std::stoull(f[c_idx]);
      r.phase = f[c_phase];
      r.ranking = f[c_rank];
      r.regression = f[c_reg] == "true";
      r.self_localization = f[c_self] == "true";
      out.push_back(std::move(r));
    }
  } catch (const std::logic_error& e) {
    throw Error(ErrorCode::corrupt_stream, std::string("metrics csv: ") + e.what());
  }
  return out;
}

inline std::string fig5_csv(const std::vector<Fig5Row>& rows) {
  std::string s = csv::join({"scenario", "cap", "seed", "sortie_index", "sortie_id", "stage", "n_obs_sessions",
                             "policy", "r_obs_with", "r_obs_without", "gap", "regression"});
  for (const auto& r : rows) {
    std::optional<double> gap;
    if (r.r_obs_with && r.r_obs_without) gap = *r.r_obs_with - *r.r_obs_without;
    s += csv::join({r.scenario, csv::cap(r.cap), std::to_string(r.seed), std::to_string(r.sortie_index), r.sortie_id,
                    std::to_string(r.stage), std::to_string(r.n_obs_sessions), r.policy, csv::opt(r.r_obs_with),
                    csv::opt(r.r_obs_without), csv::opt(gap), r.regression ? "true" : "false"});
  }
  return s;
}

inline std::vector<Fig5Row> parse_fig5(const std::string& text) {
  const auto t = csv::parse(text);
  std::vector<Fig5Row> out;
  try {
    for (const auto& f : t.rows) {
      Fig5Row r;
      r.scenario = f[t.column("scenario")];
      r.cap = csv::parse_cap(f[t.column("cap")]);
      r.seed = std::stoull(f[t.column("seed")]);
      r.sortie_index = std::stoull(f[t.column("sortie_index")]);
      r.sortie_id = f[t.column("sortie_id")];
      r.stage = std::stoull(f[t.column("stage")]);
      r.n_obs_sessions = std::stoull(f[t.column("n_obs_sessions")]);
      r.policy = f[t.column("policy")];
      r.r_obs_with = csv::parse_opt(f[t.column("r_obs_with")]);
      r.r_obs_without = csv::parse_opt(f[t.column("r_obs_without")]);
      r.regression = f[t.column("regression")] == "true";
      out.push_back(std::move(r));
    }
  } catch (const std::logic_error& e) {
    throw Error(ErrorCode::corrupt_stream, std::string("fig5 csv: ") + e.what());
  }
  return out;
}

inline std::string composition_csv(const std::vector<CompositionRow>& rows) {
  std::string s = csv::join(
      {"scenario", "cap", "seed", "sortie_index", "sortie_id", "stage", "session_id", "session_label", "n_landmarks"});
  for (const auto& r : rows) {
    s += csv::join({r.scenario, csv::cap(r.cap), std::to_string(r.seed), std::to_string(r.sortie_index), r.sortie_id,
                    std::to_string(r.stage), std::to_string(r.session_id), r.session_label,
                    std::to_string(r.n_landmarks)});
  }
  return s;
}

inline std::filesystem::path run_path(const std::string& dir, const std::string& name) {
  return std::filesystem::path(dir) / name;
}

/// Writes metrics.csv, fig5.csv, composition.csv, sorties.jsonl, the final
/// maps and the run.json manifest. Returns the manifest.
inline nlohmann::json write_run(const ExperimentConfig& cfg, const std::vector<CellResult>& cells) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(run_path(cfg.output_dir, "maps"), ec);
  if (ec) throw Error(ErrorCode::io, "cannot create " + cfg.output_dir + ": " + ec.message());

  std::vector<MetricsRow> rows;
  std::vector<Fig5Row> fig5;
  std::vector<CompositionRow> composition;
  std::string jsonl;
  nlohmann::json cell_docs = nlohmann::json::array();
  std::size_t violations = 0;
  for (const auto& c : cells) {
    rows.insert(rows.end(), c.rows.begin(), c.rows.end());
    fig5.insert(fig5.end(), c.fig5.begin(), c.fig5.end());
    composition.insert(composition.end(), c.composition.begin(), c.composition.end());
    for (const auto& r : c.reports) jsonl += r.dump() + "\n";
    const std::string map_rel = cell_map_path(c.cap, c.seed);
    save_map_file(c.final_map, run_path(cfg.output_dir, map_rel).string());
    violations += c.cap_violations;
    cell_docs.push_back({{"cap", cap_to_json(c.cap)},
                         {"seed", c.seed},
                         {"map", map_rel},
                         {"cap_violations", c.cap_violations},
                         {"n_landmarks", c.final_map.landmarks().size()},
                         {"n_rich_sessions", c.final_map.count_sessions(SessionKind::rich)},
                         {"n_obs_sessions", c.final_map.count_sessions(SessionKind::observation)}});
  }
  write_file(run_path(cfg.output_dir, "metrics.csv").string(), metrics_csv(rows));
  write_file(run_path(cfg.output_dir, "fig5.csv").string(), fig5_csv(fig5));
  write_file(run_path(cfg.output_dir, "composition.csv").string(), composition_csv(composition));
  write_file(run_path(cfg.output_dir, "sorties.jsonl").string(), jsonl);

  nlohmann::json manifest = {{"schema_version", metrics_schema_version},
                             {"config", config_to_json(cfg)},
                             {"cells", cell_docs},
                             {"checks", {{"cap_violations", violations}, {"passed", violations == 0}}}};
  write_file(run_path(cfg.output_dir, "run.json").string(), manifest.dump(2) + "\n");
  return manifest;
}

inline nlohmann::json read_manifest(const std::string& dir) {
  try {
    auto j = nlohmann::json::parse(read_file(run_path(dir, "run.json").string()));
    if (j.value("schema_version", 0) != metrics_schema_version)
      throw Error(ErrorCode::version_mismatch, "unsupported run.json schema version");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::corrupt_stream, std::string("run.json: ") + e.what());
  }
}

/// Re-localizes every cell of a run directory against its final map and
/// writes regression.csv and fig5_regression.csv. Returns the checks.
inline std::vector<RegressionCheck> regress_run_dir(const std::string& dir, std::size_t* failures = nullptr) {
  const auto manifest = read_manifest(dir);
  ExperimentConfig cfg = config_from_json(manifest.at("config"));
  cfg.output_dir = dir;
  const auto chronological = parse_metrics(read_file(run_path(dir, "metrics.csv").string()));
  std::vector<MetricsRow> rows;
  std::vector<Fig5Row> fig5;
  std::vector<RegressionCheck> checks;
  for (const auto& c : manifest.at("cells")) {
    const auto cap = cap_from_json(c.at("cap"));
    const auto seed = c.at("seed").get<std::uint64_t>();
    const auto map = load_map_file(run_path(dir, c.at("map").get<std::string>()).string());
    auto r = run_regression(cfg, map, cap, seed, chronological);
    rows.insert(rows.end(), r.rows.begin(), r.rows.end());
    fig5.insert(fig5.end(), r.fig5.begin(), r.fig5.end());
    checks.insert(checks.end(), r.checks.begin(), r.checks.end());
  }
  write_file(run_path(dir, "regression.csv").string(), metrics_csv(rows));
  write_file(run_path(dir, "fig5_regression.csv").string(), fig5_csv(fig5));
  if (failures) {
    *failures = static_cast<std::size_t>(std::count_if(checks.begin(), checks.end(), [&](const RegressionCheck& k) {
      return !k.ok && k.policy == cfg.decision.name();
    }));
  }
  return checks;
}

struct StageGap {
  std::size_t stage = 0;
  std::size_t n = 0;
  double mean_gap = 0.0;
};

struct ObservationSessionEffect {
  std::string policy;
  std::vector<StageGap> stages;
  // Per seed: mean r_obs with / without observation sessions at stage 1.
  std::vector<double> early_with;
  std::vector<double> early_without;
  double early_delta = 0.0;
  double spearman_rho = 0.0;
  PairedTest paired;
};

/// Fig. 5 style effect of observation sessions for one policy and cap.
inline ObservationSessionEffect observation_session_effect(const std::vector<Fig5Row>& rows, const std::string& policy,
                                                           std::uint64_t cap, std::size_t early_stage = 1) {
  ObservationSessionEffect e;
  e.policy = policy;
  std::map<std::size_t, std::vector<double>> by_stage;
  std::map<std::uint64_t, std::pair<std::vector<double>, std::vector<double>>> early;
  for (const auto& r : rows) {
    if (r.regression || r.policy != policy || r.cap != cap || r.stage == 0) continue;
    if (!r.r_obs_with || !r.r_obs_without) continue;
    by_stage[r.stage].push_back(*r.r_obs_with - *r.r_obs_without);
    if (r.stage == early_stage) {
      early[r.seed].first.push_back(*r.r_obs_with);
      early[r.seed].second.push_back(*r.r_obs_without);
    }
  }
  std::vector<double> xs, ys;
  for (const auto& [stage, gaps] : by_stage) {
    e.stages.push_back({stage, gaps.size(), mean_of(gaps)});
    xs.push_back(static_cast<double>(stage));
    ys.push_back(mean_of(gaps));
  }
  if (xs.size() >= 2) e.spearman_rho = spearman(xs, ys);
  for (const auto& [seed, wv] : early) {
    e.early_with.push_back(mean_of(wv.first));
    e.early_without.push_back(mean_of(wv.second));
  }
  if (!e.early_with.empty()) e.early_delta = mean_of(e.early_with) - mean_of(e.early_without);
  if (e.early_with.size() >= 2) e.paired = paired_t_test(e.early_with, e.early_without);
  return e;
}

/// Aggregates metrics rows into the summary document. Throws if the
/// reference policy's rows are missing.
inline nlohmann::json compare_policies(const std::vector<MetricsRow>& rows, const std::vector<Fig5Row>& fig5,
                                       const std::vector<MetricsRow>& regression = {}) {
  using nlohmann::json;
  const std::string ref_name = SelectionPolicy::reference().name();
  if (std::none_of(rows.begin(), rows.end(), [&](const MetricsRow& r) { return r.policy == ref_name; }))
    throw Error(ErrorCode::invalid_argument, "metrics have no reference (" + ref_name + ") rows");

  json datasets = json::array();
  auto add_datasets = [&](const std::vector<MetricsRow>& rs) {
    for (const auto& r : rs) {
      datasets.push_back({{"scenario", r.scenario},
                          {"cap", cap_to_json(r.cap)},
                          {"seed", r.seed},
                          {"sortie_index", r.sortie_index},
                          {"sortie_id", r.sortie_id},
                          {"policy", r.policy},
                          {"mean_r_obs", r.mean_r_obs ? json(*r.mean_r_obs) : json(nullptr)},
                          {"rms_m", r.rms_m},
                          {"landmarks_sent", r.landmarks_sent},
                          {"regression", r.regression},
                          {"self_localization", r.self_localization}});
    }
  };
  add_datasets(rows);
  add_datasets(regression);

  std::set<std::uint64_t> caps;
  for (const auto& r : rows) caps.insert(r.cap);
  json by_cap = json::array();
  bool reference_identity = true;
  for (auto cap : caps) {
    struct Acc {
      std::vector<double> r_obs, rms;
      std::size_t sent = 0;
      double sr = 0.0;
      std::string ranking;
    };
    std::map<std::string, Acc> acc;
    for (const auto& r : rows) {
      if (r.cap != cap) continue;
      auto& a = acc[r.policy];
      a.sr = r.sr;
      a.ranking = r.ranking;
      a.rms.push_back(r.rms_m);
      a.sent += r.landmarks_sent;
      if (r.mean_r_obs) a.r_obs.push_back(*r.mean_r_obs);
      if (r.policy == ref_name && r.mean_r_obs && std::abs(*r.mean_r_obs - 1.0) > 1e-12) reference_identity = false;
    }
    json policies = json::object();
    for (const auto& [name, a] : acc) {
      policies[name] = {{"ranking", a.ranking},
                        {"sr", a.sr},
                        {"mean_r_obs", a.r_obs.empty() ? json(nullptr) : json(mean_of(a.r_obs))},
                        {"mean_rms_m", mean_of(a.rms)},
                        {"landmarks_sent", a.sent},
                        {"n_datasets", a.rms.size()}};
    }
    auto mean_for = [&](const std::string& ranking, double sr) -> std::optional<double> {
      for (const auto& [name, a] : acc) {
        if (a.ranking == ranking && std::abs(a.sr - sr) < 1e-9 && !a.r_obs.empty()) return mean_of(a.r_obs);
      }
      return std::nullopt;
    };
    json deltas = json::array();
    json sweep = json::array();
    std::set<double> srs;
    for (const auto& [name, a] : acc) {
      if (a.ranking == "f_rank") srs.insert(a.sr);
    }
    for (double sr : srs) {
      const auto rank = mean_for("f_rank", sr);
      sweep.push_back({{"sr", sr}, {"mean_r_obs", rank ? json(*rank) : json(nullptr)}});
      json d = {{"sr", sr}};
      if (const auto rnd = mean_for("f_rand", sr); rank && rnd) d["f_rank_minus_f_rand"] = *rank - *rnd;
      if (const auto orig = mean_for("f_orig", sr); rank && orig) d["f_rank_minus_f_orig"] = *rank - *orig;
      deltas.push_back(d);
    }
    json effects = json::array();
    std::set<std::string> fig5_policies;
    for (const auto& r : fig5) {
      if (r.cap == cap && !r.regression) fig5_policies.insert(r.policy);
    }
    for (const auto& pol : fig5_policies) {
      const auto e = observation_session_effect(fig5, pol, cap);
      json stages = json::array();
      for (const auto& s : e.stages) stages.push_back({{"stage", s.stage}, {"n", s.n}, {"mean_gap", s.mean_gap}});
      effects.push_back({{"policy", pol},
                         {"per_stage", stages},
                         {"early_stage_delta", e.early_delta},
                         {"spearman_rho", e.spearman_rho},
                         {"paired_test", {{"n", e.paired.n}, {"mean_diff", e.paired.mean_diff}, {"t", e.paired.t},
                                          {"p_greater", e.paired.p_greater}}}});
    }
    by_cap.push_back({{"cap", cap_to_json(cap)},
                      {"policies", policies},
                      {"deltas", deltas},
                      {"sr_sweep", sweep},
                      {"observation_sessions", effects}});
  }

  json regression_doc = nullptr;
  if (!regression.empty()) {
    std::size_t violations = 0, self_loc = 0;
    for (const auto& r : regression) {
      self_loc += r.self_localization && r.policy == ref_name;
      auto chrono = std::find_if(rows.begin(), rows.end(), [&](const MetricsRow& c) {
        return c.cap == r.cap && c.seed == r.seed && c.sortie_index == r.sortie_index && c.policy == r.policy;
      });
      if (r.policy == ref_name && chrono != rows.end() && r.rms_m > chrono->rms_m + regression_tolerance_m) ++violations;
    }
    regression_doc = {{"tolerance_m", regression_tolerance_m},
                      {"violations", violations},
                      {"self_localization_datasets", self_loc}};
  }

  return {{"schema_version", metrics_schema_version},
          {"scenario", rows.front().scenario},
          {"reference_policy", ref_name},
          {"reference_r_obs_is_one", reference_identity},
          {"datasets", datasets},
          {"by_cap", by_cap},
          {"regression", regression_doc}};
}

inline nlohmann::json compare_run_dir(const std::string& dir) {
  const auto rows = parse_metrics(read_file(run_path(dir, "metrics.csv").string()));
  std::vector<Fig5Row> fig5;
  if (std::filesystem::exists(run_path(dir, "fig5.csv"))) fig5 = parse_fig5(read_file(run_path(dir, "fig5.csv").string()));
  std::vector<MetricsRow> regression;
  if (std::filesystem::exists(run_path(dir, "regression.csv")))
    regression = parse_metrics(read_file(run_path(dir, "regression.csv").string()));
  auto summary = compare_policies(rows, fig5, regression);
  write_file(run_path(dir, "summary.json").string(), summary.dump(2) + "\n");
  return summary;
}

}  // namespace atlas
