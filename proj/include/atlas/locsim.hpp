#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "atlas/map.hpp"
#include "atlas/ranking.hpp"
#include "atlas/summarizer.hpp"
#include "atlas/worldgen.hpp"

namespace atlas {

/// Stand-in for feature matching under appearance change.
template <typename Rng>
bool simulate_observation(const ObservabilityKernel& kernel, Condition condition, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return u(rng) < kernel.p_det(condition);
}

/// Shared per-(dataset, landmark) uniform draw. A landmark is matchable for
/// the whole sortie or not at all, and every policy evaluated on the same
/// dataset sees the same outcomes.
inline double observation_draw(std::uint64_t dataset_seed, LandmarkId id) {
  return unit_from_hash(hash_all(derive_seed(dataset_seed, SeedStream::observation), id.value));
}

struct PoseErrorParams {
  double sigma0 = 0.15;
  double floor = 0.03;
  std::size_t n_min = 3;
  double failure_error = 1.0;
};

/// Standard deviation of the translation error given the number of observed
/// landmarks; nullopt below n_min (localization failure).
inline std::optional<double> pose_error_sigma(std::size_t n_observed, const PoseErrorParams& p) {
  if (n_observed < p.n_min || n_observed == 0) return std::nullopt;
  return p.floor + p.sigma0 / std::sqrt(static_cast<double>(n_observed));
}

/// One translation error sample |N(0, sigma(n))|, or the failure sentinel.
template <typename Rng>
double pose_error_proxy(std::size_t n_observed, const PoseErrorParams& p, Rng& rng) {
  auto sigma = pose_error_sigma(n_observed, p);
  if (!sigma) return p.failure_error;
  std::normal_distribution<double> z(0.0, 1.0);
  return *sigma * std::abs(z(rng));
}

struct LocSimParams {
  double candidate_radius = 15.0;
  PoseErrorParams pose_error;
};

struct Iteration {
  Pose query_pose;
  std::vector<LandmarkId> candidates;  // sorted by id
  std::vector<LandmarkId> selected;    // selection order
  std::vector<LandmarkId> observed;    // sorted by id
  double translation_error = 0.0;
};

struct LocalizationRun {
  std::string dataset_label;
  std::uint64_t dataset_seed = 0;
  Condition condition;
  SelectionPolicy policy;
  std::vector<Iteration> iterations;
  double rms_translation = 0.0;
  std::size_t failures = 0;

  std::size_t landmarks_selected() const {
    std::size_t n = 0;
    for (const auto& it : iterations) n += it.selected.size();
    return n;
  }
};

inline double recompute_rms(const std::vector<Iteration>& iterations) {
  if (iterations.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& it : iterations) sum += it.translation_error * it.translation_error;
  return std::sqrt(sum / static_cast<double>(iterations.size()));
}

/// Localizes every pose of the dataset against the map with the given
/// selection policy. The map is only read.
inline LocalizationRun localize_dataset(const MultiSessionMap& map, const World& world, const SortieDataset& dataset,
                                        const SelectionPolicy& policy, const LocSimParams& params = {}) {
  policy.validate();
  LocalizationRun run;
  run.dataset_label = dataset.label;
  run.dataset_seed = dataset.seed;
  run.condition = dataset.condition;
  run.policy = policy;
  run.iterations.reserve(dataset.poses.size());

  RollingSelectionStats stats(policy.window);
  stats.rebind(map);
  SelectionPolicy bootstrap = policy;
  bootstrap.selection_ratio = 1.0;

  for (std::size_t k = 0; k < dataset.poses.size(); ++k) {
    Iteration it;
    it.query_pose = dataset.poses[k];
    it.candidates = map.candidate_set(it.query_pose, params.candidate_radius);

    const bool warmup = k < policy.bootstrap &&
                        (policy.ranking == Ranking::f_rank || policy.ranking == Ranking::f_orig);
    const SelectionPolicy& active = warmup ? bootstrap : policy;
    const auto scores = score_candidates(active.ranking, stats, map, it.candidates);
    it.selected = select(active, it.candidates, scores, hash_combine(dataset.seed, k));

    for (LandmarkId id : it.selected) {
      if (observation_draw(dataset.seed, id) < world.p_det(map.landmark(id).position, dataset.condition))
        it.observed.push_back(id);
    }
    std::sort(it.observed.begin(), it.observed.end());

    std::mt19937_64 err_rng(hash_all(derive_seed(dataset.seed, SeedStream::pose_error), k));
    it.translation_error = pose_error_proxy(it.observed.size(), params.pose_error, err_rng);
    if (!pose_error_sigma(it.observed.size(), params.pose_error)) ++run.failures;

    stats.update_window(it.selected, it.observed);
    run.iterations.push_back(std::move(it));
  }
  run.rms_translation = recompute_rms(run.iterations);
  return run;
}

struct ObservationRatio {
  std::vector<std::optional<double>> per_iteration;
  double mean = 0.0;            // mean over defined iterations
  double ratio_of_totals = 0.0;
  std::size_t skipped = 0;      // reference iterations without observations
};

inline ObservationRatio observation_ratio(const LocalizationRun& selected, const LocalizationRun& reference) {
  if (selected.iterations.size() != reference.iterations.size() || selected.dataset_seed != reference.dataset_seed)
    throw Error(ErrorCode::mismatched_runs, "runs are over different datasets");
  ObservationRatio r;
  double sum = 0.0;
  std::size_t defined = 0, total_sel = 0, total_ref = 0;
  for (std::size_t k = 0; k < selected.iterations.size(); ++k) {
    const auto& s = selected.iterations[k];
    const auto& ref = reference.iterations[k];
    if (!(s.query_pose == ref.query_pose)) throw Error(ErrorCode::mismatched_runs, "trajectories differ");
    total_sel += s.observed.size();
    total_ref += ref.observed.size();
    if (ref.observed.empty()) {
      r.per_iteration.push_back(std::nullopt);
      ++r.skipped;
      continue;
    }
    const double v = static_cast<double>(s.observed.size()) / static_cast<double>(ref.observed.size());
    r.per_iteration.push_back(v);
    sum += v;
    ++defined;
  }
  r.mean = defined ? sum / static_cast<double>(defined) : 0.0;
  r.ratio_of_totals = total_ref ? static_cast<double>(total_sel) / static_cast<double>(total_ref) : 0.0;
  return r;
}

/// Rich session iff the translation RMS exceeds the threshold.
inline SessionKind decide_update(const LocalizationRun& run, double threshold_m) {
  return run.rms_translation > threshold_m ? SessionKind::rich : SessionKind::observation;
}

/// Landmark -> nearest map vertex -> count, from a run's observations.
inline ObservationTally observation_tally(const LocalizationRun& run, const MultiSessionMap& map) {
  ObservationTally tally;
  for (const auto& it : run.iterations) {
    if (it.observed.empty()) continue;
    const auto v = map.nearest_vertex(it.query_pose);
    if (!v) continue;
    for (LandmarkId id : it.observed) ++tally[id][*v];
  }
  return tally;
}

/// Landmark -> dataset pose index -> count, for a rich-session ingestion.
inline std::map<LandmarkId, std::map<std::size_t, std::uint32_t>> pose_tally(const LocalizationRun& run) {
  std::map<LandmarkId, std::map<std::size_t, std::uint32_t>> tally;
  for (std::size_t k = 0; k < run.iterations.size(); ++k) {
    for (LandmarkId id : run.iterations[k].observed) ++tally[id][k];
  }
  return tally;
}

struct ProcessConfig {
  double threshold_m = 0.10;
  LocSimParams locsim;
  SummarizerOptions summarizer;
  TriangulationParams triangulation;
};

struct SortieReport {
  std::string label;
  Condition condition;
  std::string policy;
  double rms_m = 0.0;
  SessionKind session_kind = SessionKind::observation;
  SessionId session;
  std::size_t n_landmarks_before = 0;
  std::size_t n_landmarks_after = 0;
  std::size_t n_new_landmarks = 0;
  std::size_t n_rich_sessions = 0;
  std::size_t n_obs_sessions = 0;
  SummaryOutcome summary;
  std::size_t failures = 0;
};

inline nlohmann::json report_to_json(const SortieReport& r) {
  return {{"label", r.label},
          {"condition", r.condition.value},
          {"policy", r.policy},
          {"rms_m", r.rms_m},
          {"session_kind", to_string(r.session_kind)},
          {"session_id", r.session.value},
          {"n_landmarks_before", r.n_landmarks_before},
          {"n_landmarks_after", r.n_landmarks_after},
          {"n_new_landmarks", r.n_new_landmarks},
          {"n_rich_sessions", r.n_rich_sessions},
          {"n_obs_sessions", r.n_obs_sessions},
          {"summarized", r.summary.ran},
          {"summary_exact", r.summary.exact},
          {"summary_removed", r.summary.removed},
          {"failures", r.failures}};
}

struct ProcessedSortie {
  MultiSessionMap map;
  SortieReport report;
  LocalizationRun run;
};

/// Decides and applies exactly one of the two map updates for an already
/// localized sortie. The input map is never modified.
inline ProcessedSortie incorporate_sortie(const MultiSessionMap& map, const World& world, const SortieDataset& dataset,
                                          LocalizationRun run, const ProcessConfig& config) {
  ProcessedSortie out{map, {}, std::move(run)};
  SortieReport& rep = out.report;
  rep.label = dataset.label;
  rep.condition = dataset.condition;
  rep.policy = out.run.policy.name();
  rep.rms_m = out.run.rms_translation;
  rep.failures = out.run.failures;
  rep.n_landmarks_before = map.landmarks().size();
  rep.session_kind = decide_update(out.run, config.threshold_m);

  if (rep.session_kind == SessionKind::rich) {
    auto proposals = propose_landmarks(world, dataset, present_field_indices(world, map), config.triangulation);
    RichSessionInput in;
    in.timestamp = dataset.timestamp;
    in.label = dataset.label;
    in.poses = dataset.poses;
    in.new_landmarks = std::move(proposals.landmarks);
    in.reobserved = pose_tally(out.run);
    rep.n_new_landmarks = in.new_landmarks.size();
    rep.session = out.map.add_rich_session(in);
    rep.summary = summarize_to_cap(out.map, config.summarizer);
  } else {
    rep.session = out.map.add_observation_session({dataset.timestamp, dataset.label, observation_tally(out.run, map)});
  }
  rep.n_landmarks_after = out.map.landmarks().size();
  rep.n_rich_sessions = out.map.count_sessions(SessionKind::rich);
  rep.n_obs_sessions = out.map.count_sessions(SessionKind::observation);
  return out;
}

/// Localize, decide, and apply exactly one of the two map updates. The input
/// map is never modified; on error nothing is returned.
inline ProcessedSortie process_sortie(const MultiSessionMap& map, const World& world, const SortieDataset& dataset,
                                      const SelectionPolicy& policy, const ProcessConfig& config) {
  return incorporate_sortie(map, world, dataset, localize_dataset(map, world, dataset, policy, config.locsim), config);
}

}  // namespace atlas
