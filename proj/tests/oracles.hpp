#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <vector>

#include "atlas/map.hpp"
#include "atlas/ranking.hpp"
#include "atlas/summarizer.hpp"

namespace oracle {

struct BruteForceResult {
  double objective = std::numeric_limits<double>::infinity();
  std::vector<std::uint8_t> keep;  // lexicographically smallest optimum
};

/// Enumerates every subset of size n_desired (N must be small).
inline BruteForceResult brute_force_ilp(const atlas::SummarizationProblem& p) {
  const std::size_t n = p.q.size();
  BruteForceResult best;
  std::vector<std::uint8_t> keep(n);
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != p.n_desired) continue;
    double obj = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      keep[i] = (mask >> i) & 1u;
      if (keep[i]) obj += p.q[i];
    }
    for (const auto& row : p.rows) {
      std::uint32_t cov = 0;
      for (auto i : row) cov += keep[i];
      if (cov < p.b) obj += p.lambda * (p.b - cov);
    }
    const bool tie = std::abs(obj - best.objective) <= 1e-12;
    if (best.keep.empty() || (!tie && obj < best.objective) ||
        (tie && std::lexicographical_compare(keep.begin(), keep.end(), best.keep.begin(), best.keep.end()))) {
      best.objective = obj;
      best.keep = keep;
    }
  }
  return best;
}

/// Random instance with N <= max_n landmarks and M <= max_m vertices; every
/// landmark is observed from at least one vertex.
template <typename Rng>
atlas::SummarizationProblem random_problem(Rng& rng, std::size_t max_n = 15, std::size_t max_m = 8) {
  std::uniform_int_distribution<std::size_t> dn(1, max_n), dm(1, max_m);
  std::uniform_real_distribution<double> cost(0.05, 1.0), density(0.15, 0.6), lam(0.1, 3.0);
  std::uniform_int_distribution<std::uint32_t> db(1, 4);
  atlas::SummarizationProblem p;
  const std::size_t n = dn(rng), m = dm(rng);
  for (std::size_t i = 0; i < n; ++i) p.q.push_back(cost(rng));
  std::vector<std::vector<std::uint8_t>> a(m, std::vector<std::uint8_t>(n, 0));
  const double d = density(rng);
  std::bernoulli_distribution on(d);
  std::uniform_int_distribution<std::size_t> any_row(0, m - 1);
  for (std::size_t i = 0; i < n; ++i) {
    bool seen = false;
    for (std::size_t v = 0; v < m; ++v) {
      a[v][i] = on(rng);
      seen = seen || a[v][i];
    }
    if (!seen) a[any_row(rng)][i] = 1;
  }
  p.rows.assign(m, {});
  for (std::size_t v = 0; v < m; ++v) {
    for (std::uint32_t i = 0; i < n; ++i) {
      if (a[v][i]) p.rows[v].push_back(i);
    }
  }
  std::erase_if(p.rows, [](const auto& r) { return r.empty(); });
  std::uniform_int_distribution<std::size_t> dk(1, n);
  p.n_desired = dk(rng);
  p.b = db(rng);
  p.lambda = lam(rng);
  return p;
}

/// Every landmark within `radius` of the query position, by linear scan.
inline std::vector<atlas::LandmarkId> linear_scan_candidates(const atlas::MultiSessionMap& map,
                                                             const atlas::Pose& pose, double radius) {
  std::vector<atlas::LandmarkId> out;
  for (const auto& [id, lm] : map.landmarks()) {
    if (atlas::distance(lm.position, pose.position()) <= radius) out.push_back(id);
  }
  return out;
}

struct Recount {
  std::map<atlas::ClassId, atlas::Tally> classes;
  std::map<atlas::SessionId, atlas::Tally> sessions;
};

/// Tallies recomputed from scratch over the stats' current window.
inline Recount recount(const atlas::RollingSelectionStats& stats, const atlas::MultiSessionMap& map) {
  Recount r;
  for (const auto& rec : stats.window()) {
    auto bump = [&](atlas::LandmarkId id, bool observed) {
      if (!map.contains(id)) return;
      auto& c = r.classes[map.index().class_of(id)];
      (observed ? c.n_observed : c.n_selected) += 1;
      for (auto s : map.landmark(id).sessions) {
        auto& t = r.sessions[s];
        (observed ? t.n_observed : t.n_selected) += 1;
      }
    };
    for (auto id : rec.selected) bump(id, false);
    for (auto id : rec.observed) bump(id, true);
  }
  return r;
}

inline bool tallies_match(const atlas::RollingSelectionStats& stats, const atlas::MultiSessionMap& map) {
  const Recount r = recount(stats, map);
  std::size_t nonzero = 0;
  for (const auto& [c, t] : r.classes) {
    if (!(stats.class_tally(c) == t)) return false;
    nonzero += !(t == atlas::Tally{});
  }
  if (stats.class_tallies().size() != nonzero) return false;
  nonzero = 0;
  for (const auto& [s, t] : r.sessions) {
    if (!(stats.session_tally(s) == t)) return false;
    nonzero += !(t == atlas::Tally{});
  }
  return stats.session_tallies().size() == nonzero;
}

/// Equivalence classes recomputed by grouping landmarks on their session sets.
inline bool index_matches_brute_force(const atlas::MultiSessionMap& map) {
  std::size_t covered = 0;
  for (const auto& [a, la] : map.landmarks()) {
    for (const auto& [b, lb] : map.landmarks()) {
      if ((la.sessions == lb.sessions) != (map.index().class_of(a) == map.index().class_of(b))) return false;
    }
  }
  for (std::size_t c = 0; c < map.index().size(); ++c) {
    const auto& members = map.index().members(atlas::ClassId{c});
    covered += members.size();
    for (auto id : members) {
      if (map.landmark(id).sessions != map.index().key(atlas::ClassId{c})) return false;
    }
  }
  return covered == map.landmarks().size();
}

/// A random multi-session map: `n_rich` rich sessions over a strip of
/// `n_poses` poses each, then `n_obs` observation sessions.
template <typename Rng>
atlas::MultiSessionMap random_map(Rng& rng, std::size_t n_rich, std::size_t per_session, std::size_t n_obs,
                                  std::size_t n_poses = 10, double extent = 100.0) {
  atlas::MultiSessionMap map;
  std::uniform_real_distribution<double> coord(0.0, extent), z(0.0, 4.0);
  std::uniform_int_distribution<std::size_t> pose_idx(0, n_poses - 1);
  std::uniform_int_distribution<std::uint32_t> cnt(1, 3);
  std::bernoulli_distribution coin(0.4);
  std::int64_t ts = 0;
  for (std::size_t s = 0; s < n_rich; ++s) {
    atlas::RichSessionInput in;
    in.timestamp = ++ts;
    in.label = "rich-" + std::to_string(s);
    for (std::size_t k = 0; k < n_poses; ++k)
      in.poses.push_back({extent * static_cast<double>(k) / static_cast<double>(n_poses), extent / 2, 0.0});
    for (std::size_t i = 0; i < per_session; ++i) {
      atlas::NewLandmark nl;
      nl.position = {coord(rng), coord(rng), z(rng)};
      while (nl.observations.size() < 2) nl.observations[pose_idx(rng)] = cnt(rng);
      in.new_landmarks.push_back(std::move(nl));
    }
    for (const auto& [id, lm] : map.landmarks()) {
      if (coin(rng)) in.reobserved[id][pose_idx(rng)] = cnt(rng);
    }
    map.add_rich_session(in);
  }
  std::vector<atlas::VertexId> vids;
  for (const auto& [id, v] : map.vertices()) vids.push_back(id);
  for (std::size_t s = 0; s < n_obs && !vids.empty(); ++s) {
    atlas::ObservationSessionInput in;
    in.timestamp = ++ts;
    in.label = "obs-" + std::to_string(s);
    std::uniform_int_distribution<std::size_t> pick(0, vids.size() - 1);
    for (const auto& [id, lm] : map.landmarks()) {
      if (coin(rng)) in.observed[id][vids[pick(rng)]] = cnt(rng);
    }
    map.add_observation_session(in);
  }
  return map;
}

}  // namespace oracle
