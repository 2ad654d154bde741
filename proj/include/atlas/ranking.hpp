#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "atlas/map.hpp"

namespace atlas {

enum class Ranking { f_zero, f_rand, f_rank, f_orig };

inline const char* to_string(Ranking r) {
  switch (r) {
    case Ranking::f_zero: return "f_0";
    case Ranking::f_rand: return "f_rand";
    case Ranking::f_rank: return "f_rank";
    case Ranking::f_orig: return "f_orig";
  }
  return "?";
}

inline Ranking ranking_from_string(const std::string& s) {
  if (s == "f_0") return Ranking::f_zero;
  if (s == "f_rand") return Ranking::f_rand;
  if (s == "f_rank") return Ranking::f_rank;
  if (s == "f_orig") return Ranking::f_orig;
  throw Error(ErrorCode::invalid_argument, "unknown ranking function '" + s + "'");
}

struct SelectionPolicy {
  Ranking ranking = Ranking::f_zero;
  double selection_ratio = 1.0;
  std::uint64_t max_selected = 1800;
  std::uint64_t rng_seed = 0;
  // Rolling-statistics window in localization iterations.
  std::size_t window = 10;
  // Leading iterations that select every candidate to warm up the statistics.
  std::size_t bootstrap = 1;

  void validate() const {
    if (!(selection_ratio > 0.0 && selection_ratio <= 1.0))
      throw Error(ErrorCode::invalid_argument, "selection ratio must be in (0, 1]");
    if (max_selected < 1) throw Error(ErrorCode::invalid_argument, "max_selected must be >= 1");
    if (window < 1) throw Error(ErrorCode::invalid_argument, "window must be >= 1");
  }

  std::string name() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s@%.2f", to_string(ranking), selection_ratio);
    return buf;
  }

  /// The all-candidates reference policy.
  static SelectionPolicy reference() { return {Ranking::f_zero, 1.0, std::numeric_limits<std::uint64_t>::max(), 0, 10, 0}; }

  friend bool operator==(const SelectionPolicy&, const SelectionPolicy&) = default;
};

inline nlohmann::json policy_to_json(const SelectionPolicy& p) {
  return {{"ranking", to_string(p.ranking)}, {"sr", p.selection_ratio}, {"m", p.max_selected},
          {"window", p.window},              {"seed", p.rng_seed},      {"bootstrap", p.bootstrap}};
}

inline SelectionPolicy policy_from_json(const nlohmann::json& j) {
  SelectionPolicy p;
  p.ranking = ranking_from_string(j.at("ranking").get<std::string>());
  p.selection_ratio = j.value("sr", 1.0);
  p.max_selected = j.value("m", std::uint64_t{1800});
  p.window = j.value("window", std::size_t{10});
  p.rng_seed = j.value("seed", std::uint64_t{0});
  p.bootstrap = j.value("bootstrap", std::size_t{1});
  p.validate();
  return p;
}

struct Tally {
  std::uint64_t n_selected = 0;
  std::uint64_t n_observed = 0;

  double ratio() const { return n_selected > 0 ? static_cast<double>(n_observed) / static_cast<double>(n_selected) : 0.0; }
  friend bool operator==(const Tally&, const Tally&) = default;
};

struct IterationRecord {
  std::vector<LandmarkId> selected;  // sorted
  std::vector<LandmarkId> observed;  // sorted, subset of selected
};

/// Sliding window over the last `window_len` localization iterations with
/// per-class and per-session selected/observed counts. Counts are incidences:
/// a landmark selected in three iterations of the window contributes three.
///
/// The tallies are relative to a bound map (its equivalence classes and
/// session sets). The bound map must outlive the stats or be rebound.
class RollingSelectionStats {
 public:
  explicit RollingSelectionStats(std::size_t window_len = 10) : window_len_(window_len) {
    if (window_len_ == 0) throw Error(ErrorCode::invalid_argument, "window_len must be positive");
  }

  std::size_t window_len() const { return window_len_; }
  const std::deque<IterationRecord>& window() const { return window_; }
  const MultiSessionMap* bound_map() const { return map_; }

  /// Binds to a map and recounts every tally from the window.
  void rebind(const MultiSessionMap& map) {
    map_ = &map;
    class_tallies_.clear();
    session_tallies_.clear();
    for (const auto& r : window_) apply(r, +1);
  }

  void update_window(std::vector<LandmarkId> selected, std::vector<LandmarkId> observed) {
    std::sort(selected.begin(), selected.end());
    selected.erase(std::unique(selected.begin(), selected.end()), selected.end());
    std::sort(observed.begin(), observed.end());
    observed.erase(std::unique(observed.begin(), observed.end()), observed.end());
    if (!std::includes(selected.begin(), selected.end(), observed.begin(), observed.end()))
      throw Error(ErrorCode::invalid_argument, "observed landmarks must be a subset of the selection");
    window_.push_back({std::move(selected), std::move(observed)});
    apply(window_.back(), +1);
    while (window_.size() > window_len_) {
      apply(window_.front(), -1);
      window_.pop_front();
    }
  }

  Tally class_tally(ClassId c) const {
    auto it = class_tallies_.find(c);
    return it == class_tallies_.end() ? Tally{} : it->second;
  }

  Tally session_tally(SessionId s) const {
    auto it = session_tallies_.find(s);
    return it == session_tallies_.end() ? Tally{} : it->second;
  }

  const std::unordered_map<ClassId, Tally>& class_tallies() const { return class_tallies_; }
  const std::unordered_map<SessionId, Tally>& session_tallies() const { return session_tallies_; }

 private:
  void apply(const IterationRecord& r, int sign) {
    if (!map_) return;
    auto bump = [&](LandmarkId id, bool observed) {
      auto it = map_->landmarks().find(id);
      if (it == map_->landmarks().end()) return;
      const ClassId c = map_->index().class_of(id);
      adjust(class_tallies_[c], observed, sign);
      for (SessionId s : it->second.sessions) adjust(session_tallies_[s], observed, sign);
    };
    for (LandmarkId id : r.selected) bump(id, false);
    for (LandmarkId id : r.observed) bump(id, true);
    if (sign < 0) {
      std::erase_if(class_tallies_, [](const auto& kv) { return kv.second == Tally{}; });
      std::erase_if(session_tallies_, [](const auto& kv) { return kv.second == Tally{}; });
    }
  }

  static void adjust(Tally& t, bool observed, int sign) {
    std::uint64_t& field = observed ? t.n_observed : t.n_selected;
    field = sign > 0 ? field + 1 : field - 1;
  }

  std::size_t window_len_;
  const MultiSessionMap* map_ = nullptr;
  std::deque<IterationRecord> window_;
  std::unordered_map<ClassId, Tally> class_tallies_;
  std::unordered_map<SessionId, Tally> session_tallies_;
};

/// Observability estimate of the landmark's equivalence class from the
/// recently selected and observed members of that class; 0 if none of its
/// members were selected in the window.
inline double score_f_rank(const RollingSelectionStats& stats, const EquivalenceClassIndex& index, LandmarkId id) {
  return stats.class_tally(index.class_of(id)).ratio();
}

/// Baseline: each session is weighted by the observed/selected ratio of
/// window landmarks affiliated with it; a landmark scores the best weight
/// among its sessions.
inline double score_f_orig(const RollingSelectionStats& stats, const MultiSessionMap& map, LandmarkId id) {
  double best = 0.0;
  for (SessionId s : map.landmark(id).sessions) best = std::max(best, stats.session_tally(s).ratio());
  return best;
}

inline std::vector<double> score_candidates(Ranking ranking, const RollingSelectionStats& stats,
                                            const MultiSessionMap& map, std::span<const LandmarkId> candidates) {
  std::vector<double> scores(candidates.size(), 0.0);
  if (ranking == Ranking::f_rank) {
    for (std::size_t i = 0; i < candidates.size(); ++i) scores[i] = score_f_rank(stats, map.index(), candidates[i]);
  } else if (ranking == Ranking::f_orig) {
    for (std::size_t i = 0; i < candidates.size(); ++i) scores[i] = score_f_orig(stats, map, candidates[i]);
  }
  return scores;
}

inline std::size_t selection_size(double selection_ratio, std::uint64_t max_selected, std::size_t n_candidates) {
  if (n_candidates == 0) return 0;
  // Guard against 0.2 * 10 = 2.0000000000000004 style round-up.
  const double raw = selection_ratio * static_cast<double>(n_candidates);
  auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  k = std::clamp<std::size_t>(k, 1, n_candidates);
  return static_cast<std::size_t>(std::min<std::uint64_t>(k, max_selected));
}

/// Chooses the subset S_k from the candidates. `salt` distinguishes
/// iterations so that seeded tie-breaking and random sampling differ per
/// iteration while staying reproducible.
inline std::vector<LandmarkId> select(const SelectionPolicy& policy, std::span<const LandmarkId> candidates,
                                      std::span<const double> scores, std::uint64_t salt = 0) {
  policy.validate();
  const std::size_t k = selection_size(policy.selection_ratio, policy.max_selected, candidates.size());
  if (k == 0) return {};
  const std::uint64_t seed = derive_seed(policy.rng_seed, SeedStream::tie_break, salt);

  if (policy.ranking == Ranking::f_zero) {
    std::vector<LandmarkId> out(candidates.begin(), candidates.end());
    std::sort(out.begin(), out.end());
    out.resize(k);
    return out;
  }
  if (policy.ranking == Ranking::f_rand) {
    std::vector<LandmarkId> pool(candidates.begin(), candidates.end());
    std::sort(pool.begin(), pool.end());
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(k);
    return pool;
  }

  if (scores.size() != candidates.size()) throw Error(ErrorCode::invalid_argument, "one score per candidate required");
  struct Entry {
    double score;
    std::uint64_t tie;
    LandmarkId id;
  };
  std::vector<Entry> entries;
  entries.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    entries.push_back({scores[i], hash_combine(seed, candidates[i].value), candidates[i]});
  }
  auto better = [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.tie != b.tie) return a.tie < b.tie;
    return a.id < b.id;
  };
  std::partial_sort(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(k), entries.end(), better);
  std::vector<LandmarkId> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(entries[i].id);
  return out;
}

}  // namespace atlas
