#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "atlas/common.hpp"

namespace atlas {

enum class SessionKind { rich, observation };

inline const char* to_string(SessionKind k) { return k == SessionKind::rich ? "rich" : "observation"; }

struct SessionRecord {
  SessionId id;
  SessionKind kind = SessionKind::rich;
  std::int64_t timestamp = 0;
  std::string label;

  friend bool operator==(const SessionRecord&, const SessionRecord&) = default;
};

struct Vertex {
  VertexId id;
  Pose pose;
  SessionId session;

  friend bool operator==(const Vertex&, const Vertex&) = default;
};

struct Landmark {
  LandmarkId id;
  Vec3 position;
  // Sorted, unique. This is the observing-session set of the landmark.
  std::vector<SessionId> sessions;
  std::map<VertexId, std::uint32_t> obs_counts;
  SessionId origin_session;

  std::uint64_t total_observations() const {
    std::uint64_t n = 0;
    for (const auto& [v, c] : obs_counts) n += c;
    return n;
  }

  bool observed_in(SessionId s) const { return std::binary_search(sessions.begin(), sessions.end(), s); }

  friend bool operator==(const Landmark&, const Landmark&) = default;
};

/// Groups landmarks with identical observing-session sets. ClassIds are
/// assigned in lexicographic order of the class keys, so they are stable for
/// a given landmark population.
class EquivalenceClassIndex {
 public:
  using Key = std::vector<SessionId>;

  EquivalenceClassIndex() = default;

  template <typename LandmarkRange>
  explicit EquivalenceClassIndex(const LandmarkRange& landmarks) {
    std::map<Key, std::vector<LandmarkId>> grouped;
    for (const auto& [id, lm] : landmarks) grouped[lm.sessions].push_back(id);
    keys_.reserve(grouped.size());
    members_.reserve(grouped.size());
    for (auto& [key, ids] : grouped) {
      const ClassId cid{keys_.size()};
      for (LandmarkId id : ids) class_of_.emplace(id, cid);
      keys_.push_back(key);
      members_.push_back(std::move(ids));
    }
  }

  std::size_t size() const { return keys_.size(); }

  ClassId class_of(LandmarkId id) const {
    auto it = class_of_.find(id);
    if (it == class_of_.end()) throw Error(ErrorCode::unknown_landmark, "landmark " + std::to_string(id.value));
    return it->second;
  }

  std::optional<ClassId> find(LandmarkId id) const {
    auto it = class_of_.find(id);
    if (it == class_of_.end()) return std::nullopt;
    return it->second;
  }

  const Key& key(ClassId c) const { return keys_.at(c.value); }
  const std::vector<LandmarkId>& members(ClassId c) const { return members_.at(c.value); }

 private:
  std::vector<Key> keys_;
  std::vector<std::vector<LandmarkId>> members_;
  std::unordered_map<LandmarkId, ClassId> class_of_;
};

/// Uniform xy grid over landmark positions for radius queries.
class SpatialGrid {
 public:
  explicit SpatialGrid(double cell_size = 10.0) : cell_(cell_size) {}

  void clear() { cells_.clear(); }

  void insert(LandmarkId id, const Vec3& p) { cells_[cell_key(cell_index(p.x), cell_index(p.y))].push_back({id, p}); }

  /// Landmarks with distance(position, center) <= radius, sorted by id.
  std::vector<LandmarkId> query(const Vec3& center, double radius) const {
    std::vector<LandmarkId> out;
    const std::int64_t x0 = cell_index(center.x - radius), x1 = cell_index(center.x + radius);
    const std::int64_t y0 = cell_index(center.y - radius), y1 = cell_index(center.y + radius);
    for (std::int64_t cx = x0; cx <= x1; ++cx) {
      for (std::int64_t cy = y0; cy <= y1; ++cy) {
        auto it = cells_.find(cell_key(cx, cy));
        if (it == cells_.end()) continue;
        for (const auto& e : it->second) {
          if (distance(e.position, center) <= radius) out.push_back(e.id);
        }
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  struct Entry {
    LandmarkId id;
    Vec3 position;
  };

  std::int64_t cell_index(double v) const { return static_cast<std::int64_t>(std::floor(v / cell_)); }
  static std::uint64_t cell_key(std::int64_t cx, std::int64_t cy) {
    return (static_cast<std::uint64_t>(cx) << 32) ^ (static_cast<std::uint64_t>(cy) & 0xffffffffULL);
  }

  double cell_;
  std::unordered_map<std::uint64_t, std::vector<Entry>> cells_;
};

/// A landmark triangulated in a rich session. Observations refer to the
/// session's own poses by index.
struct NewLandmark {
  Vec3 position;
  std::map<std::size_t, std::uint32_t> observations;
};

struct RichSessionInput {
  std::int64_t timestamp = 0;
  std::string label;
  std::vector<Pose> poses;
  std::vector<NewLandmark> new_landmarks;
  // Existing landmarks re-observed while localizing this dataset, keyed by
  // pose index of this dataset.
  std::map<LandmarkId, std::map<std::size_t, std::uint32_t>> reobserved;
};

using ObservationTally = std::map<LandmarkId, std::map<VertexId, std::uint32_t>>;

struct ObservationSessionInput {
  std::int64_t timestamp = 0;
  std::string label;
  ObservationTally observed;
};

inline constexpr std::uint64_t unbounded_cap = std::numeric_limits<std::uint64_t>::max();
inline constexpr int map_format_version = 1;

/// Multi-session landmark map in a single reference frame. Landmark and vertex
/// ids are derived from the creating session (session << 32 | ordinal), so ids
/// stay unique over the whole history even after summarization removes
/// landmarks.
class MultiSessionMap {
 public:
  MultiSessionMap() { rebuild_indices(); }
  explicit MultiSessionMap(std::uint64_t landmark_cap) : landmark_cap_(landmark_cap) { rebuild_indices(); }

  std::uint64_t landmark_cap() const { return landmark_cap_; }
  void set_landmark_cap(std::uint64_t cap) {
    if (cap == 0) throw Error(ErrorCode::invalid_argument, "landmark_cap must be positive");
    landmark_cap_ = cap;
  }
  int format_version() const { return map_format_version; }

  const std::map<VertexId, Vertex>& vertices() const { return vertices_; }
  const std::map<LandmarkId, Landmark>& landmarks() const { return landmarks_; }
  const std::vector<SessionRecord>& sessions() const { return sessions_; }
  const EquivalenceClassIndex& index() const { return index_; }

  const Landmark& landmark(LandmarkId id) const {
    auto it = landmarks_.find(id);
    if (it == landmarks_.end()) throw Error(ErrorCode::unknown_landmark, "landmark " + std::to_string(id.value));
    return it->second;
  }
  bool contains(LandmarkId id) const { return landmarks_.count(id) != 0; }

  const SessionRecord* find_session(SessionId id) const {
    auto it = std::lower_bound(sessions_.begin(), sessions_.end(), id,
                               [](const SessionRecord& r, SessionId s) { return r.id < s; });
    return (it != sessions_.end() && it->id == id) ? &*it : nullptr;
  }

  std::size_t count_sessions(SessionKind kind) const {
    return static_cast<std::size_t>(
        std::count_if(sessions_.begin(), sessions_.end(), [&](const SessionRecord& r) { return r.kind == kind; }));
  }

  SessionId add_rich_session(const RichSessionInput& in) {
    check_timestamp(in.timestamp);
    for (const auto& nl : in.new_landmarks) {
      if (nl.observations.size() < 2)
        throw Error(ErrorCode::malformed_landmark, "new landmark needs observations from >= 2 vertices");
      for (const auto& [idx, c] : nl.observations) {
        if (idx >= in.poses.size()) throw Error(ErrorCode::unknown_vertex, "pose index out of range");
        if (c == 0) throw Error(ErrorCode::invalid_argument, "zero observation count");
      }
    }
    for (const auto& [lid, obs] : in.reobserved) {
      if (!contains(lid)) throw Error(ErrorCode::unknown_landmark, "landmark " + std::to_string(lid.value));
      if (obs.empty()) throw Error(ErrorCode::invalid_argument, "empty re-observation");
      for (const auto& [idx, c] : obs) {
        if (idx >= in.poses.size()) throw Error(ErrorCode::unknown_vertex, "pose index out of range");
        if (c == 0) throw Error(ErrorCode::invalid_argument, "zero observation count");
      }
    }

    const SessionId sid = next_session_id();
    sessions_.push_back({sid, SessionKind::rich, in.timestamp, in.label});

    std::vector<VertexId> vids;
    vids.reserve(in.poses.size());
    for (std::size_t i = 0; i < in.poses.size(); ++i) {
      const VertexId vid{(sid.value << 32) | i};
      Pose p = in.poses[i];
      p.heading = wrap_angle(p.heading);
      vertices_.emplace(vid, Vertex{vid, p, sid});
      vids.push_back(vid);
    }
    for (std::size_t k = 0; k < in.new_landmarks.size(); ++k) {
      const auto& nl = in.new_landmarks[k];
      Landmark lm;
      lm.id = LandmarkId{(sid.value << 32) | k};
      lm.position = nl.position;
      lm.sessions = {sid};
      lm.origin_session = sid;
      for (const auto& [idx, c] : nl.observations) lm.obs_counts[vids[idx]] += c;
      landmarks_.emplace(lm.id, std::move(lm));
    }
    for (const auto& [lid, obs] : in.reobserved) {
      Landmark& lm = landmarks_.at(lid);
      insert_session(lm, sid);
      for (const auto& [idx, c] : obs) lm.obs_counts[vids[idx]] += c;
    }
    rebuild_indices();
    return sid;
  }

  SessionId add_observation_session(const ObservationSessionInput& in) {
    check_timestamp(in.timestamp);
    for (const auto& [lid, obs] : in.observed) {
      if (!contains(lid)) throw Error(ErrorCode::unknown_landmark, "landmark " + std::to_string(lid.value));
      if (obs.empty()) throw Error(ErrorCode::invalid_argument, "empty observation");
      for (const auto& [vid, c] : obs) {
        if (!vertices_.count(vid)) throw Error(ErrorCode::unknown_vertex, "vertex " + std::to_string(vid.value));
        if (c == 0) throw Error(ErrorCode::invalid_argument, "zero observation count");
      }
    }
    const SessionId sid = next_session_id();
    sessions_.push_back({sid, SessionKind::observation, in.timestamp, in.label});
    for (const auto& [lid, obs] : in.observed) {
      Landmark& lm = landmarks_.at(lid);
      insert_session(lm, sid);
      for (const auto& [vid, c] : obs) lm.obs_counts[vid] += c;
    }
    rebuild_indices();
    return sid;
  }

  /// Drops the given landmarks; vertices and sessions are retained.
  void remove_landmarks(std::span<const LandmarkId> ids) {
    for (LandmarkId id : ids) {
      if (!contains(id)) throw Error(ErrorCode::unknown_landmark, "landmark " + std::to_string(id.value));
    }
    for (LandmarkId id : ids) landmarks_.erase(id);
    rebuild_indices();
  }

  /// Landmarks within `radius` of the query position, heading ignored.
  /// The boundary is inclusive. Result is sorted by id.
  std::vector<LandmarkId> candidate_set(const Pose& query, double radius) const {
    if (!(radius > 0.0)) throw Error(ErrorCode::invalid_argument, "radius must be positive");
    return grid_.query(query.position(), radius);
  }

  /// Nearest vertex to a position (ties to the lower id). Empty map -> nullopt.
  std::optional<VertexId> nearest_vertex(const Pose& p) const {
    std::optional<VertexId> best;
    double best_d = std::numeric_limits<double>::infinity();
    for (const auto& [id, v] : vertices_) {
      const double dx = v.pose.x - p.x, dy = v.pose.y - p.y;
      const double d = dx * dx + dy * dy;
      if (d < best_d) {
        best_d = d;
        best = id;
      }
    }
    return best;
  }

  /// Order-sensitive digest of the landmark population and session history.
  /// Used to detect solutions computed against a different map state.
  std::uint64_t fingerprint() const {
    std::uint64_t h = hash_all(0x6d61702dULL, sessions_.size(), landmarks_.size(), vertices_.size());
    for (const auto& [id, lm] : landmarks_) {
      h = hash_combine(h, id.value);
      for (SessionId s : lm.sessions) h = hash_combine(h, s.value);
      h = hash_combine(h, lm.total_observations());
    }
    return h;
  }

  /// Ranking-only view: observation sessions are dropped from the session
  /// history and from every landmark's session set. Observation counts are
  /// left untouched.
  MultiSessionMap without_observation_sessions() const {
    MultiSessionMap out(*this);
    std::erase_if(out.sessions_, [](const SessionRecord& r) { return r.kind == SessionKind::observation; });
    for (auto& [id, lm] : out.landmarks_) {
      std::erase_if(lm.sessions, [&](SessionId s) {
        const SessionRecord* r = find_session(s);
        return r && r->kind == SessionKind::observation;
      });
    }
    out.rebuild_indices();
    return out;
  }

  /// Raw construction used by the loader; validates every invariant.
  static MultiSessionMap from_parts(std::uint64_t cap, std::vector<SessionRecord> sessions,
                                    std::vector<Vertex> vertices, std::vector<Landmark> landmarks) {
    MultiSessionMap m(cap);
    for (std::size_t i = 1; i < sessions.size(); ++i) {
      if (!(sessions[i - 1].id < sessions[i].id) || sessions[i - 1].timestamp >= sessions[i].timestamp)
        throw Error(ErrorCode::out_of_order, "sessions not strictly increasing");
    }
    m.sessions_ = std::move(sessions);
    for (auto& v : vertices) {
      if (!(v.pose.heading >= -std::numbers::pi && v.pose.heading < std::numbers::pi))
        throw Error(ErrorCode::corrupt_stream, "vertex heading outside [-pi, pi)");
      const SessionRecord* r = m.find_session(v.session);
      if (!r || r->kind != SessionKind::rich) throw Error(ErrorCode::corrupt_stream, "vertex session must be rich");
      if (!m.vertices_.emplace(v.id, v).second) throw Error(ErrorCode::corrupt_stream, "duplicate vertex id");
    }
    for (auto& lm : landmarks) {
      const SessionRecord* origin = m.find_session(lm.origin_session);
      if (!origin || origin->kind != SessionKind::rich)
        throw Error(ErrorCode::corrupt_stream, "landmark origin must be a rich session");
      if (lm.sessions.empty() || !std::is_sorted(lm.sessions.begin(), lm.sessions.end()) ||
          std::adjacent_find(lm.sessions.begin(), lm.sessions.end()) != lm.sessions.end() ||
          !lm.observed_in(lm.origin_session))
        throw Error(ErrorCode::corrupt_stream, "malformed landmark session set");
      for (SessionId s : lm.sessions) {
        if (!m.find_session(s)) throw Error(ErrorCode::corrupt_stream, "landmark references unknown session");
      }
      for (const auto& [vid, c] : lm.obs_counts) {
        if (!m.vertices_.count(vid) || c == 0) throw Error(ErrorCode::corrupt_stream, "bad observation count");
      }
      if (!m.landmarks_.emplace(lm.id, lm).second) throw Error(ErrorCode::corrupt_stream, "duplicate landmark id");
    }
    m.rebuild_indices();
    return m;
  }

  friend bool operator==(const MultiSessionMap& a, const MultiSessionMap& b) {
    return a.landmark_cap_ == b.landmark_cap_ && a.sessions_ == b.sessions_ && a.vertices_ == b.vertices_ &&
           a.landmarks_ == b.landmarks_;
  }

 private:
  SessionId next_session_id() const { return SessionId{sessions_.empty() ? 1 : sessions_.back().id.value + 1}; }

  void check_timestamp(std::int64_t ts) const {
    if (!sessions_.empty() && ts <= sessions_.back().timestamp)
      throw Error(ErrorCode::out_of_order, "timestamp " + std::to_string(ts) + " not after " +
                                               std::to_string(sessions_.back().timestamp));
  }

  static void insert_session(Landmark& lm, SessionId sid) {
    auto it = std::lower_bound(lm.sessions.begin(), lm.sessions.end(), sid);
    if (it == lm.sessions.end() || *it != sid) lm.sessions.insert(it, sid);
  }

  void rebuild_indices() {
    index_ = EquivalenceClassIndex(landmarks_);
    grid_.clear();
    for (const auto& [id, lm] : landmarks_) grid_.insert(id, lm.position);
  }

  std::uint64_t landmark_cap_ = unbounded_cap;
  std::vector<SessionRecord> sessions_;
  std::map<VertexId, Vertex> vertices_;
  std::map<LandmarkId, Landmark> landmarks_;
  EquivalenceClassIndex index_;
  SpatialGrid grid_;
};

inline ClassId equivalence_class_of(const EquivalenceClassIndex& index, LandmarkId id) { return index.class_of(id); }

}  // namespace atlas
