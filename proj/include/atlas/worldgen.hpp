#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "atlas/map.hpp"

namespace atlas {

/// A point on the circular appearance space [0, 1).
struct Condition {
  double value = 0.0;

  Condition() = default;
  explicit Condition(double v) : value(wrap(v)) {}

  static double wrap(double v) {
    double r = v - std::floor(v);
    return r >= 1.0 ? 0.0 : r;
  }

  friend bool operator==(const Condition&, const Condition&) = default;
};

/// Circular distance, always in [0, 0.5].
inline double circular_distance(Condition a, Condition b) {
  const double d = std::abs(a.value - b.value);
  return std::min(d, 1.0 - d);
}

/// Appearance-dependent matchability of one physical landmark.
struct ObservabilityKernel {
  Condition center;
  double width = 0.05;
  double peak = 1.0;

  double p_det(Condition a) const {
    if (std::isinf(width)) return peak;
    const double d = circular_distance(center, a);
    return peak * std::exp(-d * d / (2.0 * width * width));
  }
};

struct KernelDistribution {
  // Widths are log-uniform in [width_min, width_max].
  double width_min = 0.03;
  double width_max = 0.08;
  double peak_min = 0.6;
  double peak_max = 1.0;
};

struct WorldSpec {
  // Closed loop; the last waypoint connects back to the first.
  std::vector<std::array<double, 2>> waypoints;
  double corridor_half_width = 10.0;
  double height_max = 4.0;
  // Physical landmarks per square meter of corridor.
  double density = 0.5;
  KernelDistribution kernels;
  std::size_t poses_per_sortie = 200;
};

struct TruthLandmark {
  Vec3 position;
  ObservabilityKernel kernel;
};

/// Ground truth: the trajectory and every physical landmark of the
/// environment. Map landmarks are linked back to the field by their exact
/// position; positions that are not in the field belong to transient objects
/// that are never observed again.
class World {
 public:
  World() = default;
  World(std::vector<Pose> trajectory, std::vector<TruthLandmark> field, double corridor_half_width, double height_max,
        double path_length)
      : trajectory_(std::move(trajectory)),
        field_(std::move(field)),
        half_width_(corridor_half_width),
        height_max_(height_max),
        path_length_(path_length) {
    for (std::size_t i = 0; i < field_.size(); ++i) by_position_.emplace(position_key(field_[i].position), i);
  }

  const std::vector<Pose>& trajectory() const { return trajectory_; }
  const std::vector<TruthLandmark>& field() const { return field_; }
  double corridor_half_width() const { return half_width_; }
  double height_max() const { return height_max_; }
  double path_length() const { return path_length_; }

  std::optional<std::size_t> field_index(const Vec3& p) const {
    auto it = by_position_.find(position_key(p));
    if (it == by_position_.end() || !(field_[it->second].position == p)) return std::nullopt;
    return it->second;
  }

  /// Detection probability of whatever physical landmark sits at `p`.
  double p_det(const Vec3& p, Condition c) const {
    auto idx = field_index(p);
    return idx ? field_[*idx].kernel.p_det(c) : 0.0;
  }

 private:
  static std::uint64_t position_key(const Vec3& p) {
    return hash_all(0x706f73ULL, std::bit_cast<std::uint64_t>(p.x), std::bit_cast<std::uint64_t>(p.y),
                    std::bit_cast<std::uint64_t>(p.z));
  }

  std::vector<Pose> trajectory_;
  std::vector<TruthLandmark> field_;
  double half_width_ = 0.0;
  double height_max_ = 0.0;
  double path_length_ = 0.0;
  std::unordered_map<std::uint64_t, std::size_t> by_position_;
};

/// Point and tangent heading at arc length s along the closed polyline.
struct PathSampler {
  std::vector<std::array<double, 2>> pts;
  std::vector<double> cumulative;  // cumulative[i] = length up to pts[i]

  explicit PathSampler(const std::vector<std::array<double, 2>>& waypoints) : pts(waypoints) {
    if (pts.size() < 3) throw Error(ErrorCode::invalid_argument, "trajectory needs at least 3 waypoints");
    cumulative.push_back(0.0);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto& a = pts[i];
      const auto& b = pts[(i + 1) % pts.size()];
      cumulative.push_back(cumulative.back() + std::hypot(b[0] - a[0], b[1] - a[1]));
    }
    if (!(length() > 0.0)) throw Error(ErrorCode::invalid_argument, "degenerate trajectory");
  }

  double length() const { return cumulative.back(); }

  Pose at(double s) const {
    s = std::fmod(s, length());
    if (s < 0) s += length();
    std::size_t i = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), s) -
                                             cumulative.begin()) - 1;
    i = std::min(i, pts.size() - 1);
    const auto& a = pts[i];
    const auto& b = pts[(i + 1) % pts.size()];
    const double seg = cumulative[i + 1] - cumulative[i];
    const double t = seg > 0 ? (s - cumulative[i]) / seg : 0.0;
    return {a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), wrap_angle(std::atan2(b[1] - a[1], b[0] - a[0]))};
  }
};

inline World generate_world(const WorldSpec& spec, std::uint64_t seed) {
  if (spec.waypoints.size() < 3) throw Error(ErrorCode::invalid_argument, "trajectory needs at least 3 waypoints");
  if (!(spec.density > 0.0) || !(spec.corridor_half_width > 0.0))
    throw Error(ErrorCode::invalid_argument, "density and corridor width must be positive");
  if (spec.poses_per_sortie < 3) throw Error(ErrorCode::invalid_argument, "need at least 3 poses per sortie");
  const auto& kd = spec.kernels;
  if (!(kd.width_min > 0.0) || kd.width_max < kd.width_min || !(kd.peak_min >= 0.0) || kd.peak_max > 1.0 ||
      kd.peak_max < kd.peak_min)
    throw Error(ErrorCode::invalid_argument, "bad kernel distribution");

  PathSampler path(spec.waypoints);
  std::vector<Pose> trajectory;
  trajectory.reserve(spec.poses_per_sortie);
  for (std::size_t i = 0; i < spec.poses_per_sortie; ++i) {
    trajectory.push_back(path.at(path.length() * static_cast<double>(i) / static_cast<double>(spec.poses_per_sortie)));
  }

  std::mt19937_64 rng(derive_seed(seed, SeedStream::world));
  const double area = path.length() * 2.0 * spec.corridor_half_width;
  std::poisson_distribution<std::uint64_t> count(spec.density * area);
  const std::uint64_t n = count(rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<TruthLandmark> field;
  field.reserve(n);
  const double log_w0 = std::log(kd.width_min), log_w1 = std::log(kd.width_max);
  for (std::uint64_t i = 0; i < n; ++i) {
    const double s = unit(rng) * path.length();
    const double lateral = (2.0 * unit(rng) - 1.0) * spec.corridor_half_width;
    const double z = unit(rng) * spec.height_max;
    const Pose base = path.at(s);
    TruthLandmark t;
    t.position = {base.x - lateral * std::sin(base.heading), base.y + lateral * std::cos(base.heading), z};
    t.kernel.center = Condition(unit(rng));
    t.kernel.width = std::isinf(kd.width_max) ? kd.width_max : std::exp(log_w0 + unit(rng) * (log_w1 - log_w0));
    t.kernel.peak = kd.peak_min + unit(rng) * (kd.peak_max - kd.peak_min);
    field.push_back(t);
  }
  return World(std::move(trajectory), std::move(field), spec.corridor_half_width, spec.height_max, path.length());
}

struct SortieNoise {
  double position_sigma = 0.0;
  double heading_sigma = 0.0;
};

/// One traversal of the trajectory under a latent appearance condition.
struct SortieDataset {
  std::string label;
  std::int64_t timestamp = 0;
  Condition condition;
  std::uint64_t seed = 0;
  std::vector<Pose> poses;
};

inline SortieDataset generate_sortie(const World& world, Condition condition, const SortieNoise& noise,
                                     std::uint64_t seed, std::string label = {}, std::int64_t timestamp = 0) {
  SortieDataset d;
  d.label = std::move(label);
  d.timestamp = timestamp;
  d.condition = condition;
  d.seed = seed;
  d.poses = world.trajectory();
  if (noise.position_sigma > 0.0 || noise.heading_sigma > 0.0) {
    std::mt19937_64 rng(derive_seed(seed, SeedStream::sortie));
    std::normal_distribution<double> pos(0.0, std::max(noise.position_sigma, 0.0));
    std::normal_distribution<double> head(0.0, std::max(noise.heading_sigma, 0.0));
    for (auto& p : d.poses) {
      if (noise.position_sigma > 0.0) {
        p.x += pos(rng);
        p.y += pos(rng);
      }
      if (noise.heading_sigma > 0.0) p.heading = wrap_angle(p.heading + head(rng));
    }
  }
  return d;
}

struct TriangulationParams {
  // Landmarks are only tracked when reliably matchable under the condition.
  double track_threshold = 0.3;
  double observation_range = 12.0;
  // Transient (never re-observable) landmarks per tracked physical landmark.
  double transient_rate = 0.1;
  double transient_detection = 0.8;
};

struct LandmarkProposals {
  std::vector<NewLandmark> landmarks;
  std::vector<ObservabilityKernel> kernels;  // aligned; peak 0 for transients
  std::size_t n_transient = 0;
};

/// New landmarks tracked and triangulated from a rich-session dataset.
/// Physical landmarks already present in the map (by position) are skipped.
/// Each proposal has observations from at least two poses.
inline LandmarkProposals propose_landmarks(const World& world, const SortieDataset& dataset,
                                           const std::unordered_set<std::size_t>& present,
                                           const TriangulationParams& params) {
  LandmarkProposals out;
  const double range = params.observation_range;
  const std::uint64_t base = derive_seed(dataset.seed, SeedStream::triangulation);
  const auto& poses = dataset.poses;

  auto observe_from = [&](const Vec3& pos, double p, std::uint64_t key) {
    std::map<std::size_t, std::uint32_t> obs;
    for (std::size_t k = 0; k < poses.size(); ++k) {
      if (distance(poses[k].position(), pos) > range) continue;
      if (unit_from_hash(hash_all(base, key, k)) < p) obs[k] = 1;
    }
    return obs;
  };

  for (std::size_t i = 0; i < world.field().size(); ++i) {
    if (present.count(i)) continue;
    const auto& t = world.field()[i];
    const double p = t.kernel.p_det(dataset.condition);
    if (p < params.track_threshold) continue;
    auto obs = observe_from(t.position, p, i);
    if (obs.size() < 2) continue;
    out.landmarks.push_back({t.position, std::move(obs)});
    out.kernels.push_back(t.kernel);
  }

  const std::size_t tracked = out.landmarks.size();
  std::mt19937_64 rng(hash_combine(base, 0x7472616eULL));
  std::poisson_distribution<std::uint64_t> n_transient(params.transient_rate * static_cast<double>(tracked));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::uint64_t want = tracked > 0 ? n_transient(rng) : 0;
  for (std::uint64_t j = 0; j < want; ++j) {
    const Pose& at = poses[static_cast<std::size_t>(unit(rng) * static_cast<double>(poses.size())) % poses.size()];
    const double lateral = (2.0 * unit(rng) - 1.0) * world.corridor_half_width();
    const Vec3 pos{at.x - lateral * std::sin(at.heading), at.y + lateral * std::cos(at.heading),
                   unit(rng) * world.height_max()};
    auto obs = observe_from(pos, params.transient_detection, world.field().size() + j);
    if (obs.size() < 2 || world.field_index(pos)) continue;
    out.landmarks.push_back({pos, std::move(obs)});
    out.kernels.push_back({dataset.condition, 1.0, 0.0});
    ++out.n_transient;
  }
  return out;
}

/// Field indices of the physical landmarks currently represented in the map.
inline std::unordered_set<std::size_t> present_field_indices(const World& world, const MultiSessionMap& map) {
  std::unordered_set<std::size_t> out;
  for (const auto& [id, lm] : map.landmarks()) {
    if (auto idx = world.field_index(lm.position)) out.insert(*idx);
  }
  return out;
}

}  // namespace atlas
