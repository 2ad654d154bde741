#pragma once

#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>

namespace atlas {

template <typename Tag>
struct StrongId {
  std::uint64_t value = 0;

  constexpr StrongId() = default;
  constexpr explicit StrongId(std::uint64_t v) : value(v) {}

  friend constexpr auto operator<=>(StrongId, StrongId) = default;
};

struct LandmarkTag {};
struct VertexTag {};
struct SessionTag {};
struct ClassTag {};

using LandmarkId = StrongId<LandmarkTag>;
using VertexId = StrongId<VertexTag>;
using SessionId = StrongId<SessionTag>;
using ClassId = StrongId<ClassTag>;

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend constexpr bool operator==(const Vec3&, const Vec3&) = default;
};

inline double distance(const Vec3& a, const Vec3& b) {
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  const double dz = a.z - b.z;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

/// Planar vehicle pose in the map frame. z of the position is always 0.
struct Pose {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;

  Vec3 position() const { return {x, y, 0.0}; }

  friend constexpr bool operator==(const Pose&, const Pose&) = default;
};

/// Wraps an angle into [-pi, pi).
inline double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double r = std::fmod(a + std::numbers::pi, two_pi);
  if (r < 0.0) r += two_pi;
  r -= std::numbers::pi;
  if (r >= std::numbers::pi) r -= two_pi;
  return r;
}

enum class ErrorCode {
  invalid_argument,
  unknown_landmark,
  unknown_vertex,
  malformed_landmark,
  out_of_order,
  version_mismatch,
  checksum_mismatch,
  corrupt_stream,
  stale_solution,
  infeasible,
  mismatched_runs,
  io,
};

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::unknown_landmark: return "unknown_landmark";
    case ErrorCode::unknown_vertex: return "unknown_vertex";
    case ErrorCode::malformed_landmark: return "malformed_landmark";
    case ErrorCode::out_of_order: return "out_of_order";
    case ErrorCode::version_mismatch: return "version_mismatch";
    case ErrorCode::checksum_mismatch: return "checksum_mismatch";
    case ErrorCode::corrupt_stream: return "corrupt_stream";
    case ErrorCode::stale_solution: return "stale_solution";
    case ErrorCode::infeasible: return "infeasible";
    case ErrorCode::mismatched_runs: return "mismatched_runs";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// splitmix64 finalizer; the basis of every counter-based random stream.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t v) {
  return mix64(seed ^ mix64(v));
}

template <typename... Ts>
constexpr std::uint64_t hash_all(std::uint64_t seed, Ts... vs) {
  ((seed = hash_combine(seed, static_cast<std::uint64_t>(vs))), ...);
  return seed;
}

/// Uniform double in [0, 1) from a 64-bit hash.
constexpr double unit_from_hash(std::uint64_t h) {
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Named seed streams so any one source of randomness can be held fixed.
enum class SeedStream : std::uint64_t {
  world = 1,
  sortie = 2,
  observation = 3,
  tie_break = 4,
  pose_error = 5,
  triangulation = 6,
};

constexpr std::uint64_t derive_seed(std::uint64_t base, SeedStream stream, std::uint64_t index = 0) {
  return hash_all(base, static_cast<std::uint64_t>(stream), index);
}

}  // namespace atlas

template <typename Tag>
struct std::hash<atlas::StrongId<Tag>> {
  std::size_t operator()(atlas::StrongId<Tag> id) const noexcept {
    return static_cast<std::size_t>(atlas::mix64(id.value));
  }
};
