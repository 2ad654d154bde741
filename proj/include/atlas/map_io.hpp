#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include <json.hpp>

#include "atlas/map.hpp"

namespace atlas {

using json = nlohmann::json;

// FNV-1a, 64 bit.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline json pose_to_json(const Pose& p) { return json::array({p.x, p.y, p.heading}); }

inline Pose pose_from_json(const json& j) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorCode::corrupt_stream, "pose must be [x, y, heading]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline json vec_to_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }

inline Vec3 vec_from_json(const json& j) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorCode::corrupt_stream, "position must be [x, y, z]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

/// Document form of a map. The checksum key covers the canonical dump of the
/// document without that key. An unbounded cap is written as -1.
inline json map_to_json(const MultiSessionMap& m) {
  json doc = json::object();
  doc["format_version"] = m.format_version();
  doc["landmark_cap"] =
      m.landmark_cap() == unbounded_cap ? json(-1) : json(static_cast<std::int64_t>(m.landmark_cap()));

  json sessions = json::array();
  for (const auto& s : m.sessions()) {
    sessions.push_back({{"id", s.id.value}, {"kind", to_string(s.kind)}, {"timestamp", s.timestamp}, {"label", s.label}});
  }
  doc["sessions"] = std::move(sessions);

  json vertices = json::array();
  for (const auto& [id, v] : m.vertices()) {
    vertices.push_back({{"id", id.value}, {"pose", pose_to_json(v.pose)}, {"session", v.session.value}});
  }
  doc["vertices"] = std::move(vertices);

  json landmarks = json::array();
  for (const auto& [id, lm] : m.landmarks()) {
    json ss = json::array();
    for (SessionId s : lm.sessions) ss.push_back(s.value);
    json counts = json::object();
    for (const auto& [vid, c] : lm.obs_counts) counts[std::to_string(vid.value)] = c;
    landmarks.push_back({{"id", id.value},
                         {"position", vec_to_json(lm.position)},
                         {"origin_session", lm.origin_session.value},
                         {"sessions", std::move(ss)},
                         {"obs_counts", std::move(counts)}});
  }
  doc["landmarks"] = std::move(landmarks);
  doc["checksum"] = to_hex(fnv1a64(doc.dump()));
  return doc;
}

inline std::string save_map(const MultiSessionMap& m) { return map_to_json(m).dump(); }

inline MultiSessionMap map_from_json(json doc) {
  if (!doc.is_object()) throw Error(ErrorCode::corrupt_stream, "map document must be an object");
  if (!doc.contains("format_version") || !doc["format_version"].is_number_integer())
    throw Error(ErrorCode::corrupt_stream, "missing format_version");
  if (doc["format_version"].get<int>() != map_format_version)
    throw Error(ErrorCode::version_mismatch, "format_version " + doc["format_version"].dump());
  if (!doc.contains("checksum") || !doc["checksum"].is_string())
    throw Error(ErrorCode::corrupt_stream, "missing checksum");
  const std::string stored = doc["checksum"].get<std::string>();
  doc.erase("checksum");
  if (to_hex(fnv1a64(doc.dump())) != stored) throw Error(ErrorCode::checksum_mismatch, "map checksum mismatch");

  try {
    const std::int64_t cap_raw = doc.at("landmark_cap").get<std::int64_t>();
    if (cap_raw == 0 || cap_raw < -1) throw Error(ErrorCode::corrupt_stream, "landmark_cap must be positive or -1");
    const std::uint64_t cap = cap_raw == -1 ? unbounded_cap : static_cast<std::uint64_t>(cap_raw);

    std::vector<SessionRecord> sessions;
    for (const auto& s : doc.at("sessions")) {
      const std::string kind = s.at("kind").get<std::string>();
      if (kind != "rich" && kind != "observation") throw Error(ErrorCode::corrupt_stream, "bad session kind");
      sessions.push_back({SessionId{s.at("id").get<std::uint64_t>()},
                          kind == "rich" ? SessionKind::rich : SessionKind::observation,
                          s.at("timestamp").get<std::int64_t>(), s.at("label").get<std::string>()});
    }
    std::vector<Vertex> vertices;
    for (const auto& v : doc.at("vertices")) {
      vertices.push_back({VertexId{v.at("id").get<std::uint64_t>()}, pose_from_json(v.at("pose")),
                          SessionId{v.at("session").get<std::uint64_t>()}});
    }
    std::vector<Landmark> landmarks;
    for (const auto& l : doc.at("landmarks")) {
      Landmark lm;
      lm.id = LandmarkId{l.at("id").get<std::uint64_t>()};
      lm.position = vec_from_json(l.at("position"));
      lm.origin_session = SessionId{l.at("origin_session").get<std::uint64_t>()};
      for (const auto& s : l.at("sessions")) lm.sessions.push_back(SessionId{s.get<std::uint64_t>()});
      for (const auto& [k, c] : l.at("obs_counts").items()) {
        lm.obs_counts[VertexId{std::stoull(k)}] = c.get<std::uint32_t>();
      }
      landmarks.push_back(std::move(lm));
    }
    return MultiSessionMap::from_parts(cap, std::move(sessions), std::move(vertices), std::move(landmarks));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::corrupt_stream, e.what());
  } catch (const std::invalid_argument& e) {
    throw Error(ErrorCode::corrupt_stream, e.what());
  } catch (const std::out_of_range& e) {
    throw Error(ErrorCode::corrupt_stream, e.what());
  }
}

inline MultiSessionMap load_map(std::string_view bytes) {
  json doc;
  try {
    doc = json::parse(bytes);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::corrupt_stream, e.what());
  }
  const bool canonical = doc.dump() == bytes;
  MultiSessionMap m = map_from_json(std::move(doc));
  if (!canonical) throw Error(ErrorCode::corrupt_stream, "map stream is not in canonical form");
  return m;
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io, "write failed: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_map_file(const MultiSessionMap& m, const std::string& path) { write_file(path, save_map(m)); }
inline MultiSessionMap load_map_file(const std::string& path) { return load_map(read_file(path)); }

}  // namespace atlas
