#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "atlas/common.hpp"

namespace atlas {

inline constexpr std::size_t frame_header_bytes = 4;
inline constexpr std::size_t max_frame_body = 16u * 1024u * 1024u;

enum class MessageKind { open_session, query, landmarks, report, upload_sortie, update_ack, error, close };

inline const char* to_string(MessageKind k) {
  switch (k) {
    case MessageKind::open_session: return "OpenSession";
    case MessageKind::query: return "Query";
    case MessageKind::landmarks: return "Landmarks";
    case MessageKind::report: return "Report";
    case MessageKind::upload_sortie: return "UploadSortie";
    case MessageKind::update_ack: return "UpdateAck";
    case MessageKind::error: return "Error";
    case MessageKind::close: return "Close";
  }
  return "?";
}

inline std::optional<MessageKind> message_kind_from_string(std::string_view s) {
  for (auto k : {MessageKind::open_session, MessageKind::query, MessageKind::landmarks, MessageKind::report,
                 MessageKind::upload_sortie, MessageKind::update_ack, MessageKind::error, MessageKind::close}) {
    if (s == to_string(k)) return k;
  }
  return std::nullopt;
}

/// Wire error codes carried in Error payloads.
namespace wire_error {
inline constexpr const char* no_session = "no_session";
inline constexpr const char* bad_request = "bad_request";
inline constexpr const char* bad_report = "bad_report";
inline constexpr const char* too_large = "too_large";
inline constexpr const char* internal = "internal";
}  // namespace wire_error

struct Message {
  MessageKind kind = MessageKind::error;
  std::uint64_t token = 0;
  // Correlation id: a reply carries the seq of its request.
  std::uint64_t seq = 0;
  nlohmann::json payload = nlohmann::json::object();

  friend bool operator==(const Message& a, const Message& b) {
    return a.kind == b.kind && a.token == b.token && a.seq == b.seq && a.payload == b.payload;
  }
};

inline std::string token_to_hex(std::uint64_t token) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(token));
  return buf;
}

inline std::optional<std::uint64_t> token_from_hex(std::string_view s) {
  if (s.size() != 16) return std::nullopt;
  std::uint64_t v = 0;
  for (char c : s) {
    int d;
    if (c >= '0' && c <= '9') d = c - '0';
    else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
    else return std::nullopt;
    v = (v << 4) | static_cast<std::uint64_t>(d);
  }
  return v;
}

/// Canonical JSON body: compact, keys sorted, non-ASCII escaped.
inline std::string encode_body(const Message& m) {
  nlohmann::json j = {{"kind", to_string(m.kind)},
                      {"token", token_to_hex(m.token)},
                      {"seq", m.seq},
                      {"payload", m.payload}};
  return j.dump(-1, ' ', true);
}

inline std::array<unsigned char, frame_header_bytes> frame_header(std::size_t body_len) {
  return {static_cast<unsigned char>((body_len >> 24) & 0xff), static_cast<unsigned char>((body_len >> 16) & 0xff),
          static_cast<unsigned char>((body_len >> 8) & 0xff), static_cast<unsigned char>(body_len & 0xff)};
}

inline std::uint32_t read_frame_length(std::string_view header) {
  if (header.size() < frame_header_bytes) throw Error(ErrorCode::corrupt_stream, "short frame header");
  auto b = [&](std::size_t i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(header[i])); };
  return (b(0) << 24) | (b(1) << 16) | (b(2) << 8) | b(3);
}

inline std::string encode_frame(const Message& m) {
  const std::string body = encode_body(m);
  if (body.size() > max_frame_body) throw Error(ErrorCode::invalid_argument, "frame body exceeds 16 MiB");
  const auto h = frame_header(body.size());
  std::string out(h.begin(), h.end());
  out += body;
  return out;
}

/// Parses a frame body. Only canonical bodies are accepted, which makes
/// encode(decode(frame)) byte-identical for every frame that decodes.
inline Message decode_body(std::string_view body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::corrupt_stream, std::string("frame body is not JSON: ") + e.what());
  }
  if (!j.is_object() || j.size() != 4 || !j.contains("kind") || !j.contains("token") || !j.contains("seq") ||
      !j.contains("payload"))
    throw Error(ErrorCode::corrupt_stream, "frame body must have exactly kind, token, seq, payload");
  Message m;
  const auto kind = j["kind"].is_string() ? message_kind_from_string(j["kind"].get<std::string>()) : std::nullopt;
  if (!kind) throw Error(ErrorCode::corrupt_stream, "unknown message kind");
  m.kind = *kind;
  const auto token = j["token"].is_string() ? token_from_hex(j["token"].get<std::string>()) : std::nullopt;
  if (!token) throw Error(ErrorCode::corrupt_stream, "token must be 16 lowercase hex digits");
  m.token = *token;
  if (!j["seq"].is_number_unsigned()) throw Error(ErrorCode::corrupt_stream, "seq must be an unsigned integer");
  m.seq = j["seq"].get<std::uint64_t>();
  if (!j["payload"].is_object()) throw Error(ErrorCode::corrupt_stream, "payload must be an object");
  m.payload = std::move(j["payload"]);
  if (encode_body(m) != body) throw Error(ErrorCode::corrupt_stream, "frame body is not in canonical form");
  return m;
}

/// Decodes exactly one complete frame.
inline Message decode_frame(std::string_view frame) {
  const std::uint32_t len = read_frame_length(frame);
  if (len > max_frame_body) throw Error(ErrorCode::corrupt_stream, "frame exceeds 16 MiB");
  if (frame.size() != frame_header_bytes + len) throw Error(ErrorCode::corrupt_stream, "frame length mismatch");
  return decode_body(frame.substr(frame_header_bytes));
}

struct BandwidthLedger {
  std::uint64_t landmarks_sent = 0;
  std::uint64_t bytes_down = 0;
  std::uint64_t bytes_up = 0;
  std::uint64_t queries = 0;

  BandwidthLedger& operator+=(const BandwidthLedger& o) {
    landmarks_sent += o.landmarks_sent;
    bytes_down += o.bytes_down;
    bytes_up += o.bytes_up;
    queries += o.queries;
    return *this;
  }
  friend bool operator==(const BandwidthLedger&, const BandwidthLedger&) = default;
};

inline nlohmann::json ledger_to_json(const BandwidthLedger& l) {
  return {{"landmarks_sent", l.landmarks_sent}, {"bytes_down", l.bytes_down}, {"bytes_up", l.bytes_up},
          {"queries", l.queries}};
}

}  // namespace atlas
