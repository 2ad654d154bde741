#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "atlas/locsim.hpp"
#include "atlas/map_io.hpp"
#include "atlas/map_store.hpp"
#include "atlas/protocol.hpp"
#include "atlas/ranking.hpp"
#include "atlas/worldgen.hpp"

namespace atlas {

struct ServiceConfig {
  ProcessConfig process;
  double candidate_radius = 15.0;
  // Policy for sessions that do not send one.
  SelectionPolicy default_policy{Ranking::f_rank, 0.2, 1800, 0, 10, 1};
  std::uint64_t token_seed = 0x5e55;
};

struct VehicleSession {
  std::uint64_t token = 0;
  std::string vehicle;
  SelectionPolicy policy;
  RollingSelectionStats stats;
  std::shared_ptr<const MapSnapshot> bound;
  std::vector<LandmarkId> last_selection;  // sorted
  bool awaiting_report = false;
  std::uint64_t iterations = 0;
  BandwidthLedger ledger;
  std::mutex mutex;
};

inline nlohmann::json sortie_to_json(const SortieDataset& d) {
  nlohmann::json poses = nlohmann::json::array();
  for (const auto& p : d.poses) poses.push_back(pose_to_json(p));
  return {{"label", d.label}, {"timestamp", d.timestamp}, {"condition", d.condition.value}, {"seed", d.seed},
          {"poses", poses}};
}

inline SortieDataset sortie_from_json(const nlohmann::json& j) {
  SortieDataset d;
  d.label = j.at("label").get<std::string>();
  d.timestamp = j.at("timestamp").get<std::int64_t>();
  const double c = j.at("condition").get<double>();
  if (!(c >= 0.0 && c < 1.0)) throw Error(ErrorCode::invalid_argument, "condition must be in [0, 1)");
  d.condition = Condition(c);
  d.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& p : j.at("poses")) d.poses.push_back(pose_from_json(p));
  if (d.poses.empty()) throw Error(ErrorCode::invalid_argument, "sortie has no poses");
  return d;
}

/// The shared-map backend. Every handler is safe to call from concurrent
/// connection threads; map updates are serialized by the store.
class Service {
 public:
  Service(World world, MultiSessionMap initial, ServiceConfig config)
      : world_(std::move(world)), store_(std::move(initial)), config_(std::move(config)) {}

  const World& world() const { return world_; }
  MapStore& store() { return store_; }
  const ServiceConfig& config() const { return config_; }

  /// Called with the final ledger of every closed session.
  void on_close(std::function<void(std::uint64_t, const std::string&, const BandwidthLedger&)> fn) {
    on_close_ = std::move(fn);
  }

  /// Handles one request frame and returns the reply frame. Bytes are
  /// charged to the session named by the request, or to the unattributed
  /// ledger when there is none.
  std::string process_frame(std::string_view frame) {
    Message req;
    try {
      req = decode_frame(frame);
    } catch (const Error& e) {
      const std::string reply = encode_frame(error_reply({}, wire_error::bad_request, e.what()));
      charge(0, frame.size(), reply.size(), false);
      return reply;
    }
    if (req.kind == MessageKind::close) return close_session(req, frame.size());
    Message rep = handle(req);
    std::string reply = encode_frame(rep);
    const std::uint64_t owner = req.kind == MessageKind::open_session ? rep.token : req.token;
    charge(owner, frame.size(), reply.size(), req.kind == MessageKind::query);
    return reply;
  }

  /// Dispatches a decoded request. Ledger byte counts are only maintained by
  /// process_frame.
  Message handle(const Message& req) {
    try {
      switch (req.kind) {
        case MessageKind::open_session: return open_session(req);
        case MessageKind::query: return handle_query(req);
        case MessageKind::report: return handle_report(req);
        case MessageKind::upload_sortie: return handle_upload(req);
        case MessageKind::close: return error_reply(req, wire_error::bad_request, "close via process_frame");
        default: return error_reply(req, wire_error::bad_request, std::string("unexpected ") + to_string(req.kind));
      }
    } catch (const Error& e) {
      return error_reply(req, wire_error::bad_request, e.what());
    } catch (const nlohmann::json::exception& e) {
      return error_reply(req, wire_error::bad_request, e.what());
    }
  }

  std::optional<BandwidthLedger> ledger(std::uint64_t token) const {
    std::lock_guard lock(sessions_mutex_);
    auto it = sessions_.find(token);
    if (it == sessions_.end()) return std::nullopt;
    std::lock_guard slock(it->second->mutex);
    return it->second->ledger;
  }

  BandwidthLedger unattributed() const {
    std::lock_guard lock(sessions_mutex_);
    return unattributed_;
  }

  /// Sum of the ledgers of every closed session.
  BandwidthLedger closed_total() const {
    std::lock_guard lock(sessions_mutex_);
    return closed_total_;
  }

  std::size_t open_sessions() const {
    std::lock_guard lock(sessions_mutex_);
    return sessions_.size();
  }

 private:
  static Message error_reply(const Message& req, const char* code, const std::string& message) {
    return {MessageKind::error, req.token, req.seq, {{"code", code}, {"message", message}}};
  }

  std::shared_ptr<VehicleSession> find(std::uint64_t token) const {
    std::lock_guard lock(sessions_mutex_);
    auto it = sessions_.find(token);
    return it == sessions_.end() ? nullptr : it->second;
  }

  void charge(std::uint64_t token, std::size_t up, std::size_t down, bool query) {
    if (auto s = find(token)) {
      std::lock_guard lock(s->mutex);
      s->ledger.bytes_up += up;
      s->ledger.bytes_down += down;
      s->ledger.queries += query;
      return;
    }
    std::lock_guard lock(sessions_mutex_);
    unattributed_.bytes_up += up;
    unattributed_.bytes_down += down;
    unattributed_.queries += query;
  }

  Message open_session(const Message& req) {
    auto s = std::make_shared<VehicleSession>();
    s->policy = req.payload.contains("policy") ? policy_from_json(req.payload["policy"]) : config_.default_policy;
    s->vehicle = req.payload.value("vehicle", std::string{});
    s->stats = RollingSelectionStats(s->policy.window);
    {
      std::lock_guard lock(sessions_mutex_);
      do {
        s->token = mix64(hash_all(config_.token_seed, ++token_counter_));
      } while (s->token == 0 || sessions_.count(s->token));
      sessions_[s->token] = s;
    }
    const auto snap = store_.snapshot();
    return {MessageKind::update_ack,
            s->token,
            req.seq,
            {{"opened", true}, {"policy", policy_to_json(s->policy)}, {"map_version", snap->version}}};
  }

  Message handle_query(const Message& req) {
    auto s = find(req.token);
    if (!s) return error_reply(req, wire_error::no_session, "unknown session token");
    std::lock_guard lock(s->mutex);
    Pose pose;
    try {
      pose = pose_from_json(req.payload.at("pose"));
      if (!std::isfinite(pose.x) || !std::isfinite(pose.y) || !std::isfinite(pose.heading))
        throw Error(ErrorCode::invalid_argument, "pose must be finite");
    } catch (const std::exception& e) {
      return error_reply(req, wire_error::bad_request, std::string("malformed pose: ") + e.what());
    }
    if (req.payload.contains("policy")) {
      SelectionPolicy p = policy_from_json(req.payload["policy"]);
      if (p.window != s->policy.window) {
        s->stats = RollingSelectionStats(p.window);
        s->bound.reset();
      }
      s->policy = p;
    }

    auto snap = store_.snapshot();
    if (s->bound != snap) {
      s->bound = snap;
      s->stats.rebind(snap->map);
    }
    const MultiSessionMap& map = snap->map;
    const auto candidates = map.candidate_set(pose, config_.candidate_radius);
    SelectionPolicy active = s->policy;
    if (s->iterations < s->policy.bootstrap &&
        (active.ranking == Ranking::f_rank || active.ranking == Ranking::f_orig))
      active.selection_ratio = 1.0;
    const auto scores = score_candidates(active.ranking, s->stats, map, candidates);
    auto selected = select(active, candidates, scores, hash_combine(s->token, s->iterations));
    ++s->iterations;

    nlohmann::json lms = nlohmann::json::array();
    for (LandmarkId id : selected) {
      const auto& lm = map.landmark(id);
      lms.push_back({{"id", id.value}, {"position", vec_to_json(lm.position)}, {"class", map.index().class_of(id).value}});
    }
    std::sort(selected.begin(), selected.end());
    s->last_selection = std::move(selected);
    s->awaiting_report = true;
    s->ledger.landmarks_sent += lms.size();
    return {MessageKind::landmarks,
            req.token,
            req.seq,
            {{"landmarks", lms}, {"n_candidates", candidates.size()}, {"map_version", snap->version}}};
  }

  Message handle_report(const Message& req) {
    auto s = find(req.token);
    if (!s) return error_reply(req, wire_error::no_session, "unknown session token");
    std::lock_guard lock(s->mutex);
    if (!s->awaiting_report) return error_reply(req, wire_error::bad_report, "no outstanding query to report on");
    std::vector<LandmarkId> observed;
    try {
      for (const auto& v : req.payload.at("observed")) observed.push_back(LandmarkId{v.get<std::uint64_t>()});
    } catch (const nlohmann::json::exception& e) {
      return error_reply(req, wire_error::bad_report, std::string("malformed observed list: ") + e.what());
    }
    for (LandmarkId id : observed) {
      if (!std::binary_search(s->last_selection.begin(), s->last_selection.end(), id))
        return error_reply(req, wire_error::bad_report, "landmark " + std::to_string(id.value) + " was not selected");
    }
    s->stats.update_window(s->last_selection, observed);
    s->awaiting_report = false;
    return {MessageKind::update_ack, req.token, req.seq, {{"accepted", observed.size()}}};
  }

  Message handle_upload(const Message& req) {
    auto s = find(req.token);
    if (!s) return error_reply(req, wire_error::no_session, "unknown session token");
    SortieDataset dataset;
    SelectionPolicy policy;
    {
      std::lock_guard lock(s->mutex);
      if (s->awaiting_report)
        return error_reply(req, wire_error::bad_request, "uploads are accepted only between sorties");
      policy = s->policy;
    }
    try {
      dataset = sortie_from_json(req.payload.at("sortie"));
      if (req.payload.contains("policy")) policy = policy_from_json(req.payload["policy"]);
    } catch (const std::exception& e) {
      return error_reply(req, wire_error::bad_request, std::string("malformed sortie: ") + e.what());
    }
    if (req.payload.value("decision", std::string("reference")) == "reference") policy = SelectionPolicy::reference();

    SortieReport report;
    const std::uint64_t version = store_.update([&](MultiSessionMap& m) {
      auto done = process_sortie(m, world_, dataset, policy, config_.process);
      report = done.report;
      m = std::move(done.map);
    });
    auto payload = report_to_json(report);
    payload["map_version"] = version;
    return {MessageKind::update_ack, req.token, req.seq, payload};
  }

  std::string close_session(const Message& req, std::size_t up) {
    std::shared_ptr<VehicleSession> s;
    {
      std::lock_guard lock(sessions_mutex_);
      auto it = sessions_.find(req.token);
      if (it != sessions_.end()) {
        s = it->second;
        sessions_.erase(it);
      }
    }
    if (!s) {
      const std::string reply = encode_frame(error_reply(req, wire_error::no_session, "unknown session token"));
      charge(0, up, reply.size(), false);
      return reply;
    }
    BandwidthLedger final_ledger;
    std::string reply;
    {
      std::lock_guard lock(s->mutex);
      s->ledger.bytes_up += up;
      reply = encode_frame(
          {MessageKind::update_ack, req.token, req.seq, {{"closed", true}, {"ledger", ledger_to_json(s->ledger)}}});
      s->ledger.bytes_down += reply.size();
      final_ledger = s->ledger;
    }
    {
      std::lock_guard lock(sessions_mutex_);
      closed_total_ += final_ledger;
    }
    if (on_close_) on_close_(s->token, s->vehicle, final_ledger);
    return reply;
  }

  World world_;
  MapStore store_;
  ServiceConfig config_;
  mutable std::mutex sessions_mutex_;
  std::map<std::uint64_t, std::shared_ptr<VehicleSession>> sessions_;
  std::uint64_t token_counter_ = 0;
  BandwidthLedger unattributed_;
  BandwidthLedger closed_total_;
  std::function<void(std::uint64_t, const std::string&, const BandwidthLedger&)> on_close_;
};

}  // namespace atlas
