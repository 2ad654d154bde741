#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>

#include <CLI11.hpp>
#include <json.hpp>

#include "atlas/experiment.hpp"
#include "atlas/map_io.hpp"
#include "atlas/net.hpp"
#include "atlas/scenario.hpp"
#include "atlas/service.hpp"

namespace {

using namespace atlas;

struct PolicyFlags {
  std::string ranking = "f_rank";
  double sr = 0.2;
  std::uint64_t m = 1800;
  std::size_t window = 10;
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--ranking", ranking, "f_0, f_rand, f_rank or f_orig")->capture_default_str();
    app->add_option("--sr", sr, "selection ratio in (0, 1]")->capture_default_str();
    app->add_option("--m", m, "maximum selected landmarks per iteration")->capture_default_str();
    app->add_option("--window", window, "rolling window in iterations")->capture_default_str();
    app->add_option("--policy-seed", seed, "tie-break / sampling seed")->capture_default_str();
  }

  SelectionPolicy policy() const {
    SelectionPolicy p{ranking_from_string(ranking), sr, m, seed, window, 1};
    p.validate();
    return p;
  }
};

int cmd_run(const std::string& config_path, const std::string& scenario, const std::vector<std::string>& caps,
            const std::vector<std::uint64_t>& seeds, const std::string& out, std::optional<double> threshold,
            std::size_t jobs, bool no_fig5) {
  ExperimentConfig cfg;
  if (!config_path.empty()) {
    cfg = config_from_json(nlohmann::json::parse(read_file(config_path)));
  } else {
    cfg = default_config(scenario);
  }
  if (!caps.empty()) {
    cfg.caps.clear();
    for (const auto& c : caps) cfg.caps.push_back(c == "inf" ? unbounded_cap : std::stoull(c));
  }
  if (!seeds.empty()) cfg.seeds = seeds;
  if (!out.empty()) cfg.output_dir = out;
  if (threshold) cfg.threshold_m = *threshold;
  if (no_fig5) cfg.with_without = false;
  cfg.jobs = jobs;
  cfg.validate();

  const auto cells = run_chronological(cfg);
  const auto manifest = write_run(cfg, cells);
  for (const auto& c : cells) {
    std::printf("%s cap=%s seed=%llu: %zu landmarks, %zu rich / %zu observation sessions, %zu cap violations\n",
                cfg.scenario.name.c_str(), csv::cap(c.cap).c_str(), static_cast<unsigned long long>(c.seed),
                c.final_map.landmarks().size(), c.final_map.count_sessions(SessionKind::rich),
                c.final_map.count_sessions(SessionKind::observation), c.cap_violations);
  }
  std::printf("wrote %s\n", cfg.output_dir.c_str());
  return manifest["checks"]["passed"].get<bool>() ? 0 : 1;
}

int cmd_regress(const std::string& dir) {
  std::size_t failures = 0;
  const auto checks = regress_run_dir(dir, &failures);
  std::size_t other = 0;
  for (const auto& k : checks) other += !k.ok;
  std::printf("regression: %zu datasets x policies checked, %zu violations of the decision policy, %zu in total\n",
              checks.size(), failures, other);
  std::printf("wrote %s\n", (std::filesystem::path(dir) / "regression.csv").c_str());
  return failures == 0 ? 0 : 1;
}

int cmd_compare(const std::string& dir) {
  const auto summary = compare_run_dir(dir);
  for (const auto& cap : summary["by_cap"]) {
    std::printf("cap=%s\n", cap["cap"].is_string() ? cap["cap"].get<std::string>().c_str() : cap["cap"].dump().c_str());
    for (const auto& [name, p] : cap["policies"].items()) {
      std::printf("  %-14s mean r_obs %s  mean rms %.4f m  landmarks sent %s\n", name.c_str(),
                  p["mean_r_obs"].is_null() ? "   -  " : csv::num(p["mean_r_obs"].get<double>(), 4).c_str(),
                  p["mean_rms_m"].get<double>(), p["landmarks_sent"].dump().c_str());
    }
    for (const auto& e : cap["observation_sessions"]) {
      std::printf("  %s with-without observation sessions: early %.4f, spearman %.3f, p %.3g\n",
                  e["policy"].get<std::string>().c_str(), e["early_stage_delta"].get<double>(),
                  e["spearman_rho"].get<double>(), e["paired_test"]["p_greater"].get<double>());
    }
  }
  std::printf("wrote %s\n", (std::filesystem::path(dir) / "summary.json").c_str());
  return summary["reference_r_obs_is_one"].get<bool>() ? 0 : 1;
}

int cmd_serve(const std::string& listen, const std::string& map_path, std::optional<std::uint64_t> cap,
              double threshold, const std::string& scenario, std::uint64_t seed, const std::string& ledger_out) {
  Scenario sc = load_scenario(scenario);
  MultiSessionMap initial(cap.value_or(sc.landmark_cap));
  if (!map_path.empty() && std::filesystem::exists(map_path)) {
    initial = load_map_file(map_path);
    if (cap) initial.set_landmark_cap(*cap);
  }
  ServiceConfig config;
  config.process = sc.process_config();
  config.process.threshold_m = threshold;
  config.candidate_radius = sc.locsim.candidate_radius;

  // Block termination signals before any thread starts so sigwait sees them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  Service service(sc.make_world(seed), std::move(initial), config);
  std::mutex out_mutex;
  service.on_close([&](std::uint64_t token, const std::string& vehicle, const BandwidthLedger& l) {
    nlohmann::json j = {{"token", token_to_hex(token)}, {"vehicle", vehicle}, {"ledger", ledger_to_json(l)}};
    std::lock_guard lock(out_mutex);
    std::cout << j.dump() << std::endl;
    if (!ledger_out.empty()) {
      std::ofstream f(ledger_out, std::ios::app);
      f << j.dump() << '\n';
    }
  });

  Server server(service);
  const auto port = server.start(parse_endpoint(listen));
  std::fprintf(stderr, "serving %s on port %u (%zu landmarks, cap %s)\n", sc.name.c_str(), port,
               service.store().snapshot()->map.landmarks().size(),
               csv::cap(service.store().snapshot()->map.landmark_cap()).c_str());
  int sig = 0;
  sigwait(&signals, &sig);
  server.stop();
  if (!map_path.empty()) save_map_file(service.store().snapshot()->map, map_path);
  return 0;
}

int cmd_drive(const std::string& connect, const std::string& scenario, std::uint64_t seed,
              std::optional<std::size_t> sortie, std::optional<double> condition, const PolicyFlags& flags,
              bool upload, const std::string& vehicle) {
  Scenario sc = load_scenario(scenario);
  const World world = sc.make_world(seed);
  SortieDataset d;
  if (condition) {
    d = generate_sortie(world, Condition(*condition), sc.noise, hash_all(sc.sortie_seed, seed, 0xd21eULL),
                        "drive", static_cast<std::int64_t>(sc.schedule.size() + 1));
  } else {
    d = sc.make_sortie(world, sortie.value_or(0), seed);
  }

  Client client(parse_endpoint(connect));
  const SelectionPolicy policy = flags.policy();
  auto opened = client.open(policy, vehicle);
  if (opened.kind != MessageKind::update_ack) throw Error(ErrorCode::io, "open failed: " + opened.payload.dump());

  std::vector<Iteration> iterations;
  std::size_t received = 0;
  for (std::size_t k = 0; k < d.poses.size(); ++k) {
    Iteration it;
    it.query_pose = d.poses[k];
    auto reply = client.call(MessageKind::query, {{"pose", pose_to_json(it.query_pose)}});
    if (reply.kind != MessageKind::landmarks) throw Error(ErrorCode::io, "query failed: " + reply.payload.dump());
    nlohmann::json observed = nlohmann::json::array();
    for (const auto& lm : reply.payload["landmarks"]) {
      const LandmarkId id{lm["id"].get<std::uint64_t>()};
      ++received;
      if (observation_draw(d.seed, id) < world.p_det(vec_from_json(lm["position"]), d.condition)) {
        observed.push_back(id.value);
        it.observed.push_back(id);
      }
    }
    std::mt19937_64 err_rng(hash_all(derive_seed(d.seed, SeedStream::pose_error), k));
    it.translation_error = pose_error_proxy(it.observed.size(), sc.locsim.pose_error, err_rng);
    auto ack = client.call(MessageKind::report, {{"observed", observed}});
    if (ack.kind != MessageKind::update_ack) throw Error(ErrorCode::io, "report failed: " + ack.payload.dump());
    iterations.push_back(std::move(it));
  }

  nlohmann::json result = {{"sortie", d.label},
                           {"condition", d.condition.value},
                           {"policy", policy.name()},
                           {"iterations", iterations.size()},
                           {"rms_m", recompute_rms(iterations)},
                           {"landmarks_received", received}};
  if (upload) {
    auto ack = client.call(MessageKind::upload_sortie, {{"sortie", sortie_to_json(d)}});
    result["upload"] = ack.payload;
  }
  auto closed = client.call(MessageKind::close, nlohmann::json::object());
  result["ledger"] = closed.payload.value("ledger", nlohmann::json(nullptr));
  result["client_bytes"] = {{"up", client.bytes_up()}, {"down", client.bytes_down()}};
  std::cout << result.dump(2) << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-session landmark map experiments and map service"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "process a scenario's sorties chronologically");
  std::string config_path, scenario = "city_dusk", out;
  std::vector<std::string> caps;
  std::vector<std::uint64_t> seeds;
  std::optional<double> threshold;
  std::size_t jobs = 1;
  bool no_fig5 = false;
  run->add_option("--config", config_path, "experiment config JSON");
  run->add_option("--scenario", scenario, "built-in scenario name or spec file")->capture_default_str();
  run->add_option("--cap", caps, "landmark cap (repeatable; 'inf' for unsummarized)");
  run->add_option("--seed", seeds, "run seed (repeatable)");
  run->add_option("--out", out, "output directory");
  run->add_option("--threshold-m", threshold, "rich-session RMS threshold in meters");
  run->add_option("--jobs", jobs, "cells to run in parallel")->capture_default_str();
  run->add_flag("--no-fig5", no_fig5, "skip the with/without observation-session runs");

  auto* regress = app.add_subcommand("regress", "re-localize every dataset against the final maps");
  std::string run_dir;
  regress->add_option("--run-dir", run_dir, "directory written by 'run'")->required();

  auto* compare = app.add_subcommand("compare", "summarize a run directory into summary.json");
  compare->add_option("--run-dir", run_dir, "directory written by 'run'")->required();

  auto* serve = app.add_subcommand("serve", "run the shared-map service");
  std::string listen = "127.0.0.1:7878", map_path, ledger_out;
  std::optional<std::uint64_t> cap;
  double serve_threshold = 0.10;
  std::uint64_t world_seed = 0;
  serve->add_option("--listen", listen, "<addr:port>")->capture_default_str();
  serve->add_option("--map", map_path, "map file, loaded if present and saved on shutdown");
  serve->add_option("--cap", cap, "landmark cap");
  serve->add_option("--threshold-m", serve_threshold, "rich-session RMS threshold in meters")->capture_default_str();
  serve->add_option("--scenario", scenario, "scenario whose world is served")->capture_default_str();
  serve->add_option("--seed", world_seed, "run seed of the world")->capture_default_str();
  serve->add_option("--ledger-out", ledger_out, "append closed-session ledgers to this file");

  auto* drive = app.add_subcommand("drive", "drive one sortie against a running service");
  std::string connect = "127.0.0.1:7878", vehicle = "vehicle";
  std::optional<std::size_t> sortie;
  std::optional<double> condition;
  bool upload = false;
  PolicyFlags flags;
  drive->add_option("--connect", connect, "<addr:port>")->capture_default_str();
  drive->add_option("--scenario", scenario, "scenario of the served world")->capture_default_str();
  drive->add_option("--seed", world_seed, "run seed of the served world")->capture_default_str();
  drive->add_option("--sortie", sortie, "schedule index of the sortie to drive");
  drive->add_option("--condition", condition, "drive at this condition instead of a scheduled one");
  drive->add_flag("--upload", upload, "upload the sortie afterwards");
  drive->add_option("--vehicle", vehicle, "vehicle name")->capture_default_str();
  flags.add(drive);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config_path, scenario, caps, seeds, out, threshold, jobs, no_fig5);
    if (*regress) return cmd_regress(run_dir);
    if (*compare) return cmd_compare(run_dir);
    if (*serve) return cmd_serve(listen, map_path, cap, serve_threshold, scenario, world_seed, ledger_out);
    if (*drive) return cmd_drive(connect, scenario, world_seed, sortie, condition, flags, upload, vehicle);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "atlas: %s\n", e.what());
    return 2;
  }
  return 0;
}
