#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include <json.hpp>

#include "atlas/map.hpp"

namespace atlas {

/// Keep-or-drop landmark selection as an integer program:
///
///   minimize  q^T x + lambda * 1^T zeta
///   s.t.      sum(x) = n_desired,  A x + zeta >= b,  zeta integral >= 0,
///
/// with x binary over landmarks and A the vertex x landmark co-observability.
struct SummarizationProblem {
  std::vector<double> q;
  // rows[v] lists the landmark columns observed from vertex v, ascending.
  std::vector<std::vector<std::uint32_t>> rows;
  std::size_t n_desired = 0;
  std::uint32_t b = 3;
  double lambda = 1.0;

  // Set when the instance is built from a map.
  std::vector<LandmarkId> landmark_ids;
  std::optional<std::uint64_t> map_fingerprint;

  std::size_t n_landmarks() const { return q.size(); }
  std::size_t n_vertices() const { return rows.size(); }

  /// Column view of A, built on demand.
  std::vector<std::vector<std::uint32_t>> columns() const {
    std::vector<std::vector<std::uint32_t>> cols(q.size());
    for (std::uint32_t v = 0; v < rows.size(); ++v) {
      for (std::uint32_t i : rows[v]) cols[i].push_back(v);
    }
    return cols;
  }

  void validate() const {
    if (q.empty()) throw Error(ErrorCode::invalid_argument, "problem needs at least one landmark");
    if (n_desired < 1 || n_desired > q.size())
      throw Error(ErrorCode::infeasible, "n_desired must be in [1, N]");
    if (b < 1) throw Error(ErrorCode::invalid_argument, "b must be positive");
    if (!(lambda > 0.0)) throw Error(ErrorCode::invalid_argument, "lambda must be positive");
    for (double c : q) {
      if (!(c >= 0.0) || !std::isfinite(c)) throw Error(ErrorCode::invalid_argument, "costs must be finite and >= 0");
    }
    std::vector<bool> seen(q.size(), false);
    for (const auto& row : rows) {
      for (std::size_t k = 0; k < row.size(); ++k) {
        if (row[k] >= q.size()) throw Error(ErrorCode::invalid_argument, "column index out of range");
        if (k > 0 && row[k] <= row[k - 1]) throw Error(ErrorCode::invalid_argument, "row indices must ascend");
        seen[row[k]] = true;
      }
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end())
      throw Error(ErrorCode::invalid_argument, "every landmark must be observed from some vertex");
    if (!landmark_ids.empty() && landmark_ids.size() != q.size())
      throw Error(ErrorCode::invalid_argument, "landmark id list does not match N");
  }
};

struct SummarizationSolution {
  std::vector<std::uint8_t> keep;
  std::vector<std::uint32_t> slack;
  double objective = 0.0;
  bool exact = false;
};

/// Optimal slack for a fixed keep vector: zeta_v = max(0, b - (A x)_v).
inline std::vector<std::uint32_t> optimal_slack(const SummarizationProblem& p, const std::vector<std::uint8_t>& keep) {
  std::vector<std::uint32_t> slack(p.rows.size(), 0);
  for (std::size_t v = 0; v < p.rows.size(); ++v) {
    std::uint32_t cov = 0;
    for (std::uint32_t i : p.rows[v]) cov += keep[i];
    slack[v] = cov >= p.b ? 0 : p.b - cov;
  }
  return slack;
}

inline double objective_value(const SummarizationProblem& p, const std::vector<std::uint8_t>& keep,
                              const std::vector<std::uint32_t>& slack) {
  double obj = 0.0;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) obj += p.q[i];
  }
  std::uint64_t total_slack = 0;
  for (std::uint32_t z : slack) total_slack += z;
  return obj + p.lambda * static_cast<double>(total_slack);
}

inline SummarizationSolution make_solution(const SummarizationProblem& p, std::vector<std::uint8_t> keep, bool exact) {
  SummarizationSolution s;
  s.slack = optimal_slack(p, keep);
  s.objective = objective_value(p, keep, s.slack);
  s.keep = std::move(keep);
  s.exact = exact;
  return s;
}

/// True iff the solution satisfies the cardinality, coverage and integrality
/// constraints of its problem.
inline bool is_feasible(const SummarizationProblem& p, const SummarizationSolution& s) {
  if (s.keep.size() != p.q.size() || s.slack.size() != p.rows.size()) return false;
  std::size_t kept = 0;
  for (std::uint8_t x : s.keep) {
    if (x > 1) return false;
    kept += x;
  }
  if (kept != p.n_desired) return false;
  for (std::size_t v = 0; v < p.rows.size(); ++v) {
    std::uint64_t cov = s.slack[v];
    for (std::uint32_t i : p.rows[v]) cov += s.keep[i];
    if (cov < p.b) return false;
  }
  return true;
}

inline constexpr double default_cost_gamma = 0.1;

/// q_i = 1 / (1 + |sessions| + gamma * total observations). Landmarks seen in
/// more sessions and more often are cheaper to keep.
inline std::vector<double> build_cost_vector(const MultiSessionMap& map, double gamma = default_cost_gamma) {
  std::vector<double> q;
  q.reserve(map.landmarks().size());
  for (const auto& [id, lm] : map.landmarks()) {
    q.push_back(1.0 / (1.0 + static_cast<double>(lm.sessions.size()) +
                       gamma * static_cast<double>(lm.total_observations())));
  }
  return q;
}

/// Sparse vertex x landmark incidence; rows follow vertex id order and
/// columns follow landmark id order.
inline std::vector<std::vector<std::uint32_t>> build_coobservability(const MultiSessionMap& map) {
  std::unordered_map<VertexId, std::uint32_t> row_of;
  std::uint32_t r = 0;
  for (const auto& [vid, v] : map.vertices()) row_of.emplace(vid, r++);
  std::vector<std::vector<std::uint32_t>> rows(map.vertices().size());
  std::uint32_t col = 0;
  for (const auto& [id, lm] : map.landmarks()) {
    for (const auto& [vid, c] : lm.obs_counts) rows[row_of.at(vid)].push_back(col);
    ++col;
  }
  return rows;
}

struct SummarizerOptions {
  std::uint32_t b = 3;
  double lambda = 1.0;
  double gamma = default_cost_gamma;
  std::size_t exact_limit = 30;
};

inline SummarizationProblem build_problem(const MultiSessionMap& map, std::size_t n_desired,
                                          const SummarizerOptions& opt = {}) {
  SummarizationProblem p;
  p.q = build_cost_vector(map, opt.gamma);
  p.rows = build_coobservability(map);
  // Vertices that see no landmark carry no constraint worth encoding.
  std::erase_if(p.rows, [](const auto& row) { return row.empty(); });
  p.n_desired = n_desired;
  p.b = opt.b;
  p.lambda = opt.lambda;
  for (const auto& [id, lm] : map.landmarks()) p.landmark_ids.push_back(id);
  p.map_fingerprint = map.fingerprint();
  p.validate();
  return p;
}

/// Depth-first branch and bound over landmarks in index order, exploring
/// x_i = 0 before x_i = 1, so the first optimum found is the
/// lexicographically smallest keep vector. The bound adds the cheapest
/// possible completion of the cardinality constraint to a per-vertex lower
/// bound on the remaining slack.
inline SummarizationSolution solve_exact(const SummarizationProblem& p, std::size_t exact_limit = 30) {
  p.validate();
  const std::size_t n = p.q.size();
  const std::size_t m = p.rows.size();
  if (n > exact_limit)
    throw Error(ErrorCode::invalid_argument, "instance too large for exact solve (N=" + std::to_string(n) + ")");
  const auto cols = p.columns();

  // cheapest[i][r] = sum of the r smallest costs among landmarks i..n-1.
  std::vector<std::vector<double>> cheapest(n + 1);
  for (std::size_t i = 0; i <= n; ++i) {
    std::vector<double> suffix(p.q.begin() + static_cast<std::ptrdiff_t>(i), p.q.end());
    std::sort(suffix.begin(), suffix.end());
    cheapest[i].assign(suffix.size() + 1, 0.0);
    for (std::size_t r = 0; r < suffix.size(); ++r) cheapest[i][r + 1] = cheapest[i][r] + suffix[r];
  }
  // avail[i][v] = number of landmarks i..n-1 observed from vertex v.
  std::vector<std::vector<std::uint32_t>> avail(n + 1, std::vector<std::uint32_t>(m, 0));
  for (std::size_t i = n; i-- > 0;) {
    avail[i] = avail[i + 1];
    for (std::uint32_t v : cols[i]) ++avail[i][v];
  }

  std::vector<std::uint8_t> x(n, 0), best_x;
  std::vector<std::uint32_t> cov(m, 0);
  double best = std::numeric_limits<double>::infinity();

  auto slack_cost = [&]() {
    std::uint64_t z = 0;
    for (std::size_t v = 0; v < m; ++v) z += cov[v] >= p.b ? 0 : p.b - cov[v];
    return p.lambda * static_cast<double>(z);
  };
  auto tolerance = [&]() { return std::isfinite(best) ? 1e-12 * std::max(1.0, std::abs(best)) : 0.0; };

  auto dfs = [&](auto&& self, std::size_t i, std::size_t chosen, double cost) -> void {
    const std::size_t need = p.n_desired - chosen;
    if (need > n - i) return;
    if (need == 0) {
      const double obj = cost + slack_cost();
      if (obj < best - tolerance()) {
        best = obj;
        best_x = x;
      }
      return;
    }
    std::uint64_t slack_lb = 0;
    for (std::size_t v = 0; v < m; ++v) {
      const std::uint64_t reach = cov[v] + std::min<std::uint64_t>(avail[i][v], need);
      if (reach < p.b) slack_lb += p.b - reach;
    }
    const double bound = cost + cheapest[i][need] + p.lambda * static_cast<double>(slack_lb);
    if (bound >= best - tolerance()) return;

    self(self, i + 1, chosen, cost);
    x[i] = 1;
    for (std::uint32_t v : cols[i]) ++cov[v];
    self(self, i + 1, chosen + 1, cost + p.q[i]);
    for (std::uint32_t v : cols[i]) --cov[v];
    x[i] = 0;
  };
  dfs(dfs, 0, 0, 0.0);
  return make_solution(p, std::move(best_x), true);
}

/// Feasible heuristic: cover each vertex with its cheapest landmarks, then
/// fill the remaining budget with the globally cheapest ones. When covering
/// alone overshoots the budget, landmarks are evicted one at a time by the
/// smallest objective increase (cost saved against slack incurred).
inline SummarizationSolution solve_greedy(const SummarizationProblem& p) {
  p.validate();
  const std::size_t n = p.q.size();
  const std::size_t m = p.rows.size();
  const auto cols = p.columns();

  std::vector<std::uint32_t> by_cost(n);
  std::iota(by_cost.begin(), by_cost.end(), 0u);
  std::stable_sort(by_cost.begin(), by_cost.end(), [&](std::uint32_t a, std::uint32_t b) { return p.q[a] < p.q[b]; });
  std::vector<std::uint32_t> rank(n);
  for (std::uint32_t r = 0; r < n; ++r) rank[by_cost[r]] = r;

  std::vector<std::uint8_t> keep(n, 0);
  std::vector<std::uint32_t> cov(m, 0);
  std::size_t kept = 0;
  auto take = [&](std::uint32_t i) {
    keep[i] = 1;
    ++kept;
    for (std::uint32_t v : cols[i]) ++cov[v];
  };

  for (std::size_t v = 0; v < m; ++v) {
    if (cov[v] >= p.b) continue;
    std::vector<std::uint32_t> row = p.rows[v];
    std::sort(row.begin(), row.end(), [&](std::uint32_t a, std::uint32_t b) { return rank[a] < rank[b]; });
    for (std::uint32_t i : row) {
      if (cov[v] >= p.b) break;
      if (!keep[i]) take(i);
    }
  }

  if (kept > p.n_desired) {
    // delta[i]: objective change from dropping i = -q_i + lambda * #(vertices
    // of i at or below b).
    std::vector<double> delta(n, 0.0);
    auto recompute = [&](std::uint32_t i) {
      std::uint32_t tight = 0;
      for (std::uint32_t v : cols[i]) tight += cov[v] <= p.b ? 1 : 0;
      delta[i] = -p.q[i] + p.lambda * tight;
    };
    for (std::uint32_t i = 0; i < n; ++i) {
      if (keep[i]) recompute(i);
    }
    while (kept > p.n_desired) {
      std::uint32_t victim = 0;
      double best = std::numeric_limits<double>::infinity();
      for (std::uint32_t i = 0; i < n; ++i) {
        if (keep[i] && delta[i] < best) {
          best = delta[i];
          victim = i;
        }
      }
      keep[victim] = 0;
      --kept;
      for (std::uint32_t v : cols[victim]) {
        --cov[v];
        if (cov[v] == p.b) {
          for (std::uint32_t j : p.rows[v]) {
            if (keep[j]) recompute(j);
          }
        }
      }
    }
  }

  for (std::uint32_t i : by_cost) {
    if (kept >= p.n_desired) break;
    if (!keep[i]) take(i);
  }
  return make_solution(p, std::move(keep), false);
}

/// Removes every landmark the solution drops. Rejects a solution computed
/// against a different map state.
inline MultiSessionMap apply_summarization(const MultiSessionMap& map, const SummarizationProblem& p,
                                           const SummarizationSolution& s) {
  if (!p.map_fingerprint || *p.map_fingerprint != map.fingerprint() || p.landmark_ids.size() != s.keep.size())
    throw Error(ErrorCode::stale_solution, "solution does not belong to this map state");
  std::vector<LandmarkId> drop;
  for (std::size_t i = 0; i < s.keep.size(); ++i) {
    if (!s.keep[i]) drop.push_back(p.landmark_ids[i]);
  }
  MultiSessionMap out = map;
  out.remove_landmarks(drop);
  return out;
}

struct SummaryOutcome {
  bool ran = false;
  bool exact = false;
  double objective = 0.0;
  std::size_t removed = 0;
};

/// Brings the map back under its landmark cap. No-op when already within.
inline SummaryOutcome summarize_to_cap(MultiSessionMap& map, const SummarizerOptions& opt = {}) {
  SummaryOutcome out;
  const std::size_t n = map.landmarks().size();
  if (map.landmark_cap() == unbounded_cap || n <= map.landmark_cap()) return out;
  const auto p = build_problem(map, static_cast<std::size_t>(map.landmark_cap()), opt);
  const auto s = n <= opt.exact_limit ? solve_exact(p, opt.exact_limit) : solve_greedy(p);
  map = apply_summarization(map, p, s);
  out.ran = true;
  out.exact = s.exact;
  out.objective = s.objective;
  out.removed = n - map.landmarks().size();
  return out;
}

inline nlohmann::json problem_to_json(const SummarizationProblem& p) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : p.rows) rows.push_back(r);
  return {{"q", p.q}, {"A", {{"rows", rows}}}, {"n_desired", p.n_desired}, {"b", p.b}, {"lambda", p.lambda}};
}

inline SummarizationProblem problem_from_json(const nlohmann::json& j) {
  SummarizationProblem p;
  try {
    p.q = j.at("q").get<std::vector<double>>();
    for (const auto& r : j.at("A").at("rows")) p.rows.push_back(r.get<std::vector<std::uint32_t>>());
    p.n_desired = j.at("n_desired").get<std::size_t>();
    p.b = j.at("b").get<std::uint32_t>();
    p.lambda = j.at("lambda").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::corrupt_stream, e.what());
  }
  p.validate();
  return p;
}

}  // namespace atlas
