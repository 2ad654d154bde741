#include <gtest/gtest.h>

#include <random>

#include "atlas/summarizer.hpp"
#include "oracles.hpp"

using namespace atlas;

namespace {

SummarizationProblem two_block_example() {
  SummarizationProblem p;
  p.q = {1, 2, 3, 4};
  p.rows = {{0, 1}, {2, 3}};
  p.lambda = 10;
  p.n_desired = 2;
  p.b = 1;
  return p;
}

std::vector<std::uint8_t> mask(std::size_t n, std::initializer_list<std::size_t> on) {
  std::vector<std::uint8_t> x(n, 0);
  for (auto i : on) x[i] = 1;
  return x;
}

}  // namespace

TEST(SolveExact, TwoBlockExample) {
  const auto p = two_block_example();
  const auto s = solve_exact(p);
  EXPECT_EQ(s.keep, mask(4, {0, 2}));
  EXPECT_EQ(s.slack, (std::vector<std::uint32_t>{0, 0}));
  EXPECT_DOUBLE_EQ(s.objective, 4.0);
  EXPECT_TRUE(s.exact);
  const auto bf = oracle::brute_force_ilp(p);
  EXPECT_DOUBLE_EQ(bf.objective, 4.0);
  EXPECT_EQ(bf.keep, s.keep);
}

TEST(SolveExact, KeepAllWhenDesiredEqualsN) {
  auto p = two_block_example();
  p.n_desired = 4;
  p.b = 3;
  const auto s = solve_exact(p);
  EXPECT_EQ(s.keep, mask(4, {0, 1, 2, 3}));
  EXPECT_EQ(s.slack, (std::vector<std::uint32_t>{1, 1}));
  EXPECT_DOUBLE_EQ(s.objective, 10.0 + 10.0 * 2);
}

TEST(SolveExact, TinyLambdaStillHonoursCardinality) {
  auto p = two_block_example();
  p.lambda = 1e-9;
  p.b = 5;
  const auto s = solve_exact(p);
  EXPECT_EQ(std::count(s.keep.begin(), s.keep.end(), 1), 2);
  EXPECT_TRUE(is_feasible(p, s));
  EXPECT_EQ(s.keep, mask(4, {0, 1}));
}

TEST(SolveExact, RejectsInfeasibleCardinality) {
  auto p = two_block_example();
  p.n_desired = 5;
  try {
    solve_exact(p);
    FAIL() << "expected infeasible";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::infeasible);
  }
}

TEST(SolveExact, RejectsOversizedInstance) {
  SummarizationProblem p;
  p.q.assign(31, 1.0);
  p.rows = {{}};
  for (std::uint32_t i = 0; i < 31; ++i) p.rows[0].push_back(i);
  p.n_desired = 3;
  EXPECT_THROW(solve_exact(p, 30), Error);
}

TEST(SolveExact, MatchesBruteForceOnRandomInstances) {
  std::mt19937_64 rng(101);
  for (int t = 0; t < 300; ++t) {
    const auto p = oracle::random_problem(rng);
    const auto s = solve_exact(p);
    const auto bf = oracle::brute_force_ilp(p);
    ASSERT_NEAR(s.objective, bf.objective, 1e-9) << "instance " << t;
    ASSERT_EQ(s.keep, bf.keep) << "instance " << t;
    ASSERT_TRUE(is_feasible(p, s));
  }
}

TEST(SolveExact, TiesResolveToLexicographicallySmallest) {
  SummarizationProblem p;
  p.q = {1, 1, 1, 1};
  p.rows = {{0, 1, 2, 3}};
  p.n_desired = 2;
  p.b = 1;
  EXPECT_EQ(solve_exact(p).keep, mask(4, {2, 3}));
}

TEST(Slack, ClosedFormForAnyKeep) {
  std::mt19937_64 rng(103);
  for (int t = 0; t < 200; ++t) {
    const auto p = oracle::random_problem(rng);
    std::vector<std::uint8_t> x(p.q.size());
    for (auto& v : x) v = rng() % 2;
    const auto z = optimal_slack(p, x);
    for (std::size_t v = 0; v < p.rows.size(); ++v) {
      std::int64_t ax = 0;
      for (auto i : p.rows[v]) ax += x[i];
      ASSERT_EQ(z[v], static_cast<std::uint32_t>(std::max<std::int64_t>(0, std::int64_t{p.b} - ax)));
    }
  }
}

TEST(SolveGreedy, MatchesExactOnDisjointCoverage) {
  const auto p = two_block_example();
  const auto g = solve_greedy(p);
  EXPECT_FALSE(g.exact);
  EXPECT_EQ(g.keep, solve_exact(p).keep);
  EXPECT_DOUBLE_EQ(g.objective, 4.0);
}

TEST(SolveGreedy, KeepAllWhenDesiredEqualsN) {
  auto p = two_block_example();
  p.n_desired = 4;
  EXPECT_EQ(solve_greedy(p).keep, mask(4, {0, 1, 2, 3}));
  EXPECT_DOUBLE_EQ(solve_greedy(p).objective, solve_exact(p).objective);
}

TEST(SolveGreedy, FeasibleAndCloseToExact) {
  std::mt19937_64 rng(107);
  int within = 0;
  const int n = 200;
  for (int t = 0; t < n; ++t) {
    const auto p = oracle::random_problem(rng);
    const auto g = solve_greedy(p);
    const auto e = solve_exact(p);
    ASSERT_TRUE(is_feasible(p, g)) << "instance " << t;
    ASSERT_GE(g.objective, e.objective - 1e-9);
    within += g.objective <= 1.2 * e.objective + 1e-12;
  }
  EXPECT_GE(within, n * 9 / 10);
}

TEST(SolveGreedy, ScalesToLargeInstances) {
  std::mt19937_64 rng(109);
  SummarizationProblem p;
  const std::size_t n = 20000, m = 2000;
  std::uniform_real_distribution<double> c(0.05, 1.0);
  for (std::size_t i = 0; i < n; ++i) p.q.push_back(c(rng));
  p.rows.assign(m, {});
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t v = i % m;
    p.rows[v].push_back(i);
    p.rows[(v + 1) % m].push_back(i);
  }
  for (auto& r : p.rows) std::sort(r.begin(), r.end());
  p.n_desired = 6000;
  const auto g = solve_greedy(p);
  EXPECT_TRUE(is_feasible(p, g));
}

TEST(CostVector, ArithmeticAndMonotonicity) {
  MultiSessionMap map;
  RichSessionInput in;
  in.timestamp = 1;
  in.poses = {{0, 0, 0}, {1, 0, 0}};
  in.new_landmarks.push_back({{0, 0, 0}, {{0, 5}, {1, 5}}});
  in.new_landmarks.push_back({{1, 0, 0}, {{0, 5}, {1, 5}}});
  map.add_rich_session(in);
  const LandmarkId second = std::next(map.landmarks().begin())->first;
  RichSessionInput in2;
  in2.timestamp = 2;
  in2.poses = {{0, 0, 0}};
  in2.reobserved[second] = {{0, 1}};
  map.add_rich_session(in2);
  const auto q = build_cost_vector(map);
  EXPECT_DOUBLE_EQ(q[0], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(q[1], 1.0 / (1.0 + 2.0 + 1.1));
  EXPECT_LT(q[1], q[0]);
}

TEST(CostVector, OrderMatchesBruteForceKey) {
  std::mt19937_64 rng(113);
  const MultiSessionMap map = oracle::random_map(rng, 3, 7, 2);
  const auto q = build_cost_vector(map);
  std::vector<double> key;
  for (const auto& [id, lm] : map.landmarks()) {
    key.push_back(static_cast<double>(lm.sessions.size()) + 0.1 * static_cast<double>(lm.total_observations()));
  }
  for (std::size_t i = 0; i < q.size(); ++i) {
    EXPECT_GT(q[i], 0.0);
    EXPECT_LE(q[i], 1.0);
    for (std::size_t j = 0; j < q.size(); ++j) {
      if (key[i] > key[j] + 1e-12) {
        EXPECT_LT(q[i], q[j]);
      }
    }
  }
}

TEST(Coobservability, ColumnsRowsAndEmptyMap) {
  EXPECT_TRUE(build_coobservability(MultiSessionMap{}).empty());
  MultiSessionMap map;
  RichSessionInput in;
  in.timestamp = 1;
  for (int k = 0; k < 5; ++k) in.poses.push_back({double(k), 0, 0});
  in.new_landmarks.push_back({{0, 0, 0}, {{1, 1}, {3, 2}}});
  map.add_rich_session(in);
  const auto rows = build_coobservability(map);
  ASSERT_EQ(rows.size(), 5u);
  std::size_t ones = 0;
  for (const auto& r : rows) ones += r.size();
  EXPECT_EQ(ones, 2u);

  std::mt19937_64 rng(127);
  const MultiSessionMap big = oracle::random_map(rng, 3, 40, 2);
  const auto a = build_coobservability(big);
  std::size_t v = 0;
  for (const auto& [vid, vert] : big.vertices()) {
    std::size_t scan = 0;
    for (const auto& [id, lm] : big.landmarks()) scan += lm.obs_counts.count(vid);
    EXPECT_EQ(a[v++].size(), scan);
  }
}

TEST(ApplySummarization, RemovesDroppedLandmarksOnly) {
  std::mt19937_64 rng(131);
  const MultiSessionMap map = oracle::random_map(rng, 3, 60, 2);
  const auto p = build_problem(map, 100);
  const auto s = solve_greedy(p);
  const MultiSessionMap out = apply_summarization(map, p, s);
  EXPECT_EQ(out.landmarks().size(), 100u);
  EXPECT_EQ(out.sessions(), map.sessions());
  EXPECT_EQ(out.vertices(), map.vertices());
  for (const auto& [id, lm] : out.landmarks()) EXPECT_EQ(lm, map.landmark(id));
  EXPECT_TRUE(oracle::index_matches_brute_force(out));
}

TEST(ApplySummarization, KeepAllLeavesMapUnchanged) {
  std::mt19937_64 rng(137);
  const MultiSessionMap map = oracle::random_map(rng, 2, 10, 1);
  const auto p = build_problem(map, map.landmarks().size());
  EXPECT_TRUE(apply_summarization(map, p, solve_exact(p)) == map);
}

TEST(ApplySummarization, RejectsStaleSolution) {
  std::mt19937_64 rng(139);
  MultiSessionMap map = oracle::random_map(rng, 2, 30, 0);
  const auto p = build_problem(map, 20);
  const auto s = solve_greedy(p);
  map.add_observation_session({100, "o", {{map.landmarks().begin()->first, {{map.vertices().begin()->first, 1}}}}});
  try {
    apply_summarization(map, p, s);
    FAIL() << "expected stale_solution";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::stale_solution);
  }
}

TEST(SummarizeToCap, RestoresCap) {
  std::mt19937_64 rng(149);
  MultiSessionMap map = oracle::random_map(rng, 3, 80, 1);
  map.set_landmark_cap(150);
  const auto outcome = summarize_to_cap(map);
  EXPECT_TRUE(outcome.ran);
  EXPECT_FALSE(outcome.exact);
  EXPECT_EQ(map.landmarks().size(), 150u);

  MultiSessionMap small = oracle::random_map(rng, 2, 10, 0);
  small.set_landmark_cap(12);
  EXPECT_TRUE(summarize_to_cap(small).exact);
  EXPECT_EQ(small.landmarks().size(), 12u);
}

TEST(ProblemJson, RoundTrip) {
  std::mt19937_64 rng(151);
  const auto p = oracle::random_problem(rng);
  const auto j = problem_to_json(p);
  const auto back = problem_from_json(j);
  EXPECT_EQ(back.q, p.q);
  EXPECT_EQ(back.rows, p.rows);
  EXPECT_EQ(back.n_desired, p.n_desired);
  EXPECT_EQ(back.b, p.b);
  EXPECT_EQ(back.lambda, p.lambda);
  EXPECT_EQ(problem_to_json(back).dump(), j.dump());
  EXPECT_TRUE(j.contains("A") && j["A"].contains("rows"));
}
