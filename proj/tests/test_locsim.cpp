#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "atlas/locsim.hpp"
#include "atlas/scenario.hpp"

using namespace atlas;

namespace {

struct CityFixture : ::testing::Test {
  static void SetUpTestSuite() {
    scenario = new Scenario(city_dusk());
    world = new World(scenario->make_world(0));
    const auto first = scenario->make_sortie(*world, 0, 0);
    map = new MultiSessionMap(process_sortie(MultiSessionMap(scenario->landmark_cap), *world, first,
                                             SelectionPolicy::reference(), scenario->process_config())
                                  .map);
  }
  static void TearDownTestSuite() {
    delete map;
    delete world;
    delete scenario;
  }
  static SortieDataset sortie(double condition, std::uint64_t seed, std::int64_t ts = 100) {
    return generate_sortie(*world, Condition(condition), scenario->noise, seed, "t", ts);
  }
  static inline Scenario* scenario = nullptr;
  static inline World* world = nullptr;
  static inline MultiSessionMap* map = nullptr;
};

LocalizationRun fake_run(std::vector<std::size_t> observed_counts, std::uint64_t seed = 1) {
  LocalizationRun r;
  r.dataset_seed = seed;
  for (std::size_t k = 0; k < observed_counts.size(); ++k) {
    Iteration it;
    it.query_pose = {double(k), 0, 0};
    for (std::size_t i = 0; i < observed_counts[k]; ++i) it.observed.push_back(LandmarkId{i});
    r.iterations.push_back(it);
  }
  return r;
}

}  // namespace

TEST(SimulateObservation, DegenerateProbabilities) {
  std::mt19937_64 rng(1);
  const ObservabilityKernel always{Condition(0.5), 0.1, 1.0};
  const ObservabilityKernel never{Condition(0.5), 0.1, 0.0};
  for (int i = 0; i < 1000; ++i) {
    ASSERT_TRUE(simulate_observation(always, Condition(0.5), rng));
    ASSERT_FALSE(simulate_observation(never, Condition(0.5), rng));
  }
}

TEST(SimulateObservation, EmpiricalFrequencyWithinBinomialBounds) {
  for (double c : {0.5, 0.55, 0.6, 0.7}) {
    const ObservabilityKernel k{Condition(0.5), 0.08, 0.9};
    const double p = k.p_det(Condition(c));
    std::mt19937_64 rng(static_cast<std::uint64_t>(c * 1000));
    const int n = 10000;
    int hits = 0;
    for (int i = 0; i < n; ++i) hits += simulate_observation(k, Condition(c), rng);
    EXPECT_NEAR(hits, n * p, 3.0 * std::sqrt(n * p * (1 - p)) + 1e-9) << "p=" << p;
  }
}

TEST(SimulateObservation, SharedDrawsAreUniform) {
  const int n = 10000;
  int below = 0;
  for (int i = 0; i < n; ++i) below += observation_draw(42, LandmarkId{static_cast<std::uint64_t>(i)}) < 0.3;
  EXPECT_NEAR(below, n * 0.3, 3.0 * std::sqrt(n * 0.3 * 0.7));
}

TEST(PoseError, FailureSentinelBelowMinimum) {
  std::mt19937_64 rng(2);
  const PoseErrorParams p;
  EXPECT_EQ(pose_error_proxy(0, p, rng), p.failure_error);
  EXPECT_EQ(pose_error_proxy(p.n_min - 1, p, rng), p.failure_error);
  EXPECT_FALSE(pose_error_sigma(0, p).has_value());
  EXPECT_TRUE(pose_error_sigma(p.n_min, p).has_value());
}

TEST(PoseError, SigmaApproachesFloorAndIsMonotone) {
  const PoseErrorParams p;
  EXPECT_NEAR(*pose_error_sigma(100000000, p), p.floor, 1e-4);
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t n = p.n_min; n < 2000; ++n) {
    const double s = *pose_error_sigma(n, p);
    EXPECT_LE(s, prev);
    prev = s;
  }
}

TEST(PoseError, MonteCarloExcessHalvesWhenCountQuadruples) {
  const PoseErrorParams p;
  auto estimate_sigma = [&](std::size_t n) {
    std::mt19937_64 rng(1000 + n);
    const int samples = 100000;
    double sum = 0;
    for (int i = 0; i < samples; ++i) sum += pose_error_proxy(n, p, rng);
    return sum / samples / std::sqrt(2.0 / std::numbers::pi);
  };
  for (std::size_t n : {4u, 16u, 64u}) {
    const double ratio = (estimate_sigma(4 * n) - p.floor) / (estimate_sigma(n) - p.floor);
    EXPECT_NEAR(ratio, 0.5, 0.03) << "n=" << n;
  }
}

TEST(ObservationRatio, Arithmetic) {
  const auto ref = fake_run({10, 10, 0, 4});
  const auto sel = fake_run({8, 10, 0, 1});
  const auto r = observation_ratio(sel, ref);
  ASSERT_EQ(r.per_iteration.size(), 4u);
  EXPECT_DOUBLE_EQ(*r.per_iteration[0], 0.8);
  EXPECT_DOUBLE_EQ(*r.per_iteration[1], 1.0);
  EXPECT_FALSE(r.per_iteration[2].has_value());
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_DOUBLE_EQ(r.mean, (0.8 + 1.0 + 0.25) / 3.0);
  EXPECT_DOUBLE_EQ(r.ratio_of_totals, 19.0 / 24.0);
}

TEST(ObservationRatio, IdentityAndMismatch) {
  const auto ref = fake_run({3, 5, 7});
  const auto r = observation_ratio(ref, ref);
  for (const auto& v : r.per_iteration) EXPECT_EQ(*v, 1.0);
  EXPECT_THROW(observation_ratio(fake_run({3, 5}), ref), Error);
  EXPECT_THROW(observation_ratio(fake_run({3, 5, 7}, 2), ref), Error);
}

TEST(DecideUpdate, ThresholdSemantics) {
  LocalizationRun run;
  run.rms_translation = 0.12;
  EXPECT_EQ(decide_update(run, 0.10), SessionKind::rich);
  run.rms_translation = 0.05;
  EXPECT_EQ(decide_update(run, 0.10), SessionKind::observation);
  run.rms_translation = 0.10;
  EXPECT_EQ(decide_update(run, 0.10), SessionKind::observation);
}

TEST(LocalizeDataset, EmptyMapFailsEveryIteration) {
  const World w = generate_world(city_dusk().world, 0);
  const auto d = generate_sortie(w, Condition(0.3), {}, 5);
  const auto run = localize_dataset(MultiSessionMap{}, w, d, SelectionPolicy::reference());
  EXPECT_EQ(run.iterations.size(), d.poses.size());
  EXPECT_EQ(run.failures, d.poses.size());
  EXPECT_DOUBLE_EQ(run.rms_translation, 1.0);
}

TEST_F(CityFixture, ChainInclusionAndRmsRecomputation) {
  const auto d = sortie(0.31, 7);
  for (const auto& p : scenario->policies) {
    const auto run = localize_dataset(*map, *world, d, p, scenario->locsim);
    for (const auto& it : run.iterations) {
      std::vector<LandmarkId> sel = it.selected;
      std::sort(sel.begin(), sel.end());
      ASSERT_TRUE(std::includes(it.candidates.begin(), it.candidates.end(), sel.begin(), sel.end()));
      ASSERT_TRUE(std::includes(sel.begin(), sel.end(), it.observed.begin(), it.observed.end()));
    }
    EXPECT_NEAR(run.rms_translation, recompute_rms(run.iterations), 1e-12 * std::max(1.0, run.rms_translation));
  }
}

TEST_F(CityFixture, Deterministic) {
  const auto d = sortie(0.31, 7);
  const SelectionPolicy p{Ranking::f_rank, 0.2, 1800, 11, 10, 1};
  const auto a = localize_dataset(*map, *world, d, p, scenario->locsim);
  const auto b = localize_dataset(*map, *world, d, p, scenario->locsim);
  ASSERT_EQ(a.iterations.size(), b.iterations.size());
  for (std::size_t k = 0; k < a.iterations.size(); ++k) {
    EXPECT_EQ(a.iterations[k].selected, b.iterations[k].selected);
    EXPECT_EQ(a.iterations[k].observed, b.iterations[k].observed);
    EXPECT_EQ(a.iterations[k].translation_error, b.iterations[k].translation_error);
  }
  EXPECT_EQ(a.rms_translation, b.rms_translation);
}

TEST_F(CityFixture, ConditionMatchedFullSelectionIsBelowThreshold) {
  const auto run = localize_dataset(*map, *world, sortie(0.30, 8), SelectionPolicy::reference(), scenario->locsim);
  EXPECT_LT(run.rms_translation, 0.10);
  EXPECT_GT(run.rms_translation, 0.02);
  const auto far = localize_dataset(*map, *world, sortie(0.80, 8), SelectionPolicy::reference(), scenario->locsim);
  EXPECT_GT(far.rms_translation, 0.10);
}

TEST_F(CityFixture, SelectiveRunsNeverObserveMoreThanReference) {
  const auto d = sortie(0.33, 9);
  const auto ref = localize_dataset(*map, *world, d, SelectionPolicy::reference(), scenario->locsim);
  for (const SelectionPolicy& p : {SelectionPolicy{Ranking::f_rand, 0.2, 1800, 13, 10, 1},
                                   SelectionPolicy{Ranking::f_rank, 0.3, 1800, 11, 10, 1},
                                   SelectionPolicy{Ranking::f_orig, 0.2, 1800, 17, 10, 1}}) {
    const auto run = localize_dataset(*map, *world, d, p, scenario->locsim);
    for (std::size_t k = 0; k < run.iterations.size(); ++k) {
      ASSERT_TRUE(std::includes(ref.iterations[k].observed.begin(), ref.iterations[k].observed.end(),
                                run.iterations[k].observed.begin(), run.iterations[k].observed.end()));
    }
    const auto r = observation_ratio(run, ref);
    for (const auto& v : r.per_iteration) {
      if (v) {
        ASSERT_LE(*v, 1.0);
      }
    }
  }
}

TEST_F(CityFixture, FullRatioRankingObservesLikeReference) {
  const auto d = sortie(0.35, 10);
  const auto ref = localize_dataset(*map, *world, d, SelectionPolicy::reference(), scenario->locsim);
  for (Ranking r : {Ranking::f_rank, Ranking::f_orig, Ranking::f_rand}) {
    const auto run = localize_dataset(*map, *world, d, SelectionPolicy{r, 1.0, 1800, 3, 10, 1}, scenario->locsim);
    for (std::size_t k = 0; k < run.iterations.size(); ++k) {
      ASSERT_EQ(run.iterations[k].observed, ref.iterations[k].observed) << to_string(r) << " iteration " << k;
    }
  }
}

TEST_F(CityFixture, FirstSortieOnEmptyMapIsRich) {
  const auto d = scenario->make_sortie(*world, 0, 0);
  const auto done = process_sortie(MultiSessionMap(500), *world, d, SelectionPolicy::reference(),
                                   scenario->process_config());
  EXPECT_EQ(done.report.session_kind, SessionKind::rich);
  EXPECT_EQ(done.report.n_landmarks_before, 0u);
  EXPECT_LE(done.map.landmarks().size(), 500u);
  EXPECT_TRUE(done.report.summary.ran);
  EXPECT_EQ(done.map.count_sessions(SessionKind::rich), 1u);
}

TEST_F(CityFixture, CoveredConditionBecomesObservationSession) {
  const auto d = sortie(0.30, 12, 50);
  const auto done = process_sortie(*map, *world, d, SelectionPolicy::reference(), scenario->process_config());
  EXPECT_EQ(done.report.session_kind, SessionKind::observation);
  EXPECT_EQ(done.map.landmarks().size(), map->landmarks().size());
  EXPECT_EQ(done.map.vertices().size(), map->vertices().size());
  EXPECT_EQ(done.map.count_sessions(SessionKind::observation), 1u);
  EXPECT_EQ(done.map.count_sessions(SessionKind::rich), map->count_sessions(SessionKind::rich));
}

TEST_F(CityFixture, NovelConditionBecomesRichSessionUnderCap) {
  const auto d = sortie(0.70, 13, 50);
  const auto done = process_sortie(*map, *world, d, SelectionPolicy::reference(), scenario->process_config());
  EXPECT_EQ(done.report.session_kind, SessionKind::rich);
  EXPECT_LE(done.map.landmarks().size(), scenario->landmark_cap);
  EXPECT_EQ(done.map.count_sessions(SessionKind::rich), map->count_sessions(SessionKind::rich) + 1);
  EXPECT_EQ(done.map.count_sessions(SessionKind::observation), 0u);
}

TEST_F(CityFixture, ProcessSortieIsDeterministic) {
  const auto d = sortie(0.70, 13, 50);
  const auto a = process_sortie(*map, *world, d, SelectionPolicy::reference(), scenario->process_config());
  const auto b = process_sortie(*map, *world, d, SelectionPolicy::reference(), scenario->process_config());
  EXPECT_EQ(report_to_json(a.report).dump(), report_to_json(b.report).dump());
  EXPECT_TRUE(a.map == b.map);
}

TEST_F(CityFixture, FailedIngestionLeavesNoTrace) {
  auto d = sortie(0.70, 13, 0);
  EXPECT_THROW(process_sortie(*map, *world, d, SelectionPolicy::reference(), scenario->process_config()), Error);
}
