#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "atlas/scenario.hpp"
#include "atlas/worldgen.hpp"

using namespace atlas;

namespace {

WorldSpec square_spec(double density) {
  WorldSpec s;
  s.waypoints = {{0, 0}, {60, 0}, {60, 40}, {0, 40}};
  s.density = density;
  s.corridor_half_width = 8.0;
  s.poses_per_sortie = 100;
  return s;
}

bool same_world(const World& a, const World& b) {
  if (a.trajectory() != b.trajectory() || a.field().size() != b.field().size()) return false;
  for (std::size_t i = 0; i < a.field().size(); ++i) {
    const auto& x = a.field()[i];
    const auto& y = b.field()[i];
    if (!(x.position == y.position) || !(x.kernel.center == y.kernel.center) || x.kernel.width != y.kernel.width ||
        x.kernel.peak != y.kernel.peak)
      return false;
  }
  return true;
}

}  // namespace

TEST(Condition, WrapsAndMeasuresCircularDistance) {
  EXPECT_DOUBLE_EQ(Condition(1.25).value, 0.25);
  EXPECT_DOUBLE_EQ(Condition(-0.25).value, 0.75);
  EXPECT_NEAR(circular_distance(Condition(0.05), Condition(0.95)), 0.1, 1e-12);
  for (double a = 0.0; a < 1.0; a += 0.013) {
    for (double b = 0.0; b < 1.0; b += 0.017) {
      const double d = circular_distance(Condition(a), Condition(b));
      ASSERT_GE(d, 0.0);
      ASSERT_LE(d, 0.5);
    }
  }
}

TEST(Kernel, BoundedAndCircular) {
  for (double c : {0.0, 0.3, 0.97}) {
    for (double w : {0.01, 0.05, 0.3}) {
      const ObservabilityKernel k{Condition(c), w, 0.8};
      for (double a = -1.0; a < 2.0; a += 0.0137) {
        const double p = k.p_det(Condition(a));
        ASSERT_GE(p, 0.0);
        ASSERT_LE(p, 0.8);
        ASSERT_NEAR(p, k.p_det(Condition(a + 1.0)), 1e-9);
      }
      EXPECT_DOUBLE_EQ(k.p_det(Condition(c)), 0.8);
    }
  }
}

TEST(Kernel, InfiniteWidthIsConditionIndependent) {
  auto spec = square_spec(0.2);
  spec.kernels.width_min = 1.0;
  spec.kernels.width_max = std::numeric_limits<double>::infinity();
  const World w = generate_world(spec, 3);
  ASSERT_FALSE(w.field().empty());
  for (const auto& t : w.field()) {
    for (double a : {0.0, 0.25, 0.5, 0.75}) EXPECT_DOUBLE_EQ(t.kernel.p_det(Condition(a)), t.kernel.peak);
  }
  const ObservabilityKernel wide{Condition(0.1), 1e6, 0.9};
  EXPECT_NEAR(wide.p_det(Condition(0.6)), 0.9, 1e-9);
}

TEST(GenerateWorld, DeterministicPerSeed) {
  const auto spec = square_spec(0.3);
  EXPECT_TRUE(same_world(generate_world(spec, 5), generate_world(spec, 5)));
  EXPECT_FALSE(same_world(generate_world(spec, 5), generate_world(spec, 6)));
}

TEST(GenerateWorld, DensityDoublingDoublesCount) {
  const auto spec = square_spec(0.25);
  const World probe = generate_world(spec, 0);
  const double area = probe.path_length() * 2.0 * spec.corridor_half_width;
  for (double density : {0.25, 0.5}) {
    auto s = square_spec(density);
    const double lambda = density * area;
    double total = 0.0;
    const int seeds = 20;
    for (int seed = 0; seed < seeds; ++seed) {
      const double n = static_cast<double>(generate_world(s, static_cast<std::uint64_t>(seed)).field().size());
      EXPECT_NEAR(n, lambda, 4.0 * std::sqrt(lambda));
      total += n;
    }
    EXPECT_NEAR(total / seeds, lambda, 3.0 * std::sqrt(lambda / seeds));
  }
}

TEST(GenerateWorld, LandmarksLieInTheCorridor) {
  const auto spec = square_spec(0.3);
  const World w = generate_world(spec, 9);
  PathSampler path(spec.waypoints);
  for (const auto& t : w.field()) {
    double best = std::numeric_limits<double>::infinity();
    for (double s = 0; s < path.length(); s += 0.25) {
      const Pose p = path.at(s);
      best = std::min(best, std::hypot(p.x - t.position.x, p.y - t.position.y));
    }
    EXPECT_LE(best, spec.corridor_half_width + 0.2);
    EXPECT_GE(t.position.z, 0.0);
    EXPECT_LE(t.position.z, spec.height_max);
  }
}

TEST(GenerateWorld, RejectsDegenerateTrajectory) {
  auto spec = square_spec(0.3);
  spec.waypoints = {{0, 0}, {10, 0}};
  EXPECT_THROW(generate_world(spec, 1), Error);
  spec.waypoints = {{0, 0}, {0, 0}, {0, 0}};
  EXPECT_THROW(generate_world(spec, 1), Error);
  spec = square_spec(0.0);
  EXPECT_THROW(generate_world(spec, 1), Error);
}

TEST(GenerateWorld, FieldLookupByPosition) {
  const World w = generate_world(square_spec(0.3), 2);
  for (std::size_t i = 0; i < w.field().size(); i += 17) EXPECT_EQ(w.field_index(w.field()[i].position), i);
  EXPECT_FALSE(w.field_index({1e6, 1e6, 1e6}).has_value());
  EXPECT_EQ(w.p_det({1e6, 1e6, 1e6}, Condition(0.3)), 0.0);
}

TEST(GenerateSortie, ZeroNoiseFollowsTrajectory) {
  const World w = generate_world(square_spec(0.3), 2);
  const auto d = generate_sortie(w, Condition(0.4), {}, 77, "x", 3);
  EXPECT_EQ(d.poses, w.trajectory());
  EXPECT_EQ(d.condition, Condition(0.4));
  EXPECT_EQ(d.timestamp, 3);
}

TEST(GenerateSortie, SeedsChangeNoiseNotCondition) {
  const World w = generate_world(square_spec(0.3), 2);
  const SortieNoise noise{0.05, 0.01};
  const auto a = generate_sortie(w, Condition(0.4), noise, 1);
  const auto b = generate_sortie(w, Condition(0.4), noise, 2);
  EXPECT_NE(a.poses, b.poses);
  EXPECT_EQ(a.condition, b.condition);
  EXPECT_EQ(generate_sortie(w, Condition(0.4), noise, 1).poses, a.poses);
  for (const auto& p : a.poses) {
    EXPECT_GE(p.heading, -std::numbers::pi);
    EXPECT_LT(p.heading, std::numbers::pi);
  }
}

TEST(ProposeLandmarks, CentersNearTheSortieCondition) {
  const World w = generate_world(square_spec(1.0), 4);
  for (double c : {0.1, 0.5, 0.9}) {
    const auto d = generate_sortie(w, Condition(c), {0.05, 0.005}, 11);
    const auto props = propose_landmarks(w, d, {}, TriangulationParams{});
    ASSERT_EQ(props.landmarks.size(), props.kernels.size());
    ASSERT_GT(props.landmarks.size(), 20u);
    std::size_t near = 0;
    for (std::size_t i = 0; i < props.landmarks.size(); ++i) {
      EXPECT_GE(props.landmarks[i].observations.size(), 2u);
      const auto& k = props.kernels[i];
      near += circular_distance(k.center, d.condition) <= 2.0 * k.width;
    }
    EXPECT_GE(static_cast<double>(near), 0.95 * static_cast<double>(props.landmarks.size()));
  }
}

TEST(ProposeLandmarks, SkipsLandmarksAlreadyPresent) {
  const World w = generate_world(square_spec(1.0), 4);
  const auto d = generate_sortie(w, Condition(0.3), {}, 11);
  const auto first = propose_landmarks(w, d, {}, TriangulationParams{});
  std::unordered_set<std::size_t> present;
  for (const auto& nl : first.landmarks) {
    if (auto idx = w.field_index(nl.position)) present.insert(*idx);
  }
  const auto second = propose_landmarks(w, d, present, TriangulationParams{});
  EXPECT_EQ(second.landmarks.size(), second.n_transient);
}

TEST(BuiltinScenarios, CityIsMonotoneAfterSweepStarts) {
  const Scenario s = city_dusk();
  EXPECT_GE(s.schedule.size(), 8u);
  EXPECT_LE(s.schedule.size(), 12u);
  EXPECT_EQ(s.landmark_cap, 3000u);
  std::size_t first_sweep = 0;
  while (s.schedule[first_sweep].phase != "sweep") ++first_sweep;
  for (std::size_t i = first_sweep; i + 1 < s.schedule.size(); ++i)
    EXPECT_LT(s.schedule[i].condition.value, s.schedule[i + 1].condition.value);
}

TEST(BuiltinScenarios, ParkingGapsExceedCityPreDuskGaps) {
  const Scenario city = city_dusk();
  const Scenario park = parking_year();
  EXPECT_GE(park.schedule.size(), 20u);
  EXPECT_EQ(park.landmark_cap, 6000u);
  double city_max = 0.0;
  for (std::size_t i = 0; i + 1 < city.schedule.size() && city.schedule[i + 1].phase == "stable"; ++i)
    city_max = std::max(city_max, circular_distance(city.schedule[i].condition, city.schedule[i + 1].condition));
  double park_mean = 0.0;
  for (std::size_t i = 0; i + 1 < park.schedule.size(); ++i)
    park_mean += circular_distance(park.schedule[i].condition, park.schedule[i + 1].condition);
  park_mean /= static_cast<double>(park.schedule.size() - 1);
  EXPECT_GT(park_mean, city_max);
}

TEST(BuiltinScenarios, SpecJsonRoundTrips) {
  for (const auto& s : builtin_scenarios()) {
    const auto j = scenario_to_json(s);
    EXPECT_EQ(scenario_to_json(scenario_from_json(j)).dump(), j.dump()) << s.name;
  }
}

TEST(BuiltinScenarios, SpecOverridesOnTopOfBase) {
  const nlohmann::json j = {{"name", "short_city"},
                            {"schedule", {{{"label", "a"}, {"condition", 0.3}}, {{"label", "b"}, {"condition", 0.5}}}},
                            {"landmark_cap", "inf"}};
  const Scenario s = scenario_from_json(j, city_dusk());
  EXPECT_EQ(s.name, "short_city");
  EXPECT_EQ(s.schedule.size(), 2u);
  EXPECT_EQ(s.landmark_cap, unbounded_cap);
  EXPECT_EQ(s.world.density, city_dusk().world.density);
  EXPECT_THROW(scenario_from_json({{"schedule", nlohmann::json::array()}}, city_dusk()), Error);
}
