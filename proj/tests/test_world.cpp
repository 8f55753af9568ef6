#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <queue>
#include <random>
#include <set>
#include <sstream>

#include "lovis/errors.hpp"
#include "lovis/world.hpp"

using namespace lovis;

namespace {

House line_house(std::vector<std::pair<double, double>> xy, std::vector<Edge> edges) {
  House h;
  for (std::size_t i = 0; i < xy.size(); ++i) h.viewpoints.push_back({i, xy[i].first, xy[i].second, {i % 40}});
  h.edges = std::move(edges);
  h.noise_sigma = 0.0;
  h.finalize();
  return h;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(GenerateHouse, Deterministic) {
  House a = generate_house(1, 25), b = generate_house(1, 25);
  EXPECT_EQ(house_to_json(a), house_to_json(b));
  EXPECT_NE(house_to_json(a), house_to_json(generate_house(2, 25)));
}

TEST(GenerateHouse, ConnectedWithBoundedEdges) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    House h = generate_house(seed, 4 + seed % 30);
    std::vector<bool> seen(h.size(), false);
    std::queue<std::size_t> q;
    q.push(0);
    seen[0] = true;
    while (!q.empty()) {
      const auto u = q.front();
      q.pop();
      for (const auto& nb : h.neighbors(u)) {
        if (!seen[nb.id]) {
          seen[nb.id] = true;
          q.push(nb.id);
        }
      }
    }
    for (bool s : seen) EXPECT_TRUE(s) << "seed " << seed;
    for (const auto& e : h.edges) {
      const auto& a = h.viewpoints[e.a];
      const auto& b = h.viewpoints[e.b];
      const double len = std::hypot(a.x - b.x, a.y - b.y);
      EXPECT_GE(len, 1.5) << "seed " << seed;
      EXPECT_LE(len, 4.0) << "seed " << seed;
      EXPECT_TRUE(e.elevation_deg == 0 || e.elevation_deg == 30 || e.elevation_deg == -30);
    }
    for (const auto& vp : h.viewpoints) {
      EXPECT_GE(vp.landmarks.size(), 1u);
      EXPECT_LE(vp.landmarks.size(), 3u);
      for (auto l : vp.landmarks) EXPECT_LT(l, kLandmarkWords.size());
    }
  }
}

TEST(LandmarkBasis, Orthonormal) {
  const auto basis = landmark_basis(5, 40, 64);
  for (std::size_t i = 0; i < 40; ++i) {
    for (std::size_t j = 0; j < 40; ++j) EXPECT_NEAR(dot(basis[i], basis[j]), i == j ? 1.0 : 0.0, 1e-12);
  }
}

TEST(RelativePose, StraightAheadAndLeft) {
  House h = line_house({{0, 0}, {2, 0}, {0, 2}}, {{0, 1, 0}, {0, 2, 30}});
  EXPECT_NEAR(relative_pose(h, 0, 1, 0.0).alpha, 0.0, 1e-15);
  EXPECT_NEAR(relative_pose(h, 0, 2, 0.0).alpha, kPi / 2, 1e-15);
  EXPECT_NEAR(relative_pose(h, 0, 2, 0.0).beta, deg2rad(30), 1e-15);
  EXPECT_NEAR(relative_pose(h, 2, 0, 0.0).beta, deg2rad(-30), 1e-15);
  EXPECT_NEAR(relative_pose(h, 0, 1, 0.0).distance, 2.0, 1e-15);
}

TEST(RelativePose, MissingEdgeIsGraphError) {
  House h = line_house({{0, 0}, {2, 0}, {4, 0}}, {{0, 1, 0}, {1, 2, 0}});
  EXPECT_THROW(relative_pose(h, 0, 2, 0.0), GraphError);
}

TEST(RelativePose, MatchesAtan2Oracle) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-kPi, kPi);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    House h = generate_house(seed, 20);
    for (const auto& e : h.edges) {
      const double heading = u(rng);
      const auto& a = h.viewpoints[e.a];
      const auto& b = h.viewpoints[e.b];
      double oracle = std::atan2(b.y - a.y, b.x - a.x) - heading;
      oracle = std::atan2(std::sin(oracle), std::cos(oracle));
      const double alpha = relative_pose(h, e.a, e.b, heading).alpha;
      double diff = std::abs(alpha - oracle);
      diff = std::min(diff, 2 * kPi - diff);
      EXPECT_LT(diff, 1e-12);
      EXPECT_GT(alpha, -kPi);
      EXPECT_LE(alpha, kPi);
    }
  }
}

TEST(OrientationFeature, RepeatStructure) {
  auto f = orientation_feature(0, 0);
  ASSERT_EQ(f.size(), 128u);
  for (std::size_t j = 0; j < 32; ++j) {
    EXPECT_EQ(f[4 * j], 0.0);
    EXPECT_EQ(f[4 * j + 1], 1.0);
    EXPECT_EQ(f[4 * j + 2], 0.0);
    EXPECT_EQ(f[4 * j + 3], 1.0);
  }
  auto g = orientation_feature(kPi / 2, 0);
  for (std::size_t j = 0; j < 32; ++j) {
    EXPECT_NEAR(g[4 * j], 1.0, 1e-15);
    EXPECT_NEAR(g[4 * j + 1], 0.0, 1e-15);
  }
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-4, 4);
  for (int t = 0; t < 100; ++t) {
    auto h = orientation_feature(u(rng), u(rng));
    for (std::size_t j = 1; j < 32; ++j)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(h[4 * j + c], h[c]);
    EXPECT_NEAR(h[0] * h[0] + h[1] * h[1], 1.0, 1e-12);
    EXPECT_NEAR(h[2] * h[2] + h[3] * h[3], 1.0, 1e-12);
  }
}

TEST(Panorama, ThirtySixSectorsAtThirtyDegrees) {
  EXPECT_EQ(kSectors, 36u);
  std::set<std::size_t> seen;
  for (int row = 0; row < 3; ++row) {
    for (int b = 0; b < 12; ++b) {
      const int elev = -30 + 30 * row;
      const std::size_t s = sector_index(deg2rad(30.0 * b), elev);
      EXPECT_EQ(s, static_cast<std::size_t>(row * 12 + b));
      EXPECT_EQ(sector_index(deg2rad(30.0 * b + 14.0), elev), s);
      EXPECT_EQ(sector_index(deg2rad(30.0 * b - 14.0), elev), s);
      seen.insert(s);
    }
  }
  EXPECT_EQ(seen.size(), 36u);
  House h = generate_house(4, 12);
  EXPECT_EQ(panorama(h, 0).sectors.size(), 36u);
}

TEST(Panorama, NeighborsFallInTheirOwnSectorOnly) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    House h = generate_house(seed, 20);
    for (std::size_t vp = 0; vp < h.size(); ++vp) {
      for (const auto& nb : h.neighbors(vp)) {
        std::size_t hits = 0;
        for (std::size_t s = 0; s < kSectors; ++s) {
          if (sector_index(nb.heading, nb.elevation_deg) == s) ++hits;
        }
        EXPECT_EQ(hits, 1u);
        const auto visible = sector_landmarks(h, vp, sector_index(nb.heading, nb.elevation_deg));
        for (auto l : h.viewpoints[nb.id].landmarks) {
          EXPECT_NE(std::find(visible.begin(), visible.end(), l), visible.end());
        }
      }
    }
  }
}

TEST(VisionFeature, EmptySectorIsNoise) {
  House h = generate_house(6, 10);
  h.noise_sigma = 0.1;
  std::size_t checked = 0;
  for (std::size_t vp = 0; vp < h.size(); ++vp) {
    for (std::size_t s = 12; s < kSectors; ++s) {
      if (!sector_landmarks(h, vp, s).empty()) continue;
      const auto v = vision_feature(h, vp, s);
      const double norm = std::sqrt(dot(v, v));
      // ‖noise‖ ≈ σ√d with std ≈ σ/√2
      EXPECT_NEAR(norm, 0.1 * 8.0, 3 * 0.1);
      ++checked;
    }
  }
  EXPECT_GT(checked, 0u);
}

TEST(VisionFeature, NoiselessLandmarkGeometry) {
  // vp 1 has landmark 1; vp 2 has landmark 2; both visible from vp 0 in
  // different sectors.
  House h = line_house({{0, 0}, {2, 0}, {0, 2}}, {{0, 1, 0}, {0, 2, 0}});
  const auto one = vision_feature(h, 0, sector_index(0.0, 0));
  for (std::size_t j = 0; j < one.size(); ++j) EXPECT_NEAR(one[j], h.basis(1)[j], 1e-12);

  // A downward sector with no neighbour holds only the viewpoint's own landmarks.
  House g;
  g.viewpoints = {{0, 0, 0, {4, 9}}, {1, 2, 0, {1}}};
  g.edges = {{0, 1, 0}};
  g.noise_sigma = 0.0;
  g.finalize();
  const auto two = vision_feature(g, 0, sector_index(kPi, -30));
  EXPECT_NEAR(dot(two, two), 1.0, 1e-12);
  EXPECT_NEAR(dot(two, g.basis(4)), std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(dot(two, g.basis(9)), std::sqrt(0.5), 1e-12);
}

TEST(Candidates, StopFirstThenNeighbors) {
  House h = generate_house(8, 15);
  for (std::size_t vp = 0; vp < h.size(); ++vp) {
    const auto c = build_candidates(h, vp, 0.3);
    ASSERT_EQ(c.size(), h.neighbors(vp).size() + 1);
    EXPECT_EQ(c.items[0].viewpoint, vp);
    EXPECT_EQ(c.items[0].alpha, 0.0);
    EXPECT_EQ(c.items[0].beta, 0.0);
    EXPECT_EQ(c.items[0].vision, vision_feature(h, vp, sector_index(0.3, -30)));
    for (std::size_t i = 1; i < c.size(); ++i) {
      EXPECT_EQ(c.items[i].viewpoint, h.neighbors(vp)[i - 1].id);
      EXPECT_EQ(c.items[i].orientation, orientation_feature(c.items[i].alpha, c.items[i].beta));
    }
  }
}

TEST(Instruction, SingleHopTemplate) {
  House h;
  h.viewpoints = {{0, 0, 0, {3}}, {1, 0, 2, {0}}};
  h.edges = {{0, 1, 0}};
  h.finalize();
  const auto tokens = generate_instruction(h, {0, 1}, 5, 0.0);
  EXPECT_EQ(join_tokens(tokens), "turn left and walk to the sofa . stop at the sofa .");
}

TEST(Instruction, DirectionBuckets) {
  EXPECT_EQ(direction_word(0.0, 0.0), "straight");
  EXPECT_EQ(direction_word(deg2rad(29), 0.0), "straight");
  EXPECT_EQ(direction_word(deg2rad(45), 0.0), "left");
  EXPECT_EQ(direction_word(deg2rad(-45), 0.0), "right");
  EXPECT_EQ(direction_word(deg2rad(-45), deg2rad(30)), "up");
  EXPECT_EQ(direction_word(0.0, deg2rad(-30)), "down");
}

TEST(Instruction, VocabularyMembershipAndRoundTrip) {
  const Dataset d = make_dataset(4, 30, 11);
  const Vocabulary vocab = Vocabulary::standard();
  for (const auto* split : {&d.train, &d.val_seen, &d.val_unseen}) {
    for (const Episode& ep : *split) {
      EXPECT_LE(ep.instruction.size(), 60u);
      for (const auto& tok : ep.instruction) EXPECT_NO_THROW(vocab.id(tok)) << tok;
      const auto parsed = parse_instruction(ep.instruction);
      const House& h = d.house(ep.house_id);
      ASSERT_EQ(parsed.hops.size(), ep.path.size() - 1);
      double heading = ep.initial_heading;
      for (std::size_t i = 0; i + 1 < ep.path.size(); ++i) {
        const auto pose = relative_pose(h, ep.path[i], ep.path[i + 1], heading);
        EXPECT_EQ(parsed.hops[i].direction, direction_word(pose.alpha, pose.beta));
        EXPECT_TRUE(vocab.is_direction(vocab.id(parsed.hops[i].direction)));
        const auto lm = vocab.id(parsed.hops[i].landmark);
        EXPECT_TRUE(vocab.is_landmark(lm));
        const auto& target = h.viewpoints[ep.path[i + 1]].landmarks;
        bool found = false;
        for (auto l : target) found = found || vocab.landmark_token(l) == lm;
        EXPECT_TRUE(found);
        heading = h.edge(ep.path[i], ep.path[i + 1])->heading;
      }
    }
  }
}

TEST(Instruction, Deterministic) {
  House h = generate_house(2, 20);
  const auto path = shortest_path(h, 0, 7);
  EXPECT_EQ(generate_instruction(h, path, 99), generate_instruction(h, path, 99));
}

TEST(Vocabulary, DisjointSets) {
  const Vocabulary v = Vocabulary::standard();
  EXPECT_EQ(v.size(), 57u);
  EXPECT_EQ(v.token(Vocabulary::kPad), "[PAD]");
  EXPECT_EQ(v.token(Vocabulary::kMask), "[MASK]");
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_FALSE(v.is_direction(i) && v.is_landmark(i));
  EXPECT_THROW(v.id("spaceship"), DataError);
}

TEST(ShortestPath, TrivialCases) {
  House h = line_house({{0, 0}, {2, 0}, {4, 0}}, {{0, 1, 0}, {1, 2, 0}});
  EXPECT_EQ(shortest_path(h, 1, 1), (std::vector<std::size_t>{1}));
  EXPECT_EQ(shortest_path(h, 0, 2), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_DOUBLE_EQ(path_length(h, {0, 1, 2}), 4.0);
}

TEST(ShortestPath, TieBreaksOnSmallerId) {
  // Square: 0→1→3 and 0→2→3 have equal length.
  House h = line_house({{0, 0}, {2, 0}, {0, 2}, {2, 2}}, {{0, 2, 0}, {0, 1, 0}, {1, 3, 0}, {2, 3, 0}});
  EXPECT_EQ(shortest_path(h, 0, 3), (std::vector<std::size_t>{0, 1, 3}));
}

TEST(ShortestPath, UnreachableIsGraphError) {
  House h = line_house({{0, 0}, {2, 0}, {4, 0}}, {{0, 1, 0}});
  EXPECT_THROW(shortest_path(h, 0, 2), GraphError);
}

TEST(ShortestPath, MatchesBellmanFord) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    House h = generate_house(seed, 25);
    const std::size_t n = h.size();
    for (std::size_t s = 0; s < n; s += 6) {
      std::vector<double> dist(n, 1e300);
      dist[s] = 0;
      for (std::size_t it = 0; it < n; ++it) {
        for (const auto& e : h.edges) {
          const double len = h.edge(e.a, e.b)->length;
          dist[e.b] = std::min(dist[e.b], dist[e.a] + len);
          dist[e.a] = std::min(dist[e.a], dist[e.b] + len);
        }
      }
      for (std::size_t g = 0; g < n; ++g) {
        const auto path = shortest_path(h, s, g);
        EXPECT_EQ(path.front(), s);
        EXPECT_EQ(path.back(), g);
        EXPECT_NEAR(path_length(h, path), dist[g], 1e-9);
      }
    }
  }
}

TEST(Dataset, SplitsAreHouseDisjoint) {
  const Dataset d = make_dataset(13, 50, 7);
  std::set<std::size_t> train_ids(d.train_houses.begin(), d.train_houses.end());
  std::set<std::size_t> unseen_ids(d.unseen_houses.begin(), d.unseen_houses.end());
  EXPECT_EQ(train_ids.size(), 10u);
  EXPECT_EQ(unseen_ids.size(), 3u);
  for (const auto& ep : d.train) EXPECT_TRUE(train_ids.count(ep.house_id));
  for (const auto& ep : d.val_seen) EXPECT_TRUE(train_ids.count(ep.house_id));
  for (const auto& ep : d.val_unseen) {
    EXPECT_TRUE(unseen_ids.count(ep.house_id));
    EXPECT_FALSE(train_ids.count(ep.house_id));
  }
  std::set<std::pair<std::size_t, std::pair<std::size_t, std::size_t>>> train_pairs;
  for (const auto& ep : d.train) train_pairs.insert({ep.house_id, {ep.path.front(), ep.goal}});
  for (const auto& ep : d.val_seen) EXPECT_FALSE(train_pairs.count({ep.house_id, {ep.path.front(), ep.goal}}));
}

TEST(Dataset, R2RPathsAreShortest) {
  const Dataset d = make_dataset(5, 40, 3);
  for (const auto& ep : d.train) {
    const House& h = d.house(ep.house_id);
    EXPECT_EQ(ep.path, shortest_path(h, ep.path.front(), ep.goal));
    EXPECT_GE(ep.path.size() - 1, 4u);
    EXPECT_LE(ep.path.size() - 1, 7u);
    EXPECT_EQ(ep.goal, ep.path.back());
  }
}

TEST(Dataset, R4RMostlyNonShortest) {
  const Dataset d = make_dataset(5, 40, 3, DatasetStyle::kR4R);
  std::size_t non_shortest = 0, total = 0;
  for (const auto* split : {&d.train, &d.val_seen, &d.val_unseen}) {
    for (const auto& ep : *split) {
      const House& h = d.house(ep.house_id);
      if (path_length(h, ep.path) > h.distance(ep.path.front(), ep.goal) + 1e-9) ++non_shortest;
      ++total;
    }
  }
  EXPECT_GT(static_cast<double>(non_shortest) / total, 0.5);
}

TEST(Dataset, RegenerationIsByteIdentical) {
  const auto root = std::filesystem::temp_directory_path() / "lovis_test_world";
  std::filesystem::remove_all(root);
  write_dataset(make_dataset(4, 20, 5), root / "a");
  write_dataset(make_dataset(4, 20, 5), root / "b");
  for (const auto& entry : std::filesystem::recursive_directory_iterator(root / "a")) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), root / "a");
    EXPECT_EQ(slurp(entry.path()), slurp(root / "b" / rel)) << rel;
  }
  const Dataset back = read_dataset(root / "a");
  const Dataset orig = make_dataset(4, 20, 5);
  ASSERT_EQ(back.train.size(), orig.train.size());
  for (std::size_t i = 0; i < back.train.size(); ++i) {
    EXPECT_EQ(back.train[i].path, orig.train[i].path);
    EXPECT_EQ(back.train[i].instruction, orig.train[i].instruction);
  }
  for (std::size_t i = 0; i < back.houses.size(); ++i) {
    EXPECT_EQ(vision_feature(back.houses[i], 0, 3), vision_feature(orig.houses[i], 0, 3));
  }
  std::filesystem::remove_all(root);
}

TEST(Dataset, MalformedEpisodeLineIsDataError) {
  EXPECT_THROW(episode_from_json("{\"house_id\": 1}"), DataError);
  EXPECT_THROW(episode_from_json("not json"), DataError);
}
