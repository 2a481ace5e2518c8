#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "diffuse/graph_core.hpp"
#include "test_util.hpp"

using namespace diffuse;

namespace {

Subgraph whole(const SocialGraph& g) {
  std::vector<NodeId> ids(g.node_count());
  std::iota(ids.begin(), ids.end(), 0);
  return Subgraph::induced(g, ids);
}

std::vector<double> pagerank_dense(const SocialGraph& g, double d) {
  const auto n = static_cast<Eigen::Index>(g.node_count());
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index v = 0; v < n; ++v) {
    const auto deg = g.degree(static_cast<NodeId>(v));
    for (auto w : g.neighbors(static_cast<NodeId>(v))) M(w, v) = 1.0 / static_cast<double>(deg);
  }
  Eigen::MatrixXd A = Eigen::MatrixXd::Identity(n, n) - d * M;
  Eigen::VectorXd b = Eigen::VectorXd::Constant(n, (1.0 - d) / static_cast<double>(n));
  Eigen::VectorXd r = A.partialPivLu().solve(b);
  r /= r.sum();
  return {r.data(), r.data() + n};
}

}  // namespace

TEST(SocialGraph, PathGraphWithIsolatedNode) {
  std::vector<std::pair<NodeId, NodeId>> e{{0, 1}, {1, 2}};
  auto g = SocialGraph::from_edges(4, e);
  EXPECT_EQ(g.node_count(), 4u);
  EXPECT_EQ(g.edge_count(), 2u);
  EXPECT_EQ(g.degree(1), 2u);
  EXPECT_EQ(g.degree(3), 0u);
  EXPECT_TRUE(g.has_edge(2, 1));
  EXPECT_FALSE(g.has_edge(0, 2));
}

TEST(SocialGraph, DropsSelfLoopsAndDuplicates) {
  std::vector<std::pair<NodeId, NodeId>> e{{0, 1}, {1, 0}, {1, 1}, {0, 1}};
  auto g = SocialGraph::from_edges(2, e);
  EXPECT_EQ(g.edge_count(), 1u);
  EXPECT_EQ(g.degree(0), 1u);
}

TEST(SocialGraph, RejectsOutOfRangeEdge) {
  std::vector<std::pair<NodeId, NodeId>> e{{0, 5}};
  EXPECT_THROW(SocialGraph::from_edges(3, e), Error);
  auto g = testutil::path_graph(3);
  EXPECT_THROW(g.neighbors(7), Error);
}

TEST(SocialGraph, AdjacencyIsSymmetric) {
  auto g = testutil::random_graph(40, 0.1, 3);
  for (NodeId u = 0; u < 40; ++u)
    for (auto v : g.neighbors(u)) EXPECT_TRUE(g.has_edge(v, u));
}

TEST(Regions, OneHotByProvince) {
  auto v = region_one_hot(120305);
  EXPECT_EQ(std::count(v.begin(), v.end(), 1.0), 1);
  EXPECT_EQ(v[2], 1.0);
}

TEST(Components, MatchRelaxationOracle) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto s = testutil::random_subgraph(15, 0.12, rng);
    EXPECT_EQ(count_components(s), testutil::count_components_oracle(s));
    std::size_t total = 0;
    for (const auto& c : connected_components(s)) total += c.size();
    EXPECT_EQ(total, s.size());
  }
}

TEST(KCore, TriangleWithTail) {
  std::vector<std::pair<int, int>> e{{0, 1}, {1, 2}, {0, 2}, {2, 3}};
  auto s = Subgraph::from_local_edges(4, e);
  auto core = k_core(s, 2);
  EXPECT_EQ(core.node_ids, (std::vector<NodeId>{0, 1, 2}));
  EXPECT_EQ(k_core(s, 3).size(), 0u);
  EXPECT_EQ(k_core(s, 0).size(), 4u);
  EXPECT_THROW(k_core(s, -1), Error);
}

TEST(KCore, MatchesPeelingOracleAndIsIdempotent) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    auto s = testutil::random_subgraph(20, 0.2, rng);
    for (int k = 0; k <= 4; ++k) {
      auto core = k_core(s, k);
      auto ids = core.node_ids;
      auto expect = testutil::k_core_oracle(s, k);
      std::sort(ids.begin(), ids.end());
      std::sort(expect.begin(), expect.end());
      EXPECT_EQ(ids, expect);
      EXPECT_EQ(k_core(core, k).node_ids, core.node_ids);
      for (int i = 0; i < static_cast<int>(core.size()); ++i) EXPECT_GE(core.local_degree(i), k);
      // larger k never adds nodes
      auto next = k_core(s, k + 1).node_ids;
      for (auto v : next) EXPECT_NE(std::find(ids.begin(), ids.end(), v), ids.end());
    }
  }
}

TEST(Articulation, SmallCases) {
  auto path = Subgraph::from_local_edges(3, std::vector<std::pair<int, int>>{{0, 1}, {1, 2}});
  EXPECT_EQ(articulation_points(path), (std::vector<NodeId>{1}));
  std::vector<std::pair<int, int>> k4;
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) k4.emplace_back(i, j);
  EXPECT_TRUE(articulation_points(Subgraph::from_local_edges(4, k4)).empty());
}

TEST(Articulation, MatchesDeletionOracle) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 60; ++trial) {
    auto s = testutil::random_subgraph(14, 0.18, rng);
    auto got = articulation_points(s);
    std::sort(got.begin(), got.end());
    EXPECT_EQ(got, testutil::articulation_oracle(s));
  }
}

TEST(Articulation, WholeGraphAgreesWithSubgraph) {
  auto g = testutil::random_graph(30, 0.08, 9);
  auto a = articulation_points(g);
  auto b = articulation_points(whole(g));
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
}

TEST(PageRank, CycleIsUniform) {
  std::vector<std::pair<NodeId, NodeId>> e;
  for (int i = 0; i < 6; ++i) e.emplace_back(i, (i + 1) % 6);
  auto r = pagerank(SocialGraph::from_edges(6, e));
  for (double x : r) EXPECT_NEAR(x, 1.0 / 6.0, 1e-12);
}

TEST(PageRank, StarCenterDominates) {
  auto r = pagerank(testutil::star_graph(5));
  for (int i = 1; i <= 5; ++i) EXPECT_GT(r[0], r[i]);
  EXPECT_NEAR(std::accumulate(r.begin(), r.end(), 0.0), 1.0, 1e-12);
}

TEST(PageRank, MatchesLinearSolve) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto g = testutil::random_graph(30, 0.2, seed);
    bool dangling = false;
    for (NodeId v = 0; v < 30; ++v) dangling |= g.degree(v) == 0;
    if (dangling) continue;
    auto r = pagerank(g);
    auto ref = pagerank_dense(g, 0.85);
    for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(r[i], ref[i], 1e-8);
  }
}

TEST(PageRank, RejectsBadOptions) {
  auto g = testutil::path_graph(3);
  EXPECT_THROW(pagerank(g, {1.0, 10, 1e-9}), Error);
  EXPECT_THROW(pagerank(g, {0.85, 0, 1e-9}), Error);
}

TEST(SocialRoles, OneLeaderInHundredNodes) {
  auto g = testutil::random_graph(100, 0.05, 2);
  g.set_pagerank(pagerank(g));
  mark_social_roles(g, 0.01);
  int leaders = 0;
  for (const auto& a : g.all_attributes()) leaders += a.is_opinion_leader;
  EXPECT_EQ(leaders, 1);
}

TEST(SocialRoles, LeadersAreTopScores) {
  auto g = testutil::random_graph(200, 0.03, 4);
  auto pr = pagerank(g);
  g.set_pagerank(pr);
  mark_social_roles(g, 0.05);
  auto sorted = pr;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  for (NodeId v = 0; v < 200; ++v)
    if (g.attributes(v).is_opinion_leader) EXPECT_GE(pr[v], sorted[9]);
    else EXPECT_LE(pr[v], sorted[9]);
}

TEST(SocialRoles, PathInteriorIsCut) {
  auto g = testutil::path_graph(5);
  g.set_pagerank(pagerank(g));
  mark_social_roles(g, 0.2);
  for (NodeId v = 0; v < 5; ++v) EXPECT_EQ(g.attributes(v).is_cut_point, v != 0 && v != 4);
}

TEST(SocialRoles, RequiresPageRank) {
  auto g = testutil::path_graph(3);
  EXPECT_THROW(mark_social_roles(g, 0.1), Error);
  g.set_pagerank(pagerank(g));
  EXPECT_THROW(mark_social_roles(g, 0.0), Error);
}

TEST(Clustering, KnownValues) {
  auto tri = Subgraph::from_local_edges(3, std::vector<std::pair<int, int>>{{0, 1}, {1, 2}, {0, 2}});
  EXPECT_DOUBLE_EQ(local_clustering_coefficient(tri, 0), 1.0);
  auto star = Subgraph::from_local_edges(4, std::vector<std::pair<int, int>>{{0, 1}, {0, 2}, {0, 3}});
  EXPECT_DOUBLE_EQ(local_clustering_coefficient(star, 0), 0.0);
  EXPECT_DOUBLE_EQ(local_clustering_coefficient(star, 1), 0.0);
}

TEST(Clustering, MatchesTriangleCount) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    auto s = testutil::random_subgraph(12, 0.4, rng);
    Eigen::MatrixXd A = s.adjacency.cast<double>();
    Eigen::MatrixXd A3 = A * A * A;
    for (int v = 0; v < 12; ++v) {
      const double d = A.row(v).sum();
      const double expect = d < 2 ? 0.0 : A3(v, v) / (d * (d - 1));
      EXPECT_NEAR(local_clustering_coefficient(s, v), expect, 1e-12);
      EXPECT_GE(local_clustering_coefficient(s, v), 0.0);
      EXPECT_LE(local_clustering_coefficient(s, v), 1.0);
    }
  }
}

TEST(GraphFiles, RoundTrip) {
  auto dir = std::filesystem::temp_directory_path() / "diffuse_graph_rt";
  std::filesystem::create_directories(dir);
  auto g = testutil::random_graph(25, 0.15, 8);
  for (NodeId v = 0; v < 25; ++v) g.set_attributes(v, {1 + v % 2, 20 + v, 110100 + v, {}, 0.0, false, false});
  write_edge_list(g, (dir / "g.edges").string());
  write_attributes_csv(g, (dir / "a.csv").string());
  auto h = load_social_graph((dir / "g.edges").string(), (dir / "a.csv").string());
  EXPECT_EQ(h.edges(), g.edges());
  for (NodeId v = 0; v < 25; ++v) {
    EXPECT_EQ(h.attributes(v).age, g.attributes(v).age);
    EXPECT_EQ(h.attributes(v).region, g.attributes(v).region);
  }
  std::filesystem::remove_all(dir);
}

TEST(GraphFiles, MalformedInputNamesLine) {
  auto path = std::filesystem::temp_directory_path() / "diffuse_bad.edges";
  std::ofstream(path) << "0 1\n# c\n2 x\n";
  try {
    read_edge_list(path.string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos);
  }
  std::filesystem::remove(path);
  EXPECT_THROW(read_edge_list("/nonexistent/file"), Error);
}
