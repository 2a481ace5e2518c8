#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "diffuse/ego_sampler.hpp"
#include "diffuse/feature_builder.hpp"
#include "test_util.hpp"

using namespace diffuse;

namespace {

SocialGraph fixture_graph() {
  auto g = testutil::star_graph(4);
  g.set_attributes(0, {2, 30, 230101, {}, 0, false, false});
  g.set_attributes(1, {1, 45, 110202, {}, 0, false, false});
  g.set_attributes(2, {0, 120, 90303, {}, 0, false, false});
  g.set_attributes(3, {1, 18, 110101, {}, 0, false, false});
  g.set_attributes(4, {2, 60, 500101, {}, 0, false, false});
  g.set_pagerank(pagerank(g));
  mark_social_roles(g, 0.2);
  return g;
}

EmbeddingTable counting_table(std::size_t n, int dim) {
  EmbeddingTable t = EmbeddingTable::zeros(n, dim);
  for (Eigen::Index r = 0; r < t.values.rows(); ++r)
    for (Eigen::Index c = 0; c < dim; ++c) t.values(r, c) = 0.01 * static_cast<double>(r * dim + c);
  t.source = EmbeddingSource::pretrained;
  return t;
}

EgoInstance star_instance(const SocialGraph& g, int m) {
  InteractionRecord r;
  r.user = 0;
  r.ts = 10;
  r.active_friends = {{2, 1}};
  return sample_bfs(g, r, m, 2);
}

FeatureMatrix random_matrix(const FeatureLayout& l, int rows, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  FeatureMatrix x;
  x.layout = l;
  x.values.resize(rows, l.width());
  for (Eigen::Index k = 0; k < x.values.size(); ++k) x.values.data()[k] = n(rng);
  return x;
}

}  // namespace

TEST(FeatureLayout, ContiguousSpans) {
  auto l = full_layout({}, 8);
  EXPECT_TRUE(l.consistent());
  EXPECT_EQ(l.width(), 16 + 8 + 16);
  int off = 0;
  for (const auto& s : l.spans()) {
    EXPECT_EQ(s.offset, off);
    off += s.width;
  }
  EXPECT_EQ(FeatureLayout::from_json(l.to_json()), l);
  EXPECT_THROW(l.at("nope"), Error);
}

TEST(FeatureLayout, AblationsRemoveOneSpanEach) {
  const int e = 8;
  auto full = full_layout({}, e);
  FeatureOptions o;
  o.pretrain = false;
  EXPECT_EQ(full_layout(o, e).width(), full.width() - e);
  o = {};
  o.node_features = false;
  EXPECT_EQ(full_layout(o, e).width(), full.width() - 14);
  o = {};
  o.second_order = false;
  EXPECT_EQ(full_layout(o, e).width(), full.width() - 16);
  EXPECT_EQ(full_layout(o, e).find(kCrossSpan), nullptr);
}

TEST(BuildFirstOrder, PaddingAndEgoRows) {
  auto g = fixture_graph();
  auto table = counting_table(5, 4);
  auto e = star_instance(g, 8);
  auto x = build_first_order(e, g, table);
  EXPECT_EQ(x.values.cols(), 16 + 4);
  for (int i = 5; i < 8; ++i) EXPECT_EQ(x.values.row(i).cwiseAbs().sum(), 0.0);
  EXPECT_EQ(x.span("ego")(0, 0), 1.0);
  EXPECT_EQ(x.span("action")(0, 0), 0.0);
  EXPECT_EQ(x.span("action")(1, 0), 1.0);
}

TEST(BuildFirstOrder, MatchesHandBuiltRow) {
  auto g = fixture_graph();
  auto table = counting_table(5, 3);
  auto e = star_instance(g, 6);
  auto x = build_first_order(e, g, table);
  ASSERT_EQ(e.node_ids[1], 2);
  double prmax = 0;
  for (const auto& a : g.all_attributes()) prmax = std::max(prmax, a.pagerank_score);
  Eigen::RowVectorXd row(19);
  row << 0.0, 1.0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, g.attributes(2).pagerank_score / prmax, 0.0, 0.0, 1.0, 0.06, 0.07,
      0.08;
  EXPECT_LT((x.values.row(1) - row).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(x.span("cut_point")(0, 0), 1.0);
  EXPECT_EQ(x.span("pagerank")(0, 0), 1.0);
  EXPECT_EQ(x.span("gender")(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(x.span("age")(0, 0), 0.3);
}

TEST(BuildFirstOrder, ValuesBoundedAndFinite) {
  auto g = testutil::random_graph(60, 0.1, 3);
  std::mt19937_64 rng(3);
  for (NodeId v = 0; v < 60; ++v)
    g.set_attributes(v, {static_cast<int>(rng() % 3), static_cast<int>(rng() % 100), 110101 + 10000 * (v % 9), {}, 0,
                         false, false});
  g.set_pagerank(pagerank(g));
  mark_social_roles(g, 0.05);
  PretrainOptions po;
  po.dim = 8;
  po.svd_rank = 16;
  auto table = pretrain_embeddings(g, po);
  FeatureBuilder fb(g, &table);
  for (NodeId v = 0; v < 60; ++v) {
    if (g.degree(v) == 0) continue;
    InteractionRecord r;
    r.user = v;
    r.ts = 5;
    r.active_friends = {{g.neighbors(v)[0], 1}};
    auto x = fb.build(sample_bfs(g, r, 12, 2));
    EXPECT_TRUE(x.values.allFinite());
    EXPECT_LE(x.values.cwiseAbs().maxCoeff(), 1.0 + 1e-12);
  }
}

TEST(BuildFirstOrder, MissingNodeNamed) {
  auto g = fixture_graph();
  auto table = counting_table(3, 2);
  auto e = star_instance(g, 6);
  try {
    build_first_order(e, g, table);
    FAIL();
  } catch (const Error& err) {
    EXPECT_NE(std::string(err.what()).find("node"), std::string::npos);
  }
}

TEST(FmSecondOrder, TwoFeaturesGiveProduct) {
  FeatureLayout l;
  l.append("a", 2);
  l.append("b", 3);
  std::mt19937_64 rng(1);
  auto x = random_matrix(l, 4, rng);
  auto proj = FMProjection::random(l, {"a", "b"}, 5, rng);
  Eigen::MatrixXd va = x.span("a") * proj.weights[0];
  Eigen::MatrixXd vb = x.span("b") * proj.weights[1];
  EXPECT_LT((fm_second_order(x, proj) - va.cwiseProduct(vb)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FmSecondOrder, SingleFeatureIsZero) {
  FeatureLayout l;
  l.append("a", 3);
  std::mt19937_64 rng(2);
  auto x = random_matrix(l, 4, rng);
  auto proj = FMProjection::random(l, {"a"}, 4, rng);
  EXPECT_LT(fm_second_order(x, proj).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FmSecondOrder, PairwiseOracleAndPermutation) {
  FeatureLayout l;
  l.append("a", 2);
  l.append("b", 4);
  l.append("c", 1);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_matrix(l, 6, rng);
    auto proj = FMProjection::random(l, {"a", "b", "c"}, 7, rng);
    std::vector<Eigen::MatrixXd> v;
    for (std::size_t i = 0; i < 3; ++i) v.push_back(x.span(proj.spans[i]) * proj.weights[i]);
    Eigen::MatrixXd pair = Eigen::MatrixXd::Zero(6, 7);
    for (int i = 0; i < 3; ++i)
      for (int j = i + 1; j < 3; ++j) pair += v[i].cwiseProduct(v[j]);
    auto out = fm_second_order(x, proj);
    EXPECT_LT((out - pair).cwiseAbs().maxCoeff(), 1e-10);

    FMProjection perm;
    perm.spans = {"c", "a", "b"};
    perm.weights = {proj.weights[2], proj.weights[0], proj.weights[1]};
    EXPECT_LT((fm_second_order(x, perm) - out).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(FmSecondOrder, SpanMismatch) {
  FeatureLayout l;
  l.append("a", 2);
  std::mt19937_64 rng(4);
  auto x = random_matrix(l, 2, rng);
  FMProjection p;
  p.spans = {"z"};
  p.weights = {Eigen::MatrixXd::Ones(2, 3)};
  EXPECT_THROW(fm_second_order(x, p), Error);
  p.spans = {"a"};
  p.weights = {Eigen::MatrixXd::Ones(3, 3)};
  EXPECT_THROW(fm_second_order(x, p), Error);
}

TEST(Pretrain, StarCenterDominatesBase) {
  auto g = testutil::star_graph(6);
  auto base = svd_base_embeddings(g, 1, 7, 3, 1);
  for (int i = 1; i <= 6; ++i) EXPECT_GE(std::abs(base(0, 0)), std::abs(base(i, 0)));
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(7, 7);
  for (int i = 1; i <= 6; ++i) {
    p(0, i) = 1.0 / 6.0;
    p(i, 0) = 1.0;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(p, Eigen::ComputeFullV);
  Eigen::VectorXd ref = svd.matrixV().col(0) * std::sqrt(svd.singularValues()(0));
  for (int i = 0; i < 7; ++i) EXPECT_NEAR(std::abs(base(i, 0)), std::abs(ref(i)), 1e-8);
}

TEST(Pretrain, PropagationMatchesDenseSpectralProduct) {
  auto g = testutil::random_graph(100, 0.05, 12);
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd base(100, 4);
  for (Eigen::Index k = 0; k < base.size(); ++k) base.data()[k] = n(rng);
  PretrainOptions po;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(100, 100);
  for (auto [u, v] : g.edges()) a(u, v) = a(v, u) = 1.0;
  auto lb = build_laplacian(a);
  compute_eigenpairs(lb);
  Eigen::MatrixXd expect = smooth_exact(lb, po.filter, base);
  EXPECT_LT((propagate_embeddings(g, base, po.filter) - expect).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Pretrain, TwinComponentsHaveMatchingGeometry) {
  std::vector<std::pair<NodeId, NodeId>> e{{0, 1}, {1, 2}, {2, 3}, {3, 4}, {1, 4}, {4, 5}, {0, 2}};
  const std::size_t half = e.size();
  for (std::size_t i = 0; i < half; ++i) e.emplace_back(e[i].first + 6, e[i].second + 6);
  auto g = SocialGraph::from_edges(12, e);
  PretrainOptions po;
  po.dim = 12;
  po.svd_rank = 12;
  auto t = pretrain_embeddings(g, po);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) {
      const double d1 = (t.values.row(i) - t.values.row(j)).norm();
      const double d2 = (t.values.row(i + 6) - t.values.row(j + 6)).norm();
      EXPECT_NEAR(d1, d2, 1e-8);
    }
}

TEST(Pretrain, DeterministicAndValidated) {
  auto g = testutil::random_graph(50, 0.1, 2);
  PretrainOptions po;
  po.dim = 6;
  po.svd_rank = 12;
  auto a = pretrain_embeddings(g, po);
  auto b = pretrain_embeddings(g, po);
  EXPECT_EQ(a.values, b.values);
  EXPECT_TRUE(a.values.allFinite());
  po.svd_rank = 80;
  EXPECT_THROW(pretrain_embeddings(g, po), Error);
  EXPECT_THROW(pretrain_embeddings(SocialGraph::from_edges(5, {}), PretrainOptions{2, 3}), Error);
}

TEST(EmbeddingFiles, RoundTripAsFloat) {
  auto t = counting_table(7, 3);
  auto path = std::filesystem::temp_directory_path() / "diffuse_emb.bin";
  write_embeddings(t, path.string());
  auto r = read_embeddings(path.string());
  EXPECT_EQ(r.values.rows(), 7);
  EXPECT_LT((r.values - t.values).cwiseAbs().maxCoeff(), 1e-6);
  auto lp = std::filesystem::temp_directory_path() / "diffuse_layout.json";
  write_layout_manifest(full_layout({}, 3), lp.string());
  EXPECT_EQ(read_layout_manifest(lp.string()), full_layout({}, 3));
  std::filesystem::remove(path);
  std::filesystem::remove(lp);
}
