#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "diffuse/analytics.hpp"

using namespace diffuse;

namespace {

SocialGraph tiny_graph() {
  // 0 is the ego; friends 1..4. 1-2 adjacent.
  const std::vector<std::pair<int, int>> e{{0, 1}, {0, 2}, {0, 3}, {0, 4}, {1, 2}};
  auto g = SocialGraph::from_edges(5, e);
  g.set_attributes(0, {1, 34, 110101});
  g.set_attributes(1, {1, 36, 110101});  // same district
  g.set_attributes(2, {2, 52, 110102});  // same city
  g.set_attributes(3, {2, 19, 110203});  // same province
  g.set_attributes(4, {1, 61, 120101});  // other province
  g.set_pagerank(pagerank(g));
  mark_social_roles(g, 0.01);
  return g;
}

InteractionRecord rec(NodeId u, std::vector<NodeId> friends, bool wow, bool click = false, std::int64_t ts = 10) {
  InteractionRecord r;
  r.user = u;
  r.ts = ts;
  for (std::size_t i = 0; i < friends.size(); ++i) r.active_friends.push_back({friends[i], static_cast<std::int64_t>(i)});
  r.is_wow = wow;
  r.is_click = click;
  return r;
}

SynthConfig quiet(int n, int exposures, std::uint64_t seed) {
  SynthConfig c;
  c.node_count = n;
  c.communities = n / 100;
  c.exposures = exposures;
  c.seed = seed;
  c.wow = {};
  c.click = {};
  return c;
}

}  // namespace

TEST(RateTable, AllWowGivesRateOne) {
  const auto g = tiny_graph();
  std::vector<InteractionRecord> log{rec(0, {1}, true), rec(0, {2}, true), rec(0, {3, 4}, true)};
  const auto t = rate_by_demographics(log, g, {"gender"});
  ASSERT_EQ(t.cells().size(), 1u);
  EXPECT_DOUBLE_EQ(t.at({"M"}).wow_rate(), 1.0);
  EXPECT_EQ(t.at({"M"}).exposures, 3);
}

TEST(RateTable, OneOfThree) {
  const auto g = tiny_graph();
  std::vector<InteractionRecord> log{rec(0, {1}, true, true), rec(0, {1}, false), rec(0, {1}, false)};
  const auto t = rate_dyadic(log, g, "gender");
  EXPECT_NEAR(t.at({"M", "M"}).wow_rate(), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(t.at({"M", "M"}).click_rate(), 1.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(t.at({"M", "M"}).rate(Behavior::click), t.at({"M", "M"}).click_rate());
}

TEST(RateTable, KeyArityAndMissingCell) {
  ActiveRateTable t({"a", "b"});
  EXPECT_THROW(t.add({"x"}, 1, 0, 0), Error);
  t.add({"x", "y"}, 4, 1, 2);
  EXPECT_EQ(t.total_exposures(), 4);
  EXPECT_EQ(t.find({"y", "x"}), nullptr);
  EXPECT_THROW(t.at({"y", "x"}), Error);
  EXPECT_EQ(RateCell{}.wow_rate(), 0.0);
}

TEST(RateTable, CsvHeaderAndRows) {
  ActiveRateTable t({"gender"});
  t.add({"M"}, 4, 1, 2);
  std::ostringstream out;
  t.write_csv(out);
  std::istringstream in(out.str());
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header.substr(0, 7), "gender,");
  EXPECT_NE(header.find("exposures"), std::string::npos);
  EXPECT_EQ(row.substr(0, 4), "M,4,");
}

TEST(Demographics, KeysAndSorting) {
  const auto g = tiny_graph();
  std::vector<InteractionRecord> log{rec(2, {0}, true), rec(0, {1}, false), rec(3, {0}, false)};
  const auto t = rate_by_demographics(log, g, {"gender", "age"});
  ASSERT_EQ(t.cells().size(), 3u);
  EXPECT_EQ(t.cells()[0].key, (std::vector<std::string>{"F", "10"}));
  EXPECT_EQ(t.cells()[1].key, (std::vector<std::string>{"F", "50"}));
  EXPECT_EQ(t.cells()[2].key, (std::vector<std::string>{"M", "30"}));
  EXPECT_THROW(rate_by_demographics(log, g, {}), Error);
  EXPECT_THROW(rate_by_demographics(log, g, {"region"}), Error);
}

TEST(Dyadic, SkipsOtherArities) {
  const auto g = tiny_graph();
  std::vector<InteractionRecord> log{rec(0, {1, 2}, true), rec(0, {1, 2, 3}, true)};
  for (const std::string key : {"gender", "age", "distance", "role_OL", "role_SH"})
    EXPECT_TRUE(rate_dyadic(log, g, key).empty()) << key;
  EXPECT_THROW(rate_dyadic(log, g, "height"), Error);
}

TEST(Dyadic, RoleKeysNeedPagerank) {
  const std::vector<std::pair<int, int>> e{{0, 1}};
  auto g = SocialGraph::from_edges(2, e);
  std::vector<InteractionRecord> log{rec(0, {1}, true)};
  EXPECT_THROW(rate_dyadic(log, g, "role_OL"), Error);
  EXPECT_NO_THROW(rate_dyadic(log, g, "gender"));
}

TEST(Distance, ExclusiveBucketsAndCumulativeOrder) {
  const auto g = tiny_graph();
  std::vector<InteractionRecord> log{rec(0, {1}, true), rec(0, {2}, false), rec(0, {3}, true), rec(0, {4}, false),
                                     rec(0, {4}, false)};
  const auto ex = rate_dyadic(log, g, "distance");
  EXPECT_EQ(ex.at({"same_district"}).exposures, 1);
  EXPECT_EQ(ex.at({"same_city"}).exposures, 1);
  EXPECT_EQ(ex.at({"same_province"}).exposures, 1);
  EXPECT_EQ(ex.at({"diff_province"}).exposures, 2);
  EXPECT_EQ(ex.total_exposures(), 5);

  const auto cum = distance_cumulative(ex);
  ASSERT_EQ(cum.cells().size(), 4u);
  const std::vector<std::string> order{"all", "same_province", "same_city", "same_district"};
  const std::vector<std::int64_t> expo{5, 3, 2, 1};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(cum.cells()[i].key[0], order[i]);
    EXPECT_EQ(cum.cells()[i].exposures, expo[i]);
  }
  EXPECT_EQ(cum.at({"all"}).wows, 2);
  EXPECT_THROW(distance_cumulative(ActiveRateTable({"x"})), Error);
}

TEST(Triadic, PairLabels) {
  const auto g = tiny_graph();
  std::vector<InteractionRecord> log{rec(0, {2, 1}, true), rec(0, {3, 2}, false), rec(0, {4, 1}, true),
                                     rec(0, {4, 3}, false), rec(0, {1}, true)};
  const auto gt = rate_triadic(log, g, "gender");
  EXPECT_EQ(gt.at({"M", "MF"}).exposures, 2);
  EXPECT_EQ(gt.at({"M", "FF"}).exposures, 1);
  EXPECT_EQ(gt.at({"M", "MM"}).exposures, 1);
  EXPECT_EQ(gt.total_exposures(), 4);

  const auto dt = rate_triadic(log, g, "distance");
  EXPECT_EQ(dt.at({"near", "near"}).exposures, 1);
  EXPECT_EQ(dt.at({"near", "far"}).exposures, 2);
  EXPECT_EQ(dt.at({"far", "far"}).exposures, 1);
  EXPECT_EQ(dt.find({"far", "near"}), nullptr);
  const auto at = rate_triadic(log, g, "age_diff");
  EXPECT_EQ(at.total_exposures(), 4);
  for (const auto& c : at.cells()) EXPECT_LE(std::stoi(c.key[0]), std::stoi(c.key[1]));
  EXPECT_THROW(rate_triadic(log, g, "role_OL"), Error);
}

TEST(Diversity, CliqueAndIndependentSet) {
  const auto g = tiny_graph();
  EXPECT_EQ(active_friend_components(g, rec(0, {1, 2}, true), 0), 1);
  EXPECT_EQ(active_friend_components(g, rec(0, {1, 3, 4}, true), 0), 3);
  EXPECT_EQ(active_friend_components(g, rec(0, {1, 2, 3}, true), 0), 2);
  // 1-core drops isolated active friends
  EXPECT_EQ(active_friend_components(g, rec(0, {1, 2, 3}, true), 1), 1);
  EXPECT_EQ(active_friend_components(g, rec(0, {3, 4}, true), 1), 0);
}

TEST(Diversity, CurvesAgreeWithComponentCount) {
  auto c = quiet(1000, 3000, 5);
  c.wow.b0 = 0.3;
  const auto ds = generate_synthetic(c);
  const auto curves = structural_diversity_curves(ds.log, ds.graph, 0);
  EXPECT_EQ(curves.schema(), (std::vector<std::string>{"n_active", "n_cc"}));
  std::map<std::pair<int, int>, std::int64_t> expect;
  for (const auto& r : ds.log)
    if (r.active_friends.size() >= 2 && r.active_friends.size() <= 7)
      ++expect[{static_cast<int>(r.active_friends.size()), active_friend_components(ds.graph, r, 0)}];
  std::int64_t total = 0;
  for (const auto& [k, n] : expect) {
    EXPECT_EQ(curves.at({std::to_string(k.first), std::to_string(k.second)}).exposures, n);
    EXPECT_LE(k.second, k.first);
    total += n;
  }
  EXPECT_EQ(curves.total_exposures(), total);
  for (std::size_t i = 1; i < curves.cells().size(); ++i) {
    const auto& a = curves.cells()[i - 1].key;
    const auto& b = curves.cells()[i].key;
    EXPECT_LT(std::pair(std::stoi(a[0]), std::stoi(a[1])), std::pair(std::stoi(b[0]), std::stoi(b[1])));
  }
  EXPECT_THROW(structural_diversity_curves(ds.log, ds.graph, 2), Error);
}

TEST(Spearman, KnownValues) {
  const std::vector<double> x{1, 2, 3, 4, 5};
  EXPECT_NEAR(spearman(x, std::vector<double>{2, 4, 6, 8, 10}), 1.0, 1e-15);
  EXPECT_NEAR(spearman(x, std::vector<double>{5, 3, 1, -1, -9}), -1.0, 1e-15);
  EXPECT_NEAR(spearman(x, std::vector<double>{1, 4, 9, 16, 25}), 1.0, 1e-15);
  // 1 - 6*sum(d^2)/(n(n^2-1)) with d = (0,0,1,-1,0)
  EXPECT_NEAR(spearman(x, std::vector<double>{1, 2, 4, 3, 5}), 0.9, 1e-12);
  EXPECT_THROW(spearman(std::vector<double>{1}, std::vector<double>{1}), Error);
  EXPECT_THROW(spearman(x, std::vector<double>{1, 2}), Error);
}

TEST(Filter, ActiveUsers) {
  std::vector<InteractionRecord> log{rec(0, {1}, true), rec(0, {2}, false), rec(3, {0}, true)};
  EXPECT_EQ(filter_active_users(log, 2).size(), 2u);
  EXPECT_EQ(filter_active_users(log, 1).size(), 3u);
  EXPECT_TRUE(filter_active_users(log, 3).empty());
}

// --- generator -------------------------------------------------------------------------

TEST(Synth, ConstantModelMatchesBaseRate) {
  auto c = quiet(1000, 20000, 3);
  c.wow.b0 = 0.4;
  c.click.b0 = -1.0;
  const auto ds = generate_synthetic(c);
  double w = 0, k = 0;
  for (const auto& r : ds.log) {
    w += r.is_wow;
    k += r.is_click;
  }
  const double n = static_cast<double>(ds.log.size());
  for (auto [emp, p] : {std::pair{w / n, ad::sigmoid(0.4)}, std::pair{k / n, ad::sigmoid(-1.0)}})
    EXPECT_NEAR(emp, p, 3.0 * std::sqrt(p * (1 - p) / n));
}

TEST(Synth, DeterministicAndWellFormed) {
  auto c = quiet(600, 2000, 11);
  c.wow.b0 = 0.1;
  const auto a = generate_synthetic(c), b = generate_synthetic(c);
  ASSERT_EQ(a.log.size(), b.log.size());
  EXPECT_EQ(a.graph.edge_count(), b.graph.edge_count());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].user, b.log[i].user);
    EXPECT_EQ(a.log[i].is_wow, b.log[i].is_wow);
    EXPECT_GE(a.log[i].active_friends.size(), static_cast<std::size_t>(c.min_active));
    EXPECT_LE(a.log[i].active_friends.size(), static_cast<std::size_t>(c.max_active));
    EXPECT_NO_THROW(validate_record(a.graph, a.log[i]));
    if (i) EXPECT_LT(a.log[i - 1].ts, a.log[i].ts);
  }
  c.seed = 12;
  const auto d = generate_synthetic(c);
  EXPECT_NE(a.graph.edge_count(), d.graph.edge_count());
}

TEST(Synth, ConfigValidation) {
  SynthConfig c;
  c.communities = 0;
  EXPECT_THROW(generate_synthetic(c), Error);
  c = {};
  c.min_active = 3;
  c.max_active = 2;
  EXPECT_THROW(generate_synthetic(c), Error);
  c = {};
  c.p_in = 1.5;
  EXPECT_THROW(generate_synthetic(c), Error);
  c = {};
  const auto j = c.to_json();
  const auto r = SynthConfig::from_json(j);
  EXPECT_EQ(r.to_json(), j);
}

TEST(Synth, DyadicHomophilyIsRecovered) {
  auto c = quiet(2000, 20000, 21);
  c.min_active = c.max_active = 1;
  c.click.same_gender = 2.0;
  const auto ds = generate_synthetic(c);
  const auto t = rate_dyadic(ds.log, ds.graph, "gender");
  auto rate = [&](std::initializer_list<std::vector<std::string>> keys) {
    std::int64_t e = 0, k = 0;
    for (const auto& key : keys) {
      e += t.at(key).exposures;
      k += t.at(key).clicks;
    }
    return static_cast<double>(k) / static_cast<double>(e);
  };
  EXPECT_GT(rate({{"M", "M"}, {"F", "F"}}), rate({{"M", "F"}, {"F", "M"}}) + 0.2);
}

TEST(Synth, TriadicMixedDistanceIsRecovered) {
  auto c = quiet(3000, 30000, 23);
  c.min_active = c.max_active = 2;
  c.click.near_far_mix = 1.5;
  const auto ds = generate_synthetic(c);
  const auto t = rate_triadic(ds.log, ds.graph, "distance");
  const double mixed = t.at({"near", "far"}).click_rate();
  EXPECT_GT(mixed, t.at({"near", "near"}).click_rate() + 0.15);
  EXPECT_GT(mixed, t.at({"far", "far"}).click_rate() + 0.15);
}

TEST(Synth, DiversityTrendFollowsComponentEffectSign) {
  auto c = quiet(3000, 30000, 29);
  c.wow.cc = -0.6;
  c.click.cc = 0.6;
  const auto ds = generate_synthetic(c);
  const auto curves = structural_diversity_curves(ds.log, ds.graph, 0);
  EXPECT_LT(diversity_trend(curves, 5, Behavior::wow), -0.8);
  EXPECT_GT(diversity_trend(curves, 5, Behavior::click), 0.8);
  EXPECT_THROW(diversity_trend(curves, 50, Behavior::wow), Error);
}
