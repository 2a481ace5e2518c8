#pragma once

// Active-rate tables over interaction logs (demographic, dyadic, triadic and
// structural-diversity groupings) and a synthetic cascade generator with
// planted logistic effects.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffuse/ego_sampler.hpp"
#include "diffuse/error.hpp"
#include "diffuse/graph_core.hpp"
#include "diffuse/train_eval.hpp"

namespace diffuse {

struct RateCell {
  std::vector<std::string> key;
  std::int64_t exposures = 0;
  std::int64_t wows = 0;
  std::int64_t clicks = 0;

  double wow_rate() const { return exposures ? static_cast<double>(wows) / static_cast<double>(exposures) : 0.0; }
  double click_rate() const {
    return exposures ? static_cast<double>(clicks) / static_cast<double>(exposures) : 0.0;
  }
  double rate(Behavior b) const { return b == Behavior::wow ? wow_rate() : click_rate(); }
};

/// Cells in first-seen order unless sort_cells() is called.
class ActiveRateTable {
 public:
  ActiveRateTable() = default;
  explicit ActiveRateTable(std::vector<std::string> schema) : schema_(std::move(schema)) {}

  const std::vector<std::string>& schema() const { return schema_; }
  const std::vector<RateCell>& cells() const { return cells_; }
  bool empty() const { return cells_.empty(); }

  void add(const std::vector<std::string>& key, const InteractionRecord& r) {
    add(key, 1, r.is_wow ? 1 : 0, r.is_click ? 1 : 0);
  }
  void add(const std::vector<std::string>& key, std::int64_t exposures, std::int64_t wows, std::int64_t clicks) {
    if (key.size() != schema_.size()) throw Error("rate table: key arity differs from schema");
    auto [it, inserted] = index_.try_emplace(key, cells_.size());
    if (inserted) cells_.push_back({key, 0, 0, 0});
    auto& c = cells_[it->second];
    c.exposures += exposures;
    c.wows += wows;
    c.clicks += clicks;
  }

  const RateCell* find(const std::vector<std::string>& key) const {
    auto it = index_.find(key);
    return it == index_.end() ? nullptr : &cells_[it->second];
  }
  const RateCell& at(const std::vector<std::string>& key) const {
    if (auto* c = find(key)) return *c;
    std::string k;
    for (const auto& s : key) k += (k.empty() ? "" : "|") + s;
    throw Error("rate table: no cell " + k);
  }

  std::int64_t total_exposures() const {
    std::int64_t n = 0;
    for (const auto& c : cells_) n += c.exposures;
    return n;
  }

  void sort_cells() {
    std::sort(cells_.begin(), cells_.end(), [](const RateCell& a, const RateCell& b) { return a.key < b.key; });
    index_.clear();
    for (std::size_t i = 0; i < cells_.size(); ++i) index_[cells_[i].key] = i;
  }

  void write_csv(std::ostream& out) const {
    for (const auto& s : schema_) out << s << ',';
    out << "exposures,wows,clicks,wow_rate,click_rate\n";
    out.precision(10);
    for (const auto& c : cells_) {
      for (const auto& k : c.key) out << k << ',';
      out << c.exposures << ',' << c.wows << ',' << c.clicks << ',' << c.wow_rate() << ',' << c.click_rate() << '\n';
    }
  }
  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    write_csv(out);
  }

 private:
  std::vector<std::string> schema_;
  std::vector<RateCell> cells_;
  std::map<std::vector<std::string>, std::size_t> index_;
};

// --- labels ----------------------------------------------------------------------------

inline std::string gender_label(int g) { return g == 1 ? "M" : g == 2 ? "F" : "U"; }
inline std::string age_decade(int age) { return std::to_string(std::max(0, age) / 10 * 10); }

/// Exclusive distance bucket between two region codes (PPCCDD).
inline std::string distance_bucket(std::int64_t a, std::int64_t b) {
  if (a == b) return "same_district";
  if (a / 100 == b / 100) return "same_city";
  if (a / 10000 == b / 10000) return "same_province";
  return "diff_province";
}

/// near: same city (or district); far: anything else.
inline std::string near_far(std::int64_t a, std::int64_t b) { return a / 100 == b / 100 ? "near" : "far"; }

/// Drops users with fewer than `min_exposures` records.
inline std::vector<InteractionRecord> filter_active_users(std::span<const InteractionRecord> log, int min_exposures) {
  if (min_exposures <= 1) return {log.begin(), log.end()};
  std::unordered_map<NodeId, int> count;
  for (const auto& r : log) ++count[r.user];
  std::vector<InteractionRecord> out;
  for (const auto& r : log)
    if (count[r.user] >= min_exposures) out.push_back(r);
  return out;
}

// --- tables ------------------------------------------------------------------------------

/// schema: any non-empty subset of {"gender", "age"} in the given order.
inline ActiveRateTable rate_by_demographics(std::span<const InteractionRecord> log, const SocialGraph& g,
                                            const std::vector<std::string>& schema) {
  if (schema.empty()) throw Error("rate_by_demographics: empty schema");
  for (const auto& k : schema)
    if (k != "gender" && k != "age") throw Error("rate_by_demographics: unknown key '" + k + "'");
  ActiveRateTable t(schema);
  for (const auto& r : log) {
    const auto& a = g.attributes(r.user);
    std::vector<std::string> key;
    for (const auto& k : schema) key.push_back(k == "gender" ? gender_label(a.gender) : age_decade(a.age));
    t.add(key, r);
  }
  t.sort_cells();
  return t;
}

namespace detail {
inline void require_roles(const SocialGraph& g, const std::string& key) {
  if ((key == "role_OL" || key == "role_SH") && !g.pagerank_computed())
    throw Error("rate table: key '" + key + "' needs computed social roles");
}

inline std::string role_label(const UserAttributes& a, const std::string& key) {
  if (key == "role_OL") return a.is_opinion_leader ? "OL" : "ordinary";
  return a.is_cut_point ? "SH" : "ordinary";
}
}  // namespace detail

/// Exposures with exactly one active friend, grouped by (ego, friend) keys.
/// key: gender | age | distance | role_OL | role_SH.
inline ActiveRateTable rate_dyadic(std::span<const InteractionRecord> log, const SocialGraph& g,
                                   const std::string& key) {
  detail::require_roles(g, key);
  ActiveRateTable t;
  if (key == "distance") t = ActiveRateTable({"distance"});
  else if (key == "gender" || key == "age" || key == "role_OL" || key == "role_SH")
    t = ActiveRateTable({"user_" + key, "friend_" + key});
  else throw Error("rate_dyadic: unknown key '" + key + "'");
  for (const auto& r : log) {
    if (r.active_friends.size() != 1) continue;
    const auto& u = g.attributes(r.user);
    const auto& f = g.attributes(r.active_friends[0].id);
    if (key == "gender") t.add({gender_label(u.gender), gender_label(f.gender)}, r);
    else if (key == "age") t.add({age_decade(u.age), age_decade(f.age)}, r);
    else if (key == "distance") t.add({distance_bucket(u.region_code, f.region_code)}, r);
    else t.add({detail::role_label(u, key), detail::role_label(f, key)}, r);
  }
  t.sort_cells();
  return t;
}

/// Cumulative distance view in the order all, same province, same city,
/// same district, built from the exclusive buckets of rate_dyadic.
inline ActiveRateTable distance_cumulative(const ActiveRateTable& exclusive) {
  if (exclusive.schema() != std::vector<std::string>{"distance"}) throw Error("distance_cumulative: wrong schema");
  const std::vector<std::pair<std::string, std::vector<std::string>>> levels = {
      {"all", {"diff_province", "same_province", "same_city", "same_district"}},
      {"same_province", {"same_province", "same_city", "same_district"}},
      {"same_city", {"same_city", "same_district"}},
      {"same_district", {"same_district"}}};
  ActiveRateTable t({"distance"});
  for (const auto& [name, members] : levels) {
    std::int64_t e = 0, w = 0, c = 0;
    for (const auto& m : members)
      if (auto* cell = exclusive.find({m})) {
        e += cell->exposures;
        w += cell->wows;
        c += cell->clicks;
      }
    t.add({name}, e, w, c);
  }
  return t;
}

/// Exposures with exactly two active friends. key: gender (user, sorted
/// friend pair such as "MF"), age_diff (sorted pair of |age difference|
/// decades) or distance (sorted near/far pair).
inline ActiveRateTable rate_triadic(std::span<const InteractionRecord> log, const SocialGraph& g,
                                    const std::string& key) {
  ActiveRateTable t;
  if (key == "gender") t = ActiveRateTable({"user_gender", "friend_genders"});
  else if (key == "age_diff") t = ActiveRateTable({"age_diff_1", "age_diff_2"});
  else if (key == "distance") t = ActiveRateTable({"distance_1", "distance_2"});
  else throw Error("rate_triadic: unknown key '" + key + "'");
  for (const auto& r : log) {
    if (r.active_friends.size() != 2) continue;
    const auto& u = g.attributes(r.user);
    const auto& f1 = g.attributes(r.active_friends[0].id);
    const auto& f2 = g.attributes(r.active_friends[1].id);
    if (key == "gender") {
      std::string a = gender_label(f1.gender), b = gender_label(f2.gender);
      if (b < a) std::swap(a, b);
      // M before F in the pair label
      std::string pair = a + b;
      if (pair == "FM") pair = "MF";
      t.add({gender_label(u.gender), pair}, r);
    } else {
      std::string a, b;
      if (key == "age_diff") {
        a = age_decade(std::abs(u.age - f1.age));
        b = age_decade(std::abs(u.age - f2.age));
        if (std::stoi(b) < std::stoi(a)) std::swap(a, b);
      } else {
        a = near_far(u.region_code, f1.region_code);
        b = near_far(u.region_code, f2.region_code);
        if (a == "far" && b == "near") std::swap(a, b);
      }
      t.add({a, b}, r);
    }
  }
  t.sort_cells();
  return t;
}

/// Number of connected components among active friends (ego excluded),
/// optionally after reducing to the 1-core.
inline int active_friend_components(const SocialGraph& g, const InteractionRecord& r, int core_k) {
  std::vector<NodeId> ids;
  for (const auto& f : r.active_friends) ids.push_back(f.id);
  auto sub = Subgraph::induced(g, ids);
  if (core_k > 0) sub = k_core(sub, core_k);
  return count_components(sub);
}

/// Cells over (number of active friends in [min_n, max_n], #CC).
inline ActiveRateTable structural_diversity_curves(std::span<const InteractionRecord> log, const SocialGraph& g,
                                                   int core_k, int min_n = 2, int max_n = 7) {
  if (core_k != 0 && core_k != 1) throw Error("structural_diversity_curves: core_k must be 0 or 1");
  ActiveRateTable t({"n_active", "n_cc"});
  for (const auto& r : log) {
    const int n = static_cast<int>(r.active_friends.size());
    if (n < min_n || n > max_n) continue;
    t.add({std::to_string(n), std::to_string(active_friend_components(g, r, core_k))}, r);
  }
  std::vector<RateCell> cells = t.cells();
  std::sort(cells.begin(), cells.end(), [](const RateCell& a, const RateCell& b) {
    return std::pair(std::stoi(a.key[0]), std::stoi(a.key[1])) < std::pair(std::stoi(b.key[0]), std::stoi(b.key[1]));
  });
  ActiveRateTable sorted({"n_active", "n_cc"});
  for (const auto& c : cells) sorted.add(c.key, c.exposures, c.wows, c.clicks);
  return sorted;
}

/// Pearson correlation of average ranks.
inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("spearman: need two equal-length samples of size >= 2");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

/// Spearman correlation between #CC and the rate at a fixed number of
/// active friends, over cells with at least `min_exposures`.
inline double diversity_trend(const ActiveRateTable& curves, int n_active, Behavior b, std::int64_t min_exposures = 30) {
  std::vector<double> cc, rate;
  for (const auto& c : curves.cells())
    if (std::stoi(c.key[0]) == n_active && c.exposures >= min_exposures) {
      cc.push_back(std::stod(c.key[1]));
      rate.push_back(c.rate(b));
    }
  if (cc.size() < 2) throw Error("diversity_trend: fewer than two populated cells at n=" + std::to_string(n_active));
  return spearman(cc, rate);
}

// --- synthetic generator ---------------------------------------------------------------

/// Logistic effect sizes for one behavior. The logit of an exposure with
/// k active friends forming cc components is
///   b0 + active (k - 4.5) + cc (cc - k/2) + same_gender (frac_same - 0.5)
///   + gender_age ([female] - 0.5) (age - 40) / 20 + near_far_mix [near and far friends both present]
///   + friend_age (mean active friend age - 42) / 15
struct Effects {
  double b0 = 0.0;
  double active = 0.0;
  double cc = 0.0;
  double same_gender = 0.0;
  double gender_age = 0.0;
  double near_far_mix = 0.0;
  double friend_age = 0.0;

  nlohmann::json to_json() const {
    return {{"b0", b0}, {"active", active}, {"cc", cc}, {"same_gender", same_gender}, {"gender_age", gender_age},
            {"near_far_mix", near_far_mix}, {"friend_age", friend_age}};
  }
  static Effects from_json(const nlohmann::json& j) {
    Effects e;
    e.b0 = j.value("b0", 0.0);
    e.active = j.value("active", 0.0);
    e.cc = j.value("cc", 0.0);
    e.same_gender = j.value("same_gender", 0.0);
    e.gender_age = j.value("gender_age", 0.0);
    e.near_far_mix = j.value("near_far_mix", 0.0);
    e.friend_age = j.value("friend_age", 0.0);
    return e;
  }
};

struct SynthConfig {
  int node_count = 5000;
  int communities = 50;
  double p_in = 0.12;
  double cross_degree = 4.0;  // expected inter-community edges per node
  int exposures = 40000;
  int min_active = 2;
  int max_active = 7;
  double snowball_prob = 0.5;  // share of exposures whose active friends are picked by snowball
  double snowball_link = 0.85;
  int items = 500;
  double ol_quantile = 0.01;
  Effects wow{-0.2, 0.35, -0.5, 2.0, 1.0, 0.0, -5.0};
  Effects click{-0.6, 0.2, 0.5, 2.0, 0.0, 0.8, 0.0};
  std::uint64_t seed = 7;

  void validate() const {
    if (communities < 1) throw Error("synth: communities must be >= 1");
    if (node_count < 2 * communities) throw Error("synth: need at least two nodes per community");
    if (!(p_in >= 0.0 && p_in <= 1.0)) throw Error("synth: p_in must be in [0,1]");
    if (cross_degree < 0.0) throw Error("synth: cross_degree must be >= 0");
    if (exposures < 0) throw Error("synth: exposures must be >= 0");
    if (min_active < 1 || max_active < min_active) throw Error("synth: bad active friend range");
    if (!(snowball_prob >= 0.0 && snowball_prob <= 1.0)) throw Error("synth: snowball_prob must be in [0,1]");
    if (items < 1) throw Error("synth: items must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"node_count", node_count}, {"communities", communities}, {"p_in", p_in},
            {"cross_degree", cross_degree}, {"exposures", exposures}, {"min_active", min_active},
            {"max_active", max_active}, {"snowball_prob", snowball_prob}, {"snowball_link", snowball_link},
            {"items", items}, {"ol_quantile", ol_quantile}, {"wow", wow.to_json()}, {"click", click.to_json()},
            {"seed", seed}};
  }
  static SynthConfig from_json(const nlohmann::json& j) {
    SynthConfig c;
    c.node_count = j.value("node_count", c.node_count);
    c.communities = j.value("communities", c.communities);
    c.p_in = j.value("p_in", c.p_in);
    c.cross_degree = j.value("cross_degree", c.cross_degree);
    c.exposures = j.value("exposures", c.exposures);
    c.min_active = j.value("min_active", c.min_active);
    c.max_active = j.value("max_active", c.max_active);
    c.snowball_prob = j.value("snowball_prob", c.snowball_prob);
    c.snowball_link = j.value("snowball_link", c.snowball_link);
    c.items = j.value("items", c.items);
    c.ol_quantile = j.value("ol_quantile", c.ol_quantile);
    if (j.contains("wow")) c.wow = Effects::from_json(j.at("wow"));
    if (j.contains("click")) c.click = Effects::from_json(j.at("click"));
    c.seed = j.value("seed", c.seed);
    return c;
  }
};

struct SynthDataset {
  SocialGraph graph;
  std::vector<InteractionRecord> log;
  std::vector<int> community;
};

/// Community c lives in province 11 + c / 5, city c + 1; districts 1..3.
inline SynthDataset generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int n = cfg.node_count;
  SynthDataset ds;
  ds.community.resize(n);
  std::vector<std::vector<NodeId>> members(cfg.communities);
  for (int v = 0; v < n; ++v) {
    const int c = static_cast<int>(static_cast<std::int64_t>(v) * cfg.communities / n);
    ds.community[v] = c;
    members[c].push_back(v);
  }
  std::vector<std::pair<NodeId, NodeId>> edges;
  for (const auto& mem : members)
    for (std::size_t i = 0; i < mem.size(); ++i)
      for (std::size_t j = i + 1; j < mem.size(); ++j)
        if (unit(rng) < cfg.p_in) edges.emplace_back(mem[i], mem[j]);
  if (cfg.communities > 1) {
    const auto cross = static_cast<std::int64_t>(std::llround(cfg.cross_degree * n / 2.0));
    std::uniform_int_distribution<NodeId> pick(0, n - 1);
    for (std::int64_t e = 0; e < cross;) {
      const NodeId a = pick(rng), b = pick(rng);
      if (ds.community[a] == ds.community[b]) continue;
      edges.emplace_back(a, b);
      ++e;
    }
  }
  ds.graph = SocialGraph::from_edges(static_cast<std::size_t>(n), edges);

  std::uniform_int_distribution<int> gender(1, 2), age(15, 69), district(1, 3);
  for (int v = 0; v < n; ++v) {
    UserAttributes a;
    a.gender = gender(rng);
    a.age = age(rng);
    const int c = ds.community[v];
    a.region_code = static_cast<std::int64_t>(11 + c / 5) * 10000 + (c + 1) * 100 + district(rng);
    ds.graph.set_attributes(v, a);
  }
  ds.graph.set_pagerank(pagerank(ds.graph));
  mark_social_roles(ds.graph, cfg.ol_quantile);

  const auto& g = ds.graph;
  std::uniform_int_distribution<NodeId> user(0, n - 1);
  std::uniform_int_distribution<int> k_dist(cfg.min_active, cfg.max_active);
  std::uniform_int_distribution<std::int64_t> item(0, cfg.items - 1), lag(1, 999);
  std::vector<NodeId> chosen, cand;
  auto logit = [&](const Effects& b, const UserAttributes& u, int k, int cc, double same, bool mix, double fage) {
    return b.friend_age * (fage - 42.0) / 15.0 + b.b0 + b.active * (k - 4.5) + b.cc * (cc - k / 2.0) + b.same_gender * (same - 0.5) +
           b.gender_age * ((u.gender == 2 ? 1.0 : 0.0) - 0.5) * ((u.age - 40) / 20.0) + (mix ? b.near_far_mix : 0.0);
  };
  for (int t = 0; t < cfg.exposures; ++t) {
    NodeId u = 0;
    int k = 0;
    for (int tries = 0;; ++tries) {
      if (tries > 100000) throw Error("synth: graph too sparse for the requested active friend counts");
      u = user(rng);
      k = k_dist(rng);
      if (static_cast<int>(g.degree(u)) >= k) break;
    }
    const auto nb = g.neighbors(u);
    chosen.clear();
    if (unit(rng) < cfg.snowball_prob) {
      chosen.push_back(nb[std::uniform_int_distribution<std::size_t>(0, nb.size() - 1)(rng)]);
      while (static_cast<int>(chosen.size()) < k) {
        cand.clear();
        for (NodeId v : nb) {
          if (std::find(chosen.begin(), chosen.end(), v) != chosen.end()) continue;
          for (NodeId c : chosen)
            if (g.has_edge(v, c)) {
              cand.push_back(v);
              break;
            }
        }
        if (cand.empty() || unit(rng) >= cfg.snowball_link) {
          cand.clear();
          for (NodeId v : nb)
            if (std::find(chosen.begin(), chosen.end(), v) == chosen.end()) cand.push_back(v);
        }
        chosen.push_back(cand[std::uniform_int_distribution<std::size_t>(0, cand.size() - 1)(rng)]);
      }
    } else {
      std::vector<NodeId> pool(nb.begin(), nb.end());
      for (int i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> d(static_cast<std::size_t>(i), pool.size() - 1);
        std::swap(pool[i], pool[d(rng)]);
        chosen.push_back(pool[i]);
      }
    }
    const int cc = count_components(Subgraph::induced(g, chosen));
    const auto& ua = g.attributes(u);
    double same = 0.0, fage = 0.0;
    int near = 0;
    for (NodeId v : chosen) {
      fage += g.attributes(v).age;
      same += g.attributes(v).gender == ua.gender ? 1.0 : 0.0;
      near += near_far(ua.region_code, g.attributes(v).region_code) == "near" ? 1 : 0;
    }
    same /= k;
    fage /= k;
    const bool mix = near > 0 && near < k;

    InteractionRecord r;
    r.user = u;
    r.item = item(rng);
    r.ts = 1000 * static_cast<std::int64_t>(t + 1);
    for (NodeId v : chosen) r.active_friends.push_back({v, r.ts - lag(rng)});
    std::stable_sort(r.active_friends.begin(), r.active_friends.end(),
                     [](const ActiveFriend& a, const ActiveFriend& b) { return a.wow_ts < b.wow_ts; });
    r.is_wow = unit(rng) < ad::sigmoid(logit(cfg.wow, ua, k, cc, same, mix, fage));
    r.is_click = unit(rng) < ad::sigmoid(logit(cfg.click, ua, k, cc, same, mix, fage));
    ds.log.push_back(std::move(r));
  }
  return ds;
}

}  // namespace diffuse
