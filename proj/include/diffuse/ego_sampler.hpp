#pragma once

// Turns (user, item, timestamp) exposures into fixed-size ego-network
// instances, plus the interaction-log and instance-cache file formats.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <deque>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffuse/error.hpp"
#include "diffuse/graph_core.hpp"

namespace diffuse {

enum class Behavior { wow, click };

inline const char* to_string(Behavior b) { return b == Behavior::wow ? "wow" : "click"; }
inline Behavior behavior_from_string(const std::string& s) {
  if (s == "wow") return Behavior::wow;
  if (s == "click") return Behavior::click;
  throw Error("unknown behavior '" + s + "' (expected wow|click)");
}

struct ActiveFriend {
  NodeId id = 0;
  std::int64_t wow_ts = 0;
  bool operator==(const ActiveFriend&) const = default;
};

struct InteractionRecord {
  NodeId user = 0;
  std::int64_t item = 0;
  std::int64_t ts = 0;
  bool is_wow = false;
  bool is_click = false;
  std::vector<ActiveFriend> active_friends;  // ascending by wow_ts, all < ts

  bool label(Behavior b) const { return b == Behavior::wow ? is_wow : is_click; }
  bool operator==(const InteractionRecord&) const = default;
};

/// Checks the record against the graph: user exists, friends are neighbors
/// with timestamps strictly before ts in ascending order.
inline void validate_record(const SocialGraph& g, const InteractionRecord& rec) {
  if (!g.contains(rec.user)) throw Error("record user " + std::to_string(rec.user) + " not in graph");
  std::int64_t prev = std::numeric_limits<std::int64_t>::min();
  for (const auto& f : rec.active_friends) {
    if (!g.contains(f.id) || !g.has_edge(rec.user, f.id))
      throw Error("active friend " + std::to_string(f.id) + " is not a neighbor of user " +
                  std::to_string(rec.user));
    if (f.wow_ts >= rec.ts) throw Error("active friend timestamp not before exposure");
    if (f.wow_ts < prev) throw Error("active friends not sorted by wow timestamp");
    prev = f.wow_ts;
  }
}

/// Fixed-size sampled ego network. Slot 0 holds the ego; padded slots carry
/// kPaddingId with zero adjacency and all flags false.
struct EgoInstance {
  std::vector<NodeId> node_ids;
  DenseAdjacency adjacency;
  std::vector<std::uint8_t> mask;
  std::vector<std::uint8_t> active_flags;
  std::vector<std::uint8_t> ego_flags;
  int label = 0;

  int size() const { return static_cast<int>(node_ids.size()); }
  int real_count() const {
    return static_cast<int>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }

  /// Builds an instance from the real nodes (ego first) and pads to m.
  static EgoInstance make(const SocialGraph& g, std::span<const NodeId> real_nodes,
                          const std::unordered_set<NodeId>& active, int m, int label) {
    if (real_nodes.empty() || static_cast<int>(real_nodes.size()) > m)
      throw Error("ego instance needs between 1 and m real nodes");
    EgoInstance e;
    e.node_ids.assign(m, kPaddingId);
    std::copy(real_nodes.begin(), real_nodes.end(), e.node_ids.begin());
    e.adjacency = DenseAdjacency::Zero(m, m);
    const int r = static_cast<int>(real_nodes.size());
    for (int i = 0; i < r; ++i)
      for (int j = i + 1; j < r; ++j)
        if (g.has_edge(real_nodes[i], real_nodes[j])) e.adjacency(i, j) = e.adjacency(j, i) = 1;
    e.mask.assign(m, 0);
    e.active_flags.assign(m, 0);
    e.ego_flags.assign(m, 0);
    for (int i = 0; i < r; ++i) {
      e.mask[i] = 1;
      if (i > 0 && active.contains(real_nodes[i])) e.active_flags[i] = 1;
    }
    e.ego_flags[0] = 1;
    e.label = label ? 1 : 0;
    e.validate();
    return e;
  }

  void validate() const {
    const int m = size();
    if (m < 1 || adjacency.rows() != m || adjacency.cols() != m ||
        static_cast<int>(mask.size()) != m || static_cast<int>(active_flags.size()) != m ||
        static_cast<int>(ego_flags.size()) != m)
      throw Error("ego instance: inconsistent sizes");
    if (std::count(ego_flags.begin(), ego_flags.end(), std::uint8_t{1}) != 1 || !ego_flags[0])
      throw Error("ego instance: exactly one ego flag at slot 0 required");
    if (active_flags[0]) throw Error("ego instance: ego cannot be active");
    if (!mask[0]) throw Error("ego instance: ego slot must be real");
    for (int i = 0; i < m; ++i) {
      if (adjacency(i, i) != 0) throw Error("ego instance: nonzero diagonal");
      for (int j = 0; j < m; ++j) {
        if (adjacency(i, j) != adjacency(j, i)) throw Error("ego instance: asymmetric adjacency");
        if (adjacency(i, j) && (!mask[i] || !mask[j])) throw Error("ego instance: padded slot has edges");
      }
      if (!mask[i] && (active_flags[i] || ego_flags[i] || node_ids[i] != kPaddingId))
        throw Error("ego instance: padded slot carries data");
    }
    if (label != 0 && label != 1) throw Error("ego instance: label must be 0/1");
  }

  bool operator==(const EgoInstance&) const = default;
};

namespace detail {

inline std::vector<NodeId> seed_nodes(const SocialGraph& g, const InteractionRecord& rec, int m,
                                      std::unordered_set<NodeId>* active) {
  if (m < 2) throw Error("sampler: m must be >= 2");
  if (!g.contains(rec.user)) throw Error("sampler: user " + std::to_string(rec.user) + " not in graph");
  if (rec.active_friends.empty()) throw Error("sampler: record has no active friends");
  auto friends = rec.active_friends;
  std::stable_sort(friends.begin(), friends.end(),
                   [](const ActiveFriend& a, const ActiveFriend& b) { return a.wow_ts < b.wow_ts; });
  std::vector<NodeId> seeds{rec.user};
  for (const auto& f : friends) {
    if (f.id == rec.user) continue;
    if (!g.contains(f.id)) throw Error("sampler: active friend " + std::to_string(f.id) + " not in graph");
    active->insert(f.id);
    if (static_cast<int>(seeds.size()) < m &&
        std::find(seeds.begin(), seeds.end(), f.id) == seeds.end())
      seeds.push_back(f.id);
  }
  return seeds;
}

}  // namespace detail

/// BFS sampling: ego, then active friends by wow time, then breadth-first
/// expansion (ascending id among siblings) restricted to the tau-ego network.
inline EgoInstance sample_bfs(const SocialGraph& g, const InteractionRecord& rec, int m, int tau,
                              Behavior behavior = Behavior::wow) {
  if (tau < 1) throw Error("sample_bfs: tau must be >= 1");
  std::unordered_set<NodeId> active;
  auto selected = detail::seed_nodes(g, rec, m, &active);

  // hop distance from the ego, bounded by tau
  std::unordered_map<NodeId, int> dist{{rec.user, 0}};
  std::vector<NodeId> frontier{rec.user};
  for (int d = 1; d <= tau && !frontier.empty(); ++d) {
    std::vector<NodeId> next;
    for (auto v : frontier)
      for (auto w : g.neighbors(v))
        if (dist.emplace(w, d).second) next.push_back(w);
    frontier.swap(next);
  }

  std::unordered_set<NodeId> in_set(selected.begin(), selected.end());
  std::deque<NodeId> queue(selected.begin(), selected.end());
  while (!queue.empty() && static_cast<int>(selected.size()) < m) {
    const NodeId v = queue.front();
    queue.pop_front();
    for (auto w : g.neighbors(v)) {
      if (static_cast<int>(selected.size()) >= m) break;
      if (!dist.contains(w) || in_set.contains(w)) continue;
      in_set.insert(w);
      selected.push_back(w);
      queue.push_back(w);
    }
  }
  return EgoInstance::make(g, selected, active, m, rec.label(behavior));
}

/// Random walk with restart. The ego and active friends are visited first;
/// the walk restarts at a uniformly chosen seed with probability restart_prob
/// and otherwise moves to a uniform neighbor. Deterministic given seed.
inline EgoInstance sample_rwr(const SocialGraph& g, const InteractionRecord& rec, int m,
                              double restart_prob, std::uint64_t seed,
                              Behavior behavior = Behavior::wow, int max_steps_per_node = 1000) {
  if (!(restart_prob > 0.0 && restart_prob <= 1.0)) throw Error("sample_rwr: restart_prob must be in (0,1]");
  std::unordered_set<NodeId> active;
  auto seeds = detail::seed_nodes(g, rec, m, &active);
  auto selected = seeds;
  std::unordered_set<NodeId> in_set(selected.begin(), selected.end());

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  NodeId cur = rec.user;
  const long max_steps = static_cast<long>(max_steps_per_node) * m;
  for (long step = 0; step < max_steps && static_cast<int>(selected.size()) < m; ++step) {
    auto nb = g.neighbors(cur);
    if (coin(rng) < restart_prob || nb.empty()) {
      cur = seeds[std::uniform_int_distribution<std::size_t>(0, seeds.size() - 1)(rng)];
    } else {
      cur = nb[std::uniform_int_distribution<std::size_t>(0, nb.size() - 1)(rng)];
    }
    if (in_set.insert(cur).second) selected.push_back(cur);
  }
  return EgoInstance::make(g, selected, active, m, rec.label(behavior));
}

/// Keeps records with at least `min_active` active friends, order preserved.
inline std::vector<InteractionRecord> filter_interactions(std::span<const InteractionRecord> log,
                                                          std::size_t min_active) {
  std::vector<InteractionRecord> out;
  for (const auto& r : log)
    if (r.active_friends.size() >= min_active) out.push_back(r);
  return out;
}

template <class T>
struct Splits {
  std::vector<T> train, val, test;
};

/// Chronological split: stable sort by ts, floor on the boundaries, the
/// remainder goes to test.
inline Splits<InteractionRecord> time_split(std::vector<InteractionRecord> log, double train_frac,
                                            double val_frac) {
  if (log.empty()) throw Error("time_split: empty log");
  if (!(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0))
    throw Error("time_split: fractions must be positive with sum < 1");
  std::stable_sort(log.begin(), log.end(),
                   [](const InteractionRecord& a, const InteractionRecord& b) { return a.ts < b.ts; });
  const auto n = log.size();
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * train_frac));
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * val_frac));
  if (n_train + n_val >= n) throw Error("time_split: test split would be empty");
  Splits<InteractionRecord> s;
  s.train.assign(log.begin(), log.begin() + n_train);
  s.val.assign(log.begin() + n_train, log.begin() + n_train + n_val);
  s.test.assign(log.begin() + n_train + n_val, log.end());
  return s;
}

// --- interaction log (JSON lines) ------------------------------------------

inline nlohmann::json record_to_json(const InteractionRecord& r) {
  nlohmann::json active = nlohmann::json::array();
  for (const auto& f : r.active_friends) active.push_back({f.id, f.wow_ts});
  return {{"user", r.user}, {"item", r.item},        {"ts", r.ts},
          {"is_wow", r.is_wow}, {"is_click", r.is_click}, {"active", active}};
}

inline InteractionRecord record_from_json(const nlohmann::json& j) {
  InteractionRecord r;
  r.user = j.at("user").get<NodeId>();
  r.item = j.at("item").get<std::int64_t>();
  r.ts = j.at("ts").get<std::int64_t>();
  r.is_wow = j.at("is_wow").get<bool>();
  r.is_click = j.at("is_click").get<bool>();
  for (const auto& a : j.at("active")) {
    if (!a.is_array() || a.size() != 2) throw Error("active entry must be [friend_id, wow_ts]");
    r.active_friends.push_back({a[0].get<NodeId>(), a[1].get<std::int64_t>()});
  }
  return r;
}

inline void write_log(std::span<const InteractionRecord> log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  for (const auto& r : log) out << record_to_json(r).dump() << '\n';
}

inline std::vector<InteractionRecord> read_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open interaction log " + path);
  std::vector<InteractionRecord> log;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      log.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return log;
}

// --- instance cache ----------------------------------------------------------
//
// Little-endian layout:
//   "EGOCACHE" | u32 version(=1) | u32 m | u64 count
//   per instance:
//     i32 node_ids[m]                      (-1 for padding)
//     mask bits        ceil(m/8) bytes     (bit i of byte i/8, LSB first)
//     adjacency bits   ceil(m(m-1)/2 / 8)  upper triangle, row-major, i<j
//     active bits      ceil(m/8)
//     ego bits         ceil(m/8)
//     u8 label

namespace detail {

static_assert(std::endian::native == std::endian::little, "cache I/O assumes little-endian host");

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw Error("truncated binary file");
  return v;
}

inline void put_bits(std::ostream& out, const std::vector<std::uint8_t>& bits) {
  std::vector<char> bytes((bits.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < bits.size(); ++i)
    if (bits[i]) bytes[i / 8] = static_cast<char>(bytes[i / 8] | (1 << (i % 8)));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint8_t> get_bits(std::istream& in, std::size_t n) {
  std::vector<char> bytes((n + 7) / 8);
  if (!in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) throw Error("truncated binary file");
  std::vector<std::uint8_t> bits(n);
  for (std::size_t i = 0; i < n; ++i) bits[i] = (bytes[i / 8] >> (i % 8)) & 1;
  return bits;
}

}  // namespace detail

inline void write_instance_cache(std::span<const EgoInstance> instances, int m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out.write("EGOCACHE", 8);
  detail::put<std::uint32_t>(out, 1);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(m));
  detail::put<std::uint64_t>(out, instances.size());
  for (const auto& e : instances) {
    if (e.size() != m) throw Error("instance cache: instance size differs from m");
    for (auto id : e.node_ids) detail::put<std::int32_t>(out, id);
    detail::put_bits(out, e.mask);
    std::vector<std::uint8_t> upper;
    upper.reserve(static_cast<std::size_t>(m) * (m - 1) / 2);
    for (int i = 0; i < m; ++i)
      for (int j = i + 1; j < m; ++j) upper.push_back(e.adjacency(i, j));
    detail::put_bits(out, upper);
    detail::put_bits(out, e.active_flags);
    detail::put_bits(out, e.ego_flags);
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(e.label));
  }
  if (!out) throw Error("write failed for " + path);
}

inline std::vector<EgoInstance> read_instance_cache(const std::string& path, int* m_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open instance cache " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, "EGOCACHE", 8) != 0) throw Error(path + ": not an instance cache");
  if (detail::get<std::uint32_t>(in) != 1) throw Error(path + ": unsupported cache version");
  const int m = static_cast<int>(detail::get<std::uint32_t>(in));
  const auto count = detail::get<std::uint64_t>(in);
  std::vector<EgoInstance> out;
  out.reserve(count);
  for (std::uint64_t k = 0; k < count; ++k) {
    EgoInstance e;
    e.node_ids.resize(m);
    for (auto& id : e.node_ids) id = detail::get<std::int32_t>(in);
    e.mask = detail::get_bits(in, m);
    auto upper = detail::get_bits(in, static_cast<std::size_t>(m) * (m - 1) / 2);
    e.adjacency = DenseAdjacency::Zero(m, m);
    std::size_t p = 0;
    for (int i = 0; i < m; ++i)
      for (int j = i + 1; j < m; ++j, ++p) e.adjacency(i, j) = e.adjacency(j, i) = upper[p];
    e.active_flags = detail::get_bits(in, m);
    e.ego_flags = detail::get_bits(in, m);
    e.label = detail::get<std::uint8_t>(in);
    e.validate();
    out.push_back(std::move(e));
  }
  if (m_out) *m_out = m;
  return out;
}

}  // namespace diffuse
