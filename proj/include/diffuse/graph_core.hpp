#pragma once

// Graph storage plus the classical algorithms used by the analyses and the
// feature pipeline: connected components, k-core, articulation points,
// PageRank and the local clustering coefficient.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "diffuse/error.hpp"

namespace diffuse {

using NodeId = std::int32_t;
inline constexpr NodeId kPaddingId = -1;
inline constexpr std::size_t kRegionWidth = 10;

/// Region codes are six digit integers laid out as PPCCDD
/// (province, city, district). The one-hot feature buckets the province.
inline std::array<double, kRegionWidth> region_one_hot(std::int64_t region_code) {
  std::array<double, kRegionWidth> v{};
  const auto province = region_code < 0 ? 0 : region_code / 10000;
  v[static_cast<std::size_t>(province % static_cast<std::int64_t>(kRegionWidth))] = 1.0;
  return v;
}

struct UserAttributes {
  int gender = 0;  // 0 unknown, 1 male, 2 female
  int age = 0;
  std::int64_t region_code = 0;
  std::array<double, kRegionWidth> region{};
  double pagerank_score = 0.0;
  bool is_cut_point = false;
  bool is_opinion_leader = false;
};

/// Undirected friendship graph in compressed sparse form.
class SocialGraph {
 public:
  SocialGraph() = default;

  /// Builds the graph from an edge list. Self-loops are dropped and
  /// duplicate edges collapsed; ids must be in [0, node_count).
  static SocialGraph from_edges(std::size_t node_count,
                                std::span<const std::pair<NodeId, NodeId>> edges) {
    std::vector<std::vector<NodeId>> lists(node_count);
    for (const auto& [u, v] : edges) {
      if (u < 0 || v < 0 || static_cast<std::size_t>(u) >= node_count ||
          static_cast<std::size_t>(v) >= node_count) {
        throw Error("edge (" + std::to_string(u) + "," + std::to_string(v) +
                    ") out of range for " + std::to_string(node_count) + " nodes");
      }
      if (u == v) continue;
      lists[u].push_back(v);
      lists[v].push_back(u);
    }
    SocialGraph g;
    g.offsets_.assign(node_count + 1, 0);
    for (std::size_t i = 0; i < node_count; ++i) {
      auto& l = lists[i];
      std::sort(l.begin(), l.end());
      l.erase(std::unique(l.begin(), l.end()), l.end());
      g.offsets_[i + 1] = g.offsets_[i] + l.size();
    }
    g.targets_.reserve(g.offsets_.back());
    for (auto& l : lists) g.targets_.insert(g.targets_.end(), l.begin(), l.end());
    g.attrs_.resize(node_count);
    for (auto& a : g.attrs_) a.region = region_one_hot(a.region_code);
    return g;
  }

  std::size_t node_count() const { return attrs_.size(); }
  std::size_t edge_count() const { return targets_.size() / 2; }

  std::span<const NodeId> neighbors(NodeId v) const {
    check(v);
    return {targets_.data() + offsets_[v], offsets_[v + 1] - offsets_[v]};
  }
  std::size_t degree(NodeId v) const { return neighbors(v).size(); }
  bool contains(NodeId v) const {
    return v >= 0 && static_cast<std::size_t>(v) < node_count();
  }
  bool has_edge(NodeId u, NodeId v) const {
    auto n = neighbors(u);
    return std::binary_search(n.begin(), n.end(), v);
  }

  const UserAttributes& attributes(NodeId v) const {
    check(v);
    return attrs_[v];
  }
  UserAttributes& attributes(NodeId v) {
    check(v);
    return attrs_[v];
  }
  std::span<const UserAttributes> all_attributes() const { return attrs_; }

  void set_attributes(NodeId v, UserAttributes a) {
    check(v);
    a.region = region_one_hot(a.region_code);
    attrs_[v] = a;
  }

  /// Stores PageRank scores in the attributes and marks them as computed.
  void set_pagerank(std::span<const double> scores) {
    if (scores.size() != node_count()) throw Error("pagerank size mismatch");
    for (std::size_t i = 0; i < scores.size(); ++i) attrs_[i].pagerank_score = scores[i];
    pagerank_ready_ = true;
  }
  bool pagerank_computed() const { return pagerank_ready_; }

  std::vector<std::pair<NodeId, NodeId>> edges() const {
    std::vector<std::pair<NodeId, NodeId>> out;
    out.reserve(edge_count());
    for (std::size_t u = 0; u < node_count(); ++u)
      for (auto v : neighbors(static_cast<NodeId>(u)))
        if (static_cast<NodeId>(u) < v) out.emplace_back(static_cast<NodeId>(u), v);
    return out;
  }

 private:
  void check(NodeId v) const {
    if (!contains(v)) throw Error("unknown node id " + std::to_string(v));
  }

  std::vector<std::size_t> offsets_{0};
  std::vector<NodeId> targets_;
  std::vector<UserAttributes> attrs_;
  bool pagerank_ready_ = false;
};

using DenseAdjacency = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Dense induced subgraph over an ordered list of original node ids.
struct Subgraph {
  std::vector<NodeId> node_ids;
  DenseAdjacency adjacency;

  std::size_t size() const { return node_ids.size(); }

  static Subgraph induced(const SocialGraph& g, std::span<const NodeId> ids) {
    Subgraph s;
    s.node_ids.assign(ids.begin(), ids.end());
    const auto n = static_cast<Eigen::Index>(ids.size());
    s.adjacency = DenseAdjacency::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = i + 1; j < n; ++j)
        if (g.has_edge(ids[i], ids[j])) s.adjacency(i, j) = s.adjacency(j, i) = 1;
    return s;
  }

  /// Builds a subgraph from local edges over ids 0..n-1.
  static Subgraph from_local_edges(std::size_t n,
                                   std::span<const std::pair<int, int>> edges) {
    Subgraph s;
    s.node_ids.resize(n);
    std::iota(s.node_ids.begin(), s.node_ids.end(), 0);
    s.adjacency = DenseAdjacency::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (auto [a, b] : edges) {
      if (a == b) continue;
      s.adjacency(a, b) = s.adjacency(b, a) = 1;
    }
    return s;
  }

  int local_index(NodeId id) const {
    auto it = std::find(node_ids.begin(), node_ids.end(), id);
    if (it == node_ids.end()) throw Error("node " + std::to_string(id) + " not in subgraph");
    return static_cast<int>(it - node_ids.begin());
  }

  int local_degree(int i) const {
    int d = 0;
    for (Eigen::Index j = 0; j < adjacency.cols(); ++j) d += adjacency(i, j);
    return d;
  }

  bool valid() const {
    const auto n = static_cast<Eigen::Index>(node_ids.size());
    if (adjacency.rows() != n || adjacency.cols() != n) return false;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (adjacency(i, i) != 0) return false;
      for (Eigen::Index j = 0; j < n; ++j)
        if (adjacency(i, j) != adjacency(j, i) || adjacency(i, j) > 1) return false;
    }
    return true;
  }
};

namespace detail {

// Component label per local index; labels are assigned in order of the
// smallest member so output is deterministic.
inline std::vector<int> component_labels(const Subgraph& g, int* count) {
  const int n = static_cast<int>(g.size());
  std::vector<int> label(n, -1);
  std::vector<int> stack;
  int next = 0;
  for (int s = 0; s < n; ++s) {
    if (label[s] >= 0) continue;
    label[s] = next;
    stack.push_back(s);
    while (!stack.empty()) {
      int v = stack.back();
      stack.pop_back();
      for (int w = 0; w < n; ++w)
        if (g.adjacency(v, w) && label[w] < 0) {
          label[w] = next;
          stack.push_back(w);
        }
    }
    ++next;
  }
  if (count) *count = next;
  return label;
}

// Iterative Tarjan low-link over any adjacency given as neighbor lists.
template <class NeighborFn>
std::vector<int> articulation_indices(int n, NeighborFn&& neighbors_of) {
  std::vector<int> disc(n, -1), low(n, 0), parent(n, -1), child_count(n, 0);
  std::vector<char> is_cut(n, 0);
  struct Frame {
    int v;
    std::size_t next;
  };
  std::vector<Frame> stack;
  int timer = 0;
  for (int root = 0; root < n; ++root) {
    if (disc[root] >= 0) continue;
    disc[root] = low[root] = timer++;
    stack.push_back({root, 0});
    while (!stack.empty()) {
      auto& f = stack.back();
      const auto& nbrs = neighbors_of(f.v);
      if (f.next < nbrs.size()) {
        int w = nbrs[f.next++];
        if (disc[w] < 0) {
          parent[w] = f.v;
          ++child_count[f.v];
          disc[w] = low[w] = timer++;
          stack.push_back({w, 0});
        } else if (w != parent[f.v]) {
          low[f.v] = std::min(low[f.v], disc[w]);
        }
      } else {
        int v = f.v;
        stack.pop_back();
        int p = parent[v];
        if (p >= 0) {
          low[p] = std::min(low[p], low[v]);
          if (parent[p] >= 0 && low[v] >= disc[p]) is_cut[p] = 1;
        }
      }
    }
    if (child_count[root] > 1) is_cut[root] = 1;
  }
  std::vector<int> out;
  for (int v = 0; v < n; ++v)
    if (is_cut[v]) out.push_back(v);
  return out;
}

}  // namespace detail

/// Partition of the subgraph's nodes into connected components (original ids).
inline std::vector<std::vector<NodeId>> connected_components(const Subgraph& g) {
  int count = 0;
  auto label = detail::component_labels(g, &count);
  std::vector<std::vector<NodeId>> parts(count);
  for (std::size_t i = 0; i < label.size(); ++i) parts[label[i]].push_back(g.node_ids[i]);
  return parts;
}

inline int count_components(const Subgraph& g) {
  int count = 0;
  detail::component_labels(g, &count);
  return count;
}

/// Maximal induced subgraph in which every node has degree >= k.
inline Subgraph k_core(const Subgraph& g, int k) {
  if (k < 0) throw Error("k_core: k must be >= 0");
  const int n = static_cast<int>(g.size());
  std::vector<int> deg(n);
  std::vector<char> alive(n, 1);
  std::vector<int> queue;
  for (int i = 0; i < n; ++i) {
    deg[i] = g.local_degree(i);
    if (deg[i] < k) {
      alive[i] = 0;
      queue.push_back(i);
    }
  }
  while (!queue.empty()) {
    int v = queue.back();
    queue.pop_back();
    for (int w = 0; w < n; ++w)
      if (g.adjacency(v, w) && alive[w] && --deg[w] < k) {
        alive[w] = 0;
        queue.push_back(w);
      }
  }
  std::vector<int> keep;
  for (int i = 0; i < n; ++i)
    if (alive[i]) keep.push_back(i);
  Subgraph out;
  const auto m = static_cast<Eigen::Index>(keep.size());
  out.adjacency = DenseAdjacency::Zero(m, m);
  for (Eigen::Index a = 0; a < m; ++a) {
    out.node_ids.push_back(g.node_ids[keep[a]]);
    for (Eigen::Index b = 0; b < m; ++b) out.adjacency(a, b) = g.adjacency(keep[a], keep[b]);
  }
  return out;
}

/// Cut vertices (original ids, ascending by local position) found in one DFS pass.
inline std::vector<NodeId> articulation_points(const Subgraph& g) {
  const int n = static_cast<int>(g.size());
  std::vector<std::vector<int>> lists(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (g.adjacency(i, j)) lists[i].push_back(j);
  auto idx = detail::articulation_indices(n, [&](int v) -> const std::vector<int>& { return lists[v]; });
  std::vector<NodeId> out;
  for (int i : idx) out.push_back(g.node_ids[i]);
  return out;
}

/// Articulation points of the whole social graph.
inline std::vector<NodeId> articulation_points(const SocialGraph& g) {
  const int n = static_cast<int>(g.node_count());
  std::vector<std::vector<int>> lists(n);
  for (int v = 0; v < n; ++v) {
    auto nb = g.neighbors(v);
    lists[v].assign(nb.begin(), nb.end());
  }
  auto idx = detail::articulation_indices(n, [&](int v) -> const std::vector<int>& { return lists[v]; });
  return {idx.begin(), idx.end()};
}

struct PageRankOptions {
  double damping = 0.85;
  int iters = 1000;
  double tol = 1e-12;
};

/// Power iteration over the graph with each undirected edge in both
/// directions. Dangling mass is spread uniformly; stops on L1 change < tol.
inline std::vector<double> pagerank(const SocialGraph& g, PageRankOptions opt = {}) {
  if (!(opt.damping > 0.0 && opt.damping < 1.0)) throw Error("pagerank: damping must be in (0,1)");
  if (opt.iters < 1) throw Error("pagerank: iters must be >= 1");
  const std::size_t n = g.node_count();
  if (n == 0) return {};
  std::vector<double> r(n, 1.0 / static_cast<double>(n)), next(n);
  for (int it = 0; it < opt.iters; ++it) {
    double dangling = 0.0;
    for (std::size_t v = 0; v < n; ++v)
      if (g.degree(static_cast<NodeId>(v)) == 0) dangling += r[v];
    const double base = (1.0 - opt.damping) / static_cast<double>(n) +
                        opt.damping * dangling / static_cast<double>(n);
    std::fill(next.begin(), next.end(), base);
    for (std::size_t v = 0; v < n; ++v) {
      auto nb = g.neighbors(static_cast<NodeId>(v));
      if (nb.empty()) continue;
      const double share = opt.damping * r[v] / static_cast<double>(nb.size());
      for (auto w : nb) next[w] += share;
    }
    double sum = std::accumulate(next.begin(), next.end(), 0.0);
    double diff = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
      next[v] /= sum;
      diff += std::abs(next[v] - r[v]);
    }
    r.swap(next);
    if (diff < opt.tol) break;
  }
  return r;
}

/// Flags the top `ol_quantile` fraction by PageRank as opinion leaders
/// (ties to the lower id) and every articulation point as a cut point.
inline void mark_social_roles(SocialGraph& g, double ol_quantile) {
  if (!g.pagerank_computed()) throw Error("mark_social_roles: pagerank not computed");
  if (!(ol_quantile > 0.0 && ol_quantile < 1.0)) throw Error("mark_social_roles: quantile must be in (0,1)");
  const std::size_t n = g.node_count();
  std::vector<NodeId> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](NodeId a, NodeId b) {
    return g.attributes(a).pagerank_score > g.attributes(b).pagerank_score;
  });
  const auto leaders = static_cast<std::size_t>(
      std::ceil(static_cast<double>(n) * ol_quantile - 1e-9));
  for (std::size_t i = 0; i < n; ++i) {
    auto& a = g.attributes(order[i]);
    a.is_opinion_leader = i < leaders;
    a.is_cut_point = false;
  }
  for (auto v : articulation_points(g)) g.attributes(v).is_cut_point = true;
}

/// 2 * triangles(node) / (deg * (deg - 1)); 0 when deg < 2.
inline double local_clustering_coefficient(const Subgraph& g, NodeId node) {
  const int v = g.local_index(node);
  std::vector<int> nb;
  for (Eigen::Index j = 0; j < g.adjacency.cols(); ++j)
    if (g.adjacency(v, j)) nb.push_back(static_cast<int>(j));
  const auto d = nb.size();
  if (d < 2) return 0.0;
  std::size_t links = 0;
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a + 1; b < d; ++b) links += g.adjacency(nb[a], nb[b]);
  return 2.0 * static_cast<double>(links) / static_cast<double>(d * (d - 1));
}

// --- file formats -----------------------------------------------------------

/// Reads "u v" pairs, one per line; blank lines and '#' comments skipped.
inline std::vector<std::pair<NodeId, NodeId>> read_edge_list(const std::string& path,
                                                              NodeId* max_id = nullptr) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open edge list " + path);
  std::vector<std::pair<NodeId, NodeId>> edges;
  NodeId hi = -1;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    long long u, v;
    if (!(ss >> u >> v) || u < 0 || v < 0)
      throw Error(path + ":" + std::to_string(lineno) + ": malformed edge");
    edges.emplace_back(static_cast<NodeId>(u), static_cast<NodeId>(v));
    hi = std::max<NodeId>({hi, static_cast<NodeId>(u), static_cast<NodeId>(v)});
  }
  if (max_id) *max_id = hi;
  return edges;
}

inline void write_edge_list(const SocialGraph& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  for (auto [u, v] : g.edges()) out << u << ' ' << v << '\n';
}

/// CSV with header node_id,gender,age,region_code.
inline std::vector<std::pair<NodeId, UserAttributes>> read_attributes_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open attribute file " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error(path + ": missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "node_id,gender,age,region_code") throw Error(path + ": unexpected header '" + line + "'");
  std::vector<std::pair<NodeId, UserAttributes>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string f[4];
    for (auto& x : f)
      if (!std::getline(ss, x, ',')) throw Error(path + ":" + std::to_string(lineno) + ": expected 4 fields");
    try {
      UserAttributes a;
      a.gender = std::stoi(f[1]);
      a.age = std::stoi(f[2]);
      a.region_code = std::stoll(f[3]);
      if (a.gender < 0 || a.gender > 2 || a.age < 0)
        throw Error(path + ":" + std::to_string(lineno) + ": invalid attribute values");
      a.region = region_one_hot(a.region_code);
      rows.emplace_back(static_cast<NodeId>(std::stol(f[0])), a);
    } catch (const std::logic_error&) {
      throw Error(path + ":" + std::to_string(lineno) + ": non-numeric field");
    }
  }
  return rows;
}

inline void write_attributes_csv(const SocialGraph& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "node_id,gender,age,region_code\n";
  for (std::size_t v = 0; v < g.node_count(); ++v) {
    const auto& a = g.attributes(static_cast<NodeId>(v));
    out << v << ',' << a.gender << ',' << a.age << ',' << a.region_code << '\n';
  }
}

/// Loads an edge list plus attribute CSV. Node count covers both files.
inline SocialGraph load_social_graph(const std::string& edge_path, const std::string& attr_path) {
  NodeId max_id = -1;
  auto edges = read_edge_list(edge_path, &max_id);
  auto attrs = read_attributes_csv(attr_path);
  NodeId max_attr = -1;
  for (auto& [id, a] : attrs) max_attr = std::max(max_attr, id);
  auto g = SocialGraph::from_edges(static_cast<std::size_t>(std::max(max_id, max_attr) + 1), edges);
  for (auto& [id, a] : attrs) g.set_attributes(id, a);
  return g;
}

}  // namespace diffuse
