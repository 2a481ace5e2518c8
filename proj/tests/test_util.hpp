#pragma once

#include <random>
#include <utility>
#include <vector>

#include "diffuse/graph_core.hpp"

namespace testutil {

inline std::vector<std::pair<diffuse::NodeId, diffuse::NodeId>> random_edges(int n, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(p);
  std::vector<std::pair<diffuse::NodeId, diffuse::NodeId>> e;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (coin(rng)) e.emplace_back(i, j);
  return e;
}

inline diffuse::SocialGraph random_graph(int n, double p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto e = random_edges(n, p, rng);
  return diffuse::SocialGraph::from_edges(n, e);
}

inline diffuse::Subgraph random_subgraph(int n, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(p);
  std::vector<std::pair<int, int>> e;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (coin(rng)) e.emplace_back(i, j);
  return diffuse::Subgraph::from_local_edges(n, e);
}

inline diffuse::SocialGraph path_graph(int n) {
  std::vector<std::pair<diffuse::NodeId, diffuse::NodeId>> e;
  for (int i = 0; i + 1 < n; ++i) e.emplace_back(i, i + 1);
  return diffuse::SocialGraph::from_edges(n, e);
}

inline diffuse::SocialGraph star_graph(int leaves) {
  std::vector<std::pair<diffuse::NodeId, diffuse::NodeId>> e;
  for (int i = 1; i <= leaves; ++i) e.emplace_back(0, i);
  return diffuse::SocialGraph::from_edges(leaves + 1, e);
}

// Reachability by repeated relaxation, independent of the library's traversal.
inline int count_components_oracle(const diffuse::Subgraph& g) {
  const int n = static_cast<int>(g.size());
  std::vector<int> label(n);
  for (int i = 0; i < n; ++i) label[i] = i;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (g.adjacency(i, j) && label[j] < label[i]) {
          label[i] = label[j];
          changed = true;
        }
  }
  int c = 0;
  for (int i = 0; i < n; ++i) c += label[i] == i;
  return c;
}

inline diffuse::Subgraph drop_node(const diffuse::Subgraph& g, int v) {
  std::vector<int> keep;
  for (int i = 0; i < static_cast<int>(g.size()); ++i)
    if (i != v) keep.push_back(i);
  diffuse::Subgraph s;
  const auto m = static_cast<Eigen::Index>(keep.size());
  s.adjacency = diffuse::DenseAdjacency::Zero(m, m);
  for (Eigen::Index a = 0; a < m; ++a) {
    s.node_ids.push_back(g.node_ids[keep[a]]);
    for (Eigen::Index b = 0; b < m; ++b) s.adjacency(a, b) = g.adjacency(keep[a], keep[b]);
  }
  return s;
}

// Cut vertices by deleting each node and recounting components.
inline std::vector<diffuse::NodeId> articulation_oracle(const diffuse::Subgraph& g) {
  const int base = count_components_oracle(g);
  std::vector<diffuse::NodeId> out;
  for (int v = 0; v < static_cast<int>(g.size()); ++v) {
    const bool isolated = g.local_degree(v) == 0;
    const int after = count_components_oracle(drop_node(g, v));
    if (after > base - (isolated ? 1 : 0)) out.push_back(g.node_ids[v]);
  }
  return out;
}

// Repeatedly strips nodes with degree < k until stable.
inline std::vector<diffuse::NodeId> k_core_oracle(const diffuse::Subgraph& g, int k) {
  diffuse::Subgraph cur = g;
  for (;;) {
    int bad = -1;
    for (int i = 0; i < static_cast<int>(cur.size()); ++i)
      if (cur.local_degree(i) < k) {
        bad = i;
        break;
      }
    if (bad < 0) break;
    cur = drop_node(cur, bad);
  }
  return cur.node_ids;
}

}  // namespace testutil
