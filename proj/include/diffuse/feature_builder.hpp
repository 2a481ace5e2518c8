#pragma once

// Per-node input features for an ego instance, the factorization-machine
// cross span, and a light ProNE-style pretrainer for global embeddings.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <nlohmann/json.hpp>

#include "diffuse/ego_sampler.hpp"
#include "diffuse/error.hpp"
#include "diffuse/graph_core.hpp"
#include "diffuse/spectral_filter.hpp"

namespace diffuse {

struct FeatureSpan {
  std::string name;
  int offset = 0;
  int width = 0;
  bool operator==(const FeatureSpan&) const = default;
};

class FeatureLayout {
 public:
  void append(std::string name, int width) {
    if (width <= 0) throw Error("feature span '" + name + "' must have positive width");
    if (find(name)) throw Error("duplicate feature span '" + name + "'");
    spans_.push_back({std::move(name), width_, width});
    width_ += width;
  }

  const std::vector<FeatureSpan>& spans() const { return spans_; }
  int width() const { return width_; }

  const FeatureSpan* find(const std::string& name) const {
    for (const auto& s : spans_)
      if (s.name == name) return &s;
    return nullptr;
  }
  const FeatureSpan& at(const std::string& name) const {
    if (auto* s = find(name)) return *s;
    throw Error("feature span '" + name + "' not in layout");
  }

  /// Spans are contiguous, non-overlapping and sum to width().
  bool consistent() const {
    int off = 0;
    for (const auto& s : spans_) {
      if (s.offset != off || s.width <= 0) return false;
      off += s.width;
    }
    return off == width_;
  }

  nlohmann::json to_json() const {
    nlohmann::json spans = nlohmann::json::array();
    for (const auto& s : spans_) spans.push_back({{"name", s.name}, {"offset", s.offset}, {"width", s.width}});
    return {{"width", width_}, {"spans", spans}};
  }

  static FeatureLayout from_json(const nlohmann::json& j) {
    FeatureLayout l;
    for (const auto& s : j.at("spans")) {
      l.append(s.at("name").get<std::string>(), s.at("width").get<int>());
      if (l.spans_.back().offset != s.at("offset").get<int>()) throw Error("layout manifest: offsets not contiguous");
    }
    if (l.width_ != j.at("width").get<int>()) throw Error("layout manifest: width mismatch");
    return l;
  }

  bool operator==(const FeatureLayout&) const = default;

 private:
  std::vector<FeatureSpan> spans_;
  int width_ = 0;
};

struct FeatureMatrix {
  Eigen::MatrixXd values;
  FeatureLayout layout;

  Eigen::MatrixXd span(const std::string& name) const {
    const auto& s = layout.at(name);
    return values.middleCols(s.offset, s.width);
  }
};

enum class EmbeddingSource { pretrained, zero };

struct EmbeddingTable {
  Eigen::MatrixXd values;  // node_count x dim
  EmbeddingSource source = EmbeddingSource::zero;

  int dim() const { return static_cast<int>(values.cols()); }
  std::size_t node_count() const { return static_cast<std::size_t>(values.rows()); }

  static EmbeddingTable zeros(std::size_t nodes, int dim) {
    return {Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nodes), dim), EmbeddingSource::zero};
  }
};

/// Which first-order spans exist and which of them feed the FM cross.
struct FeatureOptions {
  bool node_features = true;  // demographics + social roles
  bool pretrain = true;       // embedding span
  bool second_order = true;   // FM cross span
  int cross_dim = 16;
  std::vector<std::string> cross_spans;  // empty: every first-order span
};

inline constexpr const char* kCrossSpan = "cross";

inline FeatureLayout first_order_layout(const FeatureOptions& opt, int embed_dim) {
  FeatureLayout l;
  if (opt.node_features) {
    l.append("gender", 1);
    l.append("age", 1);
    l.append("region", static_cast<int>(kRegionWidth));
    l.append("pagerank", 1);
    l.append("cut_point", 1);
  }
  l.append("ego", 1);
  l.append("action", 1);
  if (opt.pretrain) l.append("embedding", embed_dim);
  return l;
}

/// First-order layout plus the cross span when enabled.
inline FeatureLayout full_layout(const FeatureOptions& opt, int embed_dim) {
  auto l = first_order_layout(opt, embed_dim);
  if (opt.second_order) l.append(kCrossSpan, opt.cross_dim);
  return l;
}

/// Names of the first-order spans that enter the FM cross.
inline std::vector<std::string> cross_inputs(const FeatureOptions& opt, const FeatureLayout& first_order) {
  if (opt.cross_spans.empty()) {
    std::vector<std::string> all;
    for (const auto& s : first_order.spans()) all.push_back(s.name);
    return all;
  }
  std::vector<std::string> chosen;
  for (const auto& n : opt.cross_spans)
    if (first_order.find(n)) chosen.push_back(n);
  return chosen;
}

/// Assembles first-order rows: gender/2, age/100, region one-hot, PageRank
/// relative to the graph maximum, cut-point flag, ego flag, action flag and
/// the embedding row. Padded rows stay zero.
class FeatureBuilder {
 public:
  FeatureBuilder(const SocialGraph& g, const EmbeddingTable* table, FeatureOptions opt = {})
      : graph_(&g), table_(table), opt_(std::move(opt)) {
    if (opt_.pretrain && !table_) throw Error("feature builder: embedding table required");
    embed_dim_ = table_ ? table_->dim() : 0;
    layout_ = first_order_layout(opt_, embed_dim_);
    for (const auto& a : g.all_attributes()) pagerank_max_ = std::max(pagerank_max_, a.pagerank_score);
  }

  const FeatureLayout& layout() const { return layout_; }
  const FeatureOptions& options() const { return opt_; }
  int embed_dim() const { return embed_dim_; }

  FeatureMatrix build(const EgoInstance& e) const {
    FeatureMatrix fm;
    fm.layout = layout_;
    fm.values = Eigen::MatrixXd::Zero(e.size(), layout_.width());
    for (int i = 0; i < e.size(); ++i) {
      if (!e.mask[i]) continue;
      const NodeId v = e.node_ids[i];
      if (!graph_->contains(v)) throw Error("features: node " + std::to_string(v) + " has no attributes");
      auto row = fm.values.row(i);
      if (opt_.node_features) {
        const auto& a = graph_->attributes(v);
        row(layout_.at("gender").offset) = a.gender / 2.0;
        row(layout_.at("age").offset) = std::min(a.age, 100) / 100.0;
        const int r = layout_.at("region").offset;
        for (std::size_t k = 0; k < kRegionWidth; ++k) row(r + static_cast<int>(k)) = a.region[k];
        row(layout_.at("pagerank").offset) = pagerank_max_ > 0.0 ? a.pagerank_score / pagerank_max_ : 0.0;
        row(layout_.at("cut_point").offset) = a.is_cut_point ? 1.0 : 0.0;
      }
      row(layout_.at("ego").offset) = e.ego_flags[i] ? 1.0 : 0.0;
      row(layout_.at("action").offset) = e.active_flags[i] ? 1.0 : 0.0;
      if (opt_.pretrain) {
        if (static_cast<std::size_t>(v) >= table_->node_count())
          throw Error("features: node " + std::to_string(v) + " missing from embedding table");
        row.segment(layout_.at("embedding").offset, embed_dim_) = table_->values.row(v);
      }
    }
    return fm;
  }

 private:
  const SocialGraph* graph_;
  const EmbeddingTable* table_;
  FeatureOptions opt_;
  FeatureLayout layout_;
  int embed_dim_ = 0;
  double pagerank_max_ = 0.0;
};

inline FeatureMatrix build_first_order(const EgoInstance& e, const SocialGraph& g, const EmbeddingTable& table) {
  return FeatureBuilder(g, &table).build(e);
}

// --- factorization-machine cross ----------------------------------------------

struct FMProjection {
  std::vector<std::string> spans;       // input spans, in order
  std::vector<Eigen::MatrixXd> weights;  // weights[i]: width_i x cross_dim

  int cross_dim() const { return weights.empty() ? 0 : static_cast<int>(weights.front().cols()); }

  static FMProjection random(const FeatureLayout& layout, const std::vector<std::string>& spans, int cross_dim,
                             std::mt19937_64& rng) {
    FMProjection p;
    for (const auto& name : spans) {
      const auto& s = layout.at(name);
      const double bound = std::sqrt(6.0 / (s.width + cross_dim));
      std::uniform_real_distribution<double> u(-bound, bound);
      Eigen::MatrixXd w(s.width, cross_dim);
      for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = u(rng);
      p.spans.push_back(name);
      p.weights.push_back(std::move(w));
    }
    return p;
  }
};

/// Per node: 0.5 * ((sum_i W_i x_i)^2 - sum_i (W_i x_i)^2), elementwise.
inline Eigen::MatrixXd fm_second_order(const FeatureMatrix& x, const FMProjection& proj) {
  if (proj.spans.size() != proj.weights.size()) throw Error("fm: projection spans and weights differ");
  const int c = proj.cross_dim();
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(x.values.rows(), c);
  Eigen::MatrixXd sq = Eigen::MatrixXd::Zero(x.values.rows(), c);
  for (std::size_t i = 0; i < proj.spans.size(); ++i) {
    const auto* s = x.layout.find(proj.spans[i]);
    if (!s) throw Error("fm: span '" + proj.spans[i] + "' missing from feature layout");
    if (proj.weights[i].rows() != s->width || proj.weights[i].cols() != c)
      throw Error("fm: projection for '" + proj.spans[i] + "' has wrong shape");
    const Eigen::MatrixXd v = x.values.middleCols(s->offset, s->width) * proj.weights[i];
    sum += v;
    sq += v.cwiseAbs2();
  }
  return 0.5 * (sum.cwiseAbs2() - sq);
}

// --- embedding pretraining ------------------------------------------------------

namespace detail {

using SparseRM = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// P = D^-1 A with unit self-loops on isolated nodes.
inline SparseRM propagation_matrix(const SocialGraph& g) {
  const auto n = static_cast<Eigen::Index>(g.node_count());
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(g.edge_count() * 2 + g.node_count());
  for (Eigen::Index v = 0; v < n; ++v) {
    auto nb = g.neighbors(static_cast<NodeId>(v));
    if (nb.empty()) {
      trip.emplace_back(v, v, 1.0);
      continue;
    }
    const double w = 1.0 / static_cast<double>(nb.size());
    for (auto u : nb) trip.emplace_back(v, u, w);
  }
  SparseRM p(n, n);
  p.setFromTriplets(trip.begin(), trip.end());
  return p;
}

inline void orthonormalize(Eigen::MatrixXd& y) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(y);
  y = qr.householderQ() * Eigen::MatrixXd::Identity(y.rows(), y.cols());
}

}  // namespace detail

/// Applies X -> P (I - g(L)) X on the whole graph with the Chebyshev series.
inline Eigen::MatrixXd propagate_embeddings(const SocialGraph& g, const Eigen::MatrixXd& base, const FilterParams& fp) {
  if (base.rows() != static_cast<Eigen::Index>(g.node_count())) throw Error("propagate: row count differs from graph");
  const auto p = detail::propagation_matrix(g);
  const auto coeffs = chebyshev_coefficients(fp);
  Eigen::MatrixXd prev = base;
  Eigen::MatrixXd acc = coeffs.c(0) * base;
  if (coeffs.c.size() > 1) {
    Eigen::MatrixXd cur = -(p * base);
    acc += coeffs.c(1) * cur;
    for (Eigen::Index j = 2; j < coeffs.c.size(); ++j) {
      Eigen::MatrixXd next = -2.0 * (p * cur) - prev;
      acc += coeffs.c(j) * next;
      prev.swap(cur);
      cur.swap(next);
    }
  }
  return p * (base - acc);
}

struct PretrainOptions {
  int dim = 64;
  int svd_rank = 96;
  int power_iters = 2;
  std::uint64_t seed = 1;
  bool normalize_rows = true;
  FilterParams filter{0.2, 0.5, 10, SmoothingMode::chebyshev, false};
};

/// Base vectors from a randomized truncated SVD of the degree-normalized
/// adjacency (right singular vectors scaled by sqrt(sigma)).
inline Eigen::MatrixXd svd_base_embeddings(const SocialGraph& g, int dim, int svd_rank, int power_iters,
                                           std::uint64_t seed) {
  const auto n = static_cast<Eigen::Index>(g.node_count());
  if (g.edge_count() == 0) throw Error("pretrain: graph has no edges");
  if (!(dim >= 1 && dim <= svd_rank && svd_rank <= n)) throw Error("pretrain: need 1 <= dim <= svd_rank <= node_count");
  const auto p = detail::propagation_matrix(g);
  const detail::SparseRM pt = p.transpose();

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd omega(n, svd_rank);
  for (Eigen::Index k = 0; k < omega.size(); ++k) omega.data()[k] = normal(rng);

  // range of P^T, i.e. the right singular subspace of P
  Eigen::MatrixXd y = pt * omega;
  detail::orthonormalize(y);
  for (int it = 0; it < power_iters; ++it) {
    Eigen::MatrixXd z = p * y;
    detail::orthonormalize(z);
    y = pt * z;
    detail::orthonormalize(y);
  }
  const Eigen::MatrixXd b = (p * y).transpose();  // rank x n, equals Q^T P^T
  Eigen::BDCSVD<Eigen::MatrixXd> svd(b, Eigen::ComputeThinU);
  Eigen::MatrixXd u = y * svd.matrixU();
  Eigen::MatrixXd out(n, dim);
  for (int k = 0; k < dim; ++k) {
    Eigen::VectorXd col = u.col(k) * std::sqrt(svd.singularValues()(k));
    Eigen::Index arg;
    col.cwiseAbs().maxCoeff(&arg);
    if (col(arg) < 0) col = -col;
    out.col(k) = col;
  }
  return out;
}

inline EmbeddingTable pretrain_embeddings(const SocialGraph& g, const PretrainOptions& opt) {
  auto base = svd_base_embeddings(g, opt.dim, opt.svd_rank, opt.power_iters, opt.seed);
  Eigen::MatrixXd e = propagate_embeddings(g, base, opt.filter);
  if (opt.normalize_rows)
    for (Eigen::Index r = 0; r < e.rows(); ++r) {
      const double nrm = e.row(r).norm();
      if (nrm > 0.0) e.row(r) /= nrm;
    }
  if (!e.allFinite()) throw Error("pretrain: non-finite embedding values");
  return {std::move(e), EmbeddingSource::pretrained};
}

// Layout: i64 node_count | i64 dim | float32 values, row-major.
inline void write_embeddings(const EmbeddingTable& t, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  detail::put<std::int64_t>(out, static_cast<std::int64_t>(t.node_count()));
  detail::put<std::int64_t>(out, t.dim());
  for (Eigen::Index r = 0; r < t.values.rows(); ++r)
    for (Eigen::Index c = 0; c < t.values.cols(); ++c) detail::put<float>(out, static_cast<float>(t.values(r, c)));
  if (!out) throw Error("write failed for " + path);
}

inline EmbeddingTable read_embeddings(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open embedding table " + path);
  const auto n = detail::get<std::int64_t>(in);
  const auto d = detail::get<std::int64_t>(in);
  if (n < 0 || d < 1) throw Error(path + ": bad embedding header");
  EmbeddingTable t;
  t.values.resize(n, d);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < d; ++c) t.values(r, c) = detail::get<float>(in);
  t.source = EmbeddingSource::pretrained;
  return t;
}

inline void write_layout_manifest(const FeatureLayout& l, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << l.to_json().dump(2) << '\n';
}

inline FeatureLayout read_layout_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open layout manifest " + path);
  return FeatureLayout::from_json(nlohmann::json::parse(in));
}

}  // namespace diffuse
