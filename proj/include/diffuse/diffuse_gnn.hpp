#pragma once

// The prediction network: FM cross span -> spectral smoothing -> chain of
// attention-based coarsening blocks -> per-level readout -> MLP head.
//
// Every step is recorded on an ad::GradientTape so one backward pass yields
// gradients for all trainable tensors, including the filter center mu.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "diffuse/autodiff.hpp"
#include "diffuse/ego_sampler.hpp"
#include "diffuse/error.hpp"
#include "diffuse/feature_builder.hpp"
#include "diffuse/spectral_filter.hpp"

namespace diffuse {

using ad::GradientTape;
using ad::Matrix;
using ad::Var;

enum class AttentionKind { additive, dot };
enum class ReadoutMode { max, sum };

inline const char* to_string(AttentionKind k) { return k == AttentionKind::additive ? "AA" : "DA"; }
inline AttentionKind attention_from_string(const std::string& s) {
  if (s == "AA" || s == "additive") return AttentionKind::additive;
  if (s == "DA" || s == "dot") return AttentionKind::dot;
  throw Error("unknown attention '" + s + "' (expected AA|DA)");
}
inline const char* to_string(ReadoutMode r) { return r == ReadoutMode::max ? "max" : "sum"; }
inline ReadoutMode readout_from_string(const std::string& s) {
  if (s == "max") return ReadoutMode::max;
  if (s == "sum") return ReadoutMode::sum;
  throw Error("unknown readout '" + s + "' (expected max|sum)");
}

struct ModelConfig {
  int m = 32;
  AttentionKind attention = AttentionKind::additive;
  int heads = 8;
  int head_dim = 16;
  double leaky_slope = 0.2;
  int coarsen_steps = 2;
  double pool_ratio = 0.5;
  int gnn_depth = 1;
  bool include_coarsest = true;
  ReadoutMode readout = ReadoutMode::max;
  int hidden = 64;
  bool smoothing = true;
  FilterParams filter;
  FeatureOptions features;
  int embed_dim = 64;

  /// Cluster counts m_0 > m_1 > ... > m_L, each about pool_ratio of the last.
  std::vector<int> cluster_chain() const {
    std::vector<int> chain{m};
    for (int k = 0; k < coarsen_steps; ++k) {
      const int prev = chain.back();
      int next = static_cast<int>(std::ceil(prev * pool_ratio - 1e-9));
      next = std::clamp(next, 1, prev - 1);
      chain.push_back(next);
    }
    return chain;
  }

  void validate() const {
    if (m < 2) throw Error("model: m must be >= 2");
    if (heads < 1 || head_dim < 1) throw Error("model: heads and head_dim must be >= 1");
    if (coarsen_steps < 0) throw Error("model: coarsen_steps must be >= 0");
    if (!(pool_ratio > 0.0 && pool_ratio < 1.0)) throw Error("model: pool_ratio must be in (0,1)");
    if (gnn_depth < 1) throw Error("model: gnn_depth must be >= 1");
    if (hidden < 1) throw Error("model: hidden must be >= 1");
    if (coarsen_steps == 0 && !include_coarsest) throw Error("model: no readout level");
    if (m < (1 << coarsen_steps)) throw Error("model: m too small for coarsen_steps");
    filter.validate();
  }

  nlohmann::json to_json() const {
    return {{"m", m},
            {"attention", to_string(attention)},
            {"heads", heads},
            {"head_dim", head_dim},
            {"leaky_slope", leaky_slope},
            {"coarsen_steps", coarsen_steps},
            {"pool_ratio", pool_ratio},
            {"gnn_depth", gnn_depth},
            {"include_coarsest", include_coarsest},
            {"readout", to_string(readout)},
            {"hidden", hidden},
            {"smoothing", smoothing},
            {"filter",
             {{"mu", filter.mu}, {"theta", filter.theta}, {"cheb_order", filter.cheb_order},
              {"mode", to_string(filter.mode)}}},
            {"features",
             {{"node_features", features.node_features},
              {"pretrain", features.pretrain},
              {"second_order", features.second_order},
              {"cross_dim", features.cross_dim},
              {"cross_spans", features.cross_spans}}},
            {"embed_dim", embed_dim}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.m = j.at("m");
    c.attention = attention_from_string(j.at("attention"));
    c.heads = j.at("heads");
    c.head_dim = j.at("head_dim");
    c.leaky_slope = j.at("leaky_slope");
    c.coarsen_steps = j.at("coarsen_steps");
    c.pool_ratio = j.at("pool_ratio");
    c.gnn_depth = j.at("gnn_depth");
    c.include_coarsest = j.at("include_coarsest");
    c.readout = readout_from_string(j.at("readout"));
    c.hidden = j.at("hidden");
    c.smoothing = j.at("smoothing");
    const auto& f = j.at("filter");
    c.filter.mu = f.at("mu");
    c.filter.theta = f.at("theta");
    c.filter.cheb_order = f.at("cheb_order");
    c.filter.mode = smoothing_mode_from_string(f.at("mode"));
    const auto& ft = j.at("features");
    c.features.node_features = ft.at("node_features");
    c.features.pretrain = ft.at("pretrain");
    c.features.second_order = ft.at("second_order");
    c.features.cross_dim = ft.at("cross_dim");
    c.features.cross_spans = ft.at("cross_spans").get<std::vector<std::string>>();
    c.embed_dim = j.at("embed_dim");
    return c;
  }
};

struct Tensor {
  std::string name;
  Matrix value;
};

/// Indices into ModelParams::tensors. b_src/b_dst are -1 for additive attention.
struct AttentionLayerParams {
  int w = -1, a_src = -1, a_dst = -1, b_src = -1, b_dst = -1;
  int in_dim = 0, heads = 1, head_dim = 1;
  bool activate = true;  // ELU on the output
  int out_dim() const { return heads * head_dim; }
};

struct PoolBlockParams {
  std::vector<AttentionLayerParams> embed_gnn;
  std::vector<AttentionLayerParams> pool_gnn;
  int in_clusters = 0;
  int out_clusters = 0;
};

struct ModelParams {
  ModelConfig config;
  FeatureLayout first_order;
  FeatureLayout layout;  // first_order plus cross span
  std::vector<Tensor> tensors;

  int mu = -1;
  std::vector<std::string> fm_spans;
  std::vector<int> fm;
  std::vector<PoolBlockParams> blocks;
  std::vector<AttentionLayerParams> final_embed;
  int fc1_w = -1, fc1_b = -1, fc2_w = -1, fc2_b = -1;

  double filter_mu() const { return tensors.at(mu).value(0, 0); }
  FilterParams filter() const {
    auto f = config.filter;
    f.mu = filter_mu();
    return f;
  }
  int readout_width() const {
    const int levels = config.coarsen_steps + (config.include_coarsest ? 1 : 0);
    return levels * config.heads * config.head_dim;
  }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.value.size());
    return n;
  }
  int find(const std::string& name) const {
    for (std::size_t i = 0; i < tensors.size(); ++i)
      if (tensors[i].name == name) return static_cast<int>(i);
    return -1;
  }

  static ModelParams init(const ModelConfig& cfg, const FeatureLayout& first_order, std::uint64_t seed) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    p.first_order = first_order;
    p.layout = first_order;
    if (cfg.features.second_order) p.layout.append(kCrossSpan, cfg.features.cross_dim);
    std::mt19937_64 rng(seed);

    auto glorot = [&](const std::string& name, int rows, int cols, int fan_in, int fan_out) {
      const double bound = std::sqrt(6.0 / (fan_in + fan_out));
      std::uniform_real_distribution<double> u(-bound, bound);
      Matrix m(rows, cols);
      for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = u(rng);
      p.tensors.push_back({name, std::move(m)});
      return static_cast<int>(p.tensors.size()) - 1;
    };
    auto zeros = [&](const std::string& name, int rows, int cols) {
      p.tensors.push_back({name, Matrix::Zero(rows, cols)});
      return static_cast<int>(p.tensors.size()) - 1;
    };
    auto layer = [&](const std::string& prefix, int in, int heads, int head_dim, bool activate) {
      AttentionLayerParams l;
      l.in_dim = in;
      l.heads = heads;
      l.head_dim = head_dim;
      l.activate = activate;
      l.w = glorot(prefix + ".W_p", in, heads * head_dim, in, heads * head_dim);
      l.a_src = glorot(prefix + ".a_src", heads, head_dim, head_dim, 1);
      l.a_dst = glorot(prefix + ".a_dst", heads, head_dim, head_dim, 1);
      if (cfg.attention == AttentionKind::dot) {
        l.b_src = zeros(prefix + ".b_src", 1, heads);
        l.b_dst = zeros(prefix + ".b_dst", 1, heads);
      }
      return l;
    };
    auto stack = [&](const std::string& prefix, int in, int final_heads, int final_dim, bool final_activate) {
      std::vector<AttentionLayerParams> s;
      for (int d = 0; d < cfg.gnn_depth; ++d) {
        const bool last = d + 1 == cfg.gnn_depth;
        s.push_back(layer(prefix + "." + std::to_string(d), in, last ? final_heads : cfg.heads,
                          last ? final_dim : cfg.head_dim, last ? final_activate : true));
        in = s.back().out_dim();
      }
      return s;
    };

    p.tensors.push_back({"filter.mu", Matrix::Constant(1, 1, cfg.filter.mu)});
    p.mu = 0;
    if (cfg.features.second_order) {
      p.fm_spans = cross_inputs(cfg.features, first_order);
      for (const auto& name : p.fm_spans) {
        const auto& s = first_order.at(name);
        p.fm.push_back(glorot("fm." + name, s.width, cfg.features.cross_dim, s.width, cfg.features.cross_dim));
      }
    }
    const auto chain = cfg.cluster_chain();
    const int hidden_width = cfg.heads * cfg.head_dim;
    int in = p.layout.width();
    for (int k = 0; k < cfg.coarsen_steps; ++k) {
      PoolBlockParams b;
      b.in_clusters = chain[k];
      b.out_clusters = chain[k + 1];
      const std::string pre = "block" + std::to_string(k);
      b.embed_gnn = stack(pre + ".embed", in, cfg.heads, cfg.head_dim, true);
      b.pool_gnn = stack(pre + ".pool", in, 1, b.out_clusters, false);
      p.blocks.push_back(std::move(b));
      in = hidden_width;
    }
    if (cfg.include_coarsest) p.final_embed = stack("final.embed", in, cfg.heads, cfg.head_dim, true);
    const int r = p.readout_width();
    p.fc1_w = glorot("head.fc1.W", r, cfg.hidden, r, cfg.hidden);
    p.fc1_b = zeros("head.fc1.b", 1, cfg.hidden);
    p.fc2_w = glorot("head.fc2.W", cfg.hidden, 1, cfg.hidden, 1);
    p.fc2_b = zeros("head.fc2.b", 1, 1);
    return p;
  }
};

using Gradients = std::vector<Matrix>;

inline Gradients zero_gradients(const ModelParams& p) {
  Gradients g;
  g.reserve(p.tensors.size());
  for (const auto& t : p.tensors) g.push_back(Matrix::Zero(t.value.rows(), t.value.cols()));
  return g;
}

/// Binds each tensor to a single parameter leaf per tape.
class ParamBinder {
 public:
  ParamBinder(GradientTape& t, const ModelParams& p) : tape_(&t), params_(&p), vars_(p.tensors.size()) {}
  Var operator()(int index) {
    if (index < 0) return {};
    auto& v = vars_.at(index);
    if (!v.valid()) v = tape_->parameter(index, params_->tensors[index].value);
    return v;
  }

 private:
  GradientTape* tape_;
  const ModelParams* params_;
  std::vector<Var> vars_;
};

// --- attention ---------------------------------------------------------------------

/// Neighborhood mask: entries with positive weight plus self-loops on rows
/// whose row_mask is set. Rows with row_mask false get no neighbors at all.
inline ad::BoolMatrix neighbor_mask(const Matrix& adjacency, const std::vector<std::uint8_t>& row_mask) {
  const auto m = adjacency.rows();
  ad::BoolMatrix nb(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j)
      nb(i, j) = row_mask[i] && row_mask[j] && (i == j || adjacency(i, j) > 0.0);
  return nb;
}

/// Multi-head graph attention (pre-activation). For head h with projected
/// rows p_i = (x_i W)_h, s_i = a_src_h . p_i and t_j = a_dst_h . p_j:
///   additive: e_ij = s_i + t_j
///   dot:      e_ij = (s_i + b_src_h) * (t_j + b_dst_h)
/// alpha_ij = softmax_{j in N(i)} leaky_relu(e_ij); output_i = sum_j alpha_ij p_j.
inline Var attention(GradientTape& t, Var x, Var w, Var a_src, Var a_dst, Var b_src, Var b_dst,
                     AttentionKind kind, int heads, int head_dim, double slope, const ad::BoolMatrix& nb,
                     std::vector<Matrix>* alpha_out = nullptr) {
  const Matrix& vx = t.value(x);
  const Matrix& vw = t.value(w);
  const auto m = vx.rows();
  const int width = heads * head_dim;
  if (vx.cols() != vw.rows() || vw.cols() != width) throw Error("attention: projection shape mismatch");
  if (t.value(a_src).rows() != heads || t.value(a_src).cols() != head_dim || t.value(a_dst).rows() != heads ||
      t.value(a_dst).cols() != head_dim)
    throw Error("attention: attention vectors must be heads x head_dim");
  if (nb.rows() != m || nb.cols() != m) throw Error("attention: neighbor mask shape mismatch");
  const bool dot = kind == AttentionKind::dot;
  if (dot && (!b_src.valid() || !b_dst.valid())) throw Error("attention: dot attention needs biases");

  Matrix proj = vx * vw;
  std::vector<Matrix> alpha(heads), logits(heads);
  std::vector<Eigen::VectorXd> us(heads), vs(heads);
  Matrix out(m, width);
  for (int h = 0; h < heads; ++h) {
    auto ph = proj.middleCols(h * head_dim, head_dim);
    Eigen::VectorXd s = ph * t.value(a_src).row(h).transpose();
    Eigen::VectorXd d = ph * t.value(a_dst).row(h).transpose();
    Matrix e(m, m);
    if (dot) {
      s.array() += t.value(b_src)(0, h);
      d.array() += t.value(b_dst)(0, h);
      e = s * d.transpose();
    } else {
      e = s.replicate(1, m) + d.transpose().replicate(m, 1);
    }
    Matrix a = Matrix::Zero(m, m);
    for (Eigen::Index i = 0; i < m; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < m; ++j)
        if (nb(i, j)) {
          const double l = e(i, j) > 0.0 ? e(i, j) : slope * e(i, j);
          a(i, j) = l;
          mx = std::max(mx, l);
        }
      if (mx == -std::numeric_limits<double>::infinity()) continue;
      double z = 0.0;
      for (Eigen::Index j = 0; j < m; ++j)
        if (nb(i, j)) {
          a(i, j) = std::exp(a(i, j) - mx);
          z += a(i, j);
        }
      a.row(i) /= z;
    }
    out.middleCols(h * head_dim, head_dim).noalias() = a * ph;
    alpha[h] = std::move(a);
    logits[h] = std::move(e);
    us[h] = std::move(s);
    vs[h] = std::move(d);
  }
  if (alpha_out) *alpha_out = alpha;

  return t.record(
      std::move(out), {x, w, a_src, a_dst, b_src, b_dst},
      [=, proj = std::move(proj), alpha = std::move(alpha), logits = std::move(logits), us = std::move(us),
       vs = std::move(vs), out = Var{static_cast<int>(t.size())}](GradientTape& t) {
        const Matrix& g = t.grad(out);
        Matrix dproj = Matrix::Zero(m, width);
        const Matrix& va_src = t.value(a_src);
        const Matrix& va_dst = t.value(a_dst);
        for (int h = 0; h < heads; ++h) {
          auto ph = proj.middleCols(h * head_dim, head_dim);
          auto gh = g.middleCols(h * head_dim, head_dim);
          const Matrix& a = alpha[h];
          Matrix dalpha = gh * ph.transpose();
          dproj.middleCols(h * head_dim, head_dim).noalias() += a.transpose() * gh;
          Eigen::VectorXd rowdot = a.cwiseProduct(dalpha).rowwise().sum();
          Matrix de = Matrix::Zero(m, m);
          for (Eigen::Index i = 0; i < m; ++i)
            for (Eigen::Index j = 0; j < m; ++j)
              if (nb(i, j)) {
                const double dl = a(i, j) * (dalpha(i, j) - rowdot(i));
                de(i, j) = logits[h](i, j) > 0.0 ? dl : slope * dl;
              }
          Eigen::VectorXd ds, dd;
          if (dot) {
            ds = de * vs[h];
            dd = de.transpose() * us[h];
            if (t.requires_grad(b_src)) t.grad(b_src)(0, h) += ds.sum();
            if (t.requires_grad(b_dst)) t.grad(b_dst)(0, h) += dd.sum();
          } else {
            ds = de.rowwise().sum();
            dd = de.colwise().sum().transpose();
          }
          if (t.requires_grad(a_src)) t.grad(a_src).row(h) += ds.transpose() * ph;
          if (t.requires_grad(a_dst)) t.grad(a_dst).row(h) += dd.transpose() * ph;
          dproj.middleCols(h * head_dim, head_dim).noalias() += ds * va_src.row(h) + dd * va_dst.row(h);
        }
        if (t.requires_grad(w)) t.grad(w).noalias() += t.value(x).transpose() * dproj;
        if (t.requires_grad(x)) t.grad(x).noalias() += dproj * t.value(w).transpose();
      });
}

/// Plain weights for calling the attention layer outside a model.
struct AttentionWeights {
  Matrix w, a_src, a_dst;
  Matrix b_src, b_dst;  // 1 x heads, dot attention only
  int heads = 1;
  int head_dim = 1;
  double slope = 0.2;
};

struct AttentionResult {
  Matrix output;              // after ELU
  std::vector<Matrix> alpha;  // per head, m x m
};

namespace detail {
inline AttentionResult run_attention(const AttentionWeights& p, AttentionKind kind, const Matrix& adjacency,
                                     const Matrix& x, const std::vector<std::uint8_t>& row_mask) {
  GradientTape t;
  auto nb = neighbor_mask(adjacency, row_mask);
  const bool dot = kind == AttentionKind::dot;
  Var out = attention(t, t.constant(x), t.constant(p.w), t.constant(p.a_src), t.constant(p.a_dst),
                      dot ? t.constant(p.b_src) : Var{}, dot ? t.constant(p.b_dst) : Var{}, kind, p.heads,
                      p.head_dim, p.slope, nb);
  AttentionResult r;
  GradientTape t2;
  r.output = t.value(ad::elu(t, out));
  attention(t2, t2.constant(x), t2.constant(p.w), t2.constant(p.a_src), t2.constant(p.a_dst),
            dot ? t2.constant(p.b_src) : Var{}, dot ? t2.constant(p.b_dst) : Var{}, kind, p.heads, p.head_dim,
            p.slope, nb, &r.alpha);
  return r;
}
}  // namespace detail

/// Additive (GAT-style) attention layer over `adjacency` plus self-loops.
inline AttentionResult attention_additive(const AttentionWeights& p, const Matrix& adjacency, const Matrix& x,
                                          std::vector<std::uint8_t> row_mask = {}) {
  if (row_mask.empty()) row_mask.assign(static_cast<std::size_t>(x.rows()), 1);
  return detail::run_attention(p, AttentionKind::additive, adjacency, x, row_mask);
}

/// Dot attention layer: logits are products of biased source/target scores.
inline AttentionResult attention_dot(const AttentionWeights& p, const Matrix& adjacency, const Matrix& x,
                                     std::vector<std::uint8_t> row_mask = {}) {
  if (row_mask.empty()) row_mask.assign(static_cast<std::size_t>(x.rows()), 1);
  return detail::run_attention(p, AttentionKind::dot, adjacency, x, row_mask);
}

// --- smoothing on the tape ----------------------------------------------------------

/// X0 = P (X - g(L) X) with gradients for X and mu.
inline Var smooth_op(GradientTape& t, Var x, Var mu, const LaplacianBundle& lb, FilterParams fp) {
  fp.mu = t.scalar(mu);
  const Matrix& vx = t.value(x);
  if (vx.rows() != lb.size()) throw Error("smoothing: feature rows differ from graph size");
  const Matrix& p = lb.propagation;
  if (fp.mode == SmoothingMode::exact) {
    Matrix dk;
    Matrix k = kernel_matrix(lb, fp, &dk);
    Matrix y = p * (vx - k * vx);
    return t.record(std::move(y), {x, mu},
                    [x, mu, p, k = std::move(k), dk = std::move(dk), out = Var{static_cast<int>(t.size())}](
                        GradientTape& t) {
                      const Matrix h = p.transpose() * t.grad(out);
                      if (t.requires_grad(x)) t.grad(x) += h - k.transpose() * h;
                      if (t.requires_grad(mu)) t.grad(mu)(0, 0) -= h.cwiseProduct(dk * t.value(x)).sum();
                    });
  }
  const auto coeffs = chebyshev_coefficients(fp);
  auto basis = chebyshev_basis(p, vx, fp.cheb_order);
  Matrix gx = Matrix::Zero(vx.rows(), vx.cols());
  for (int j = 0; j <= fp.cheb_order; ++j) gx += coeffs.c(j) * basis[j];
  Matrix y = p * (vx - gx);
  return t.record(std::move(y), {x, mu},
                  [x, mu, p, coeffs, basis = std::move(basis), out = Var{static_cast<int>(t.size())}](
                      GradientTape& t) {
                    const Matrix h = p.transpose() * t.grad(out);
                    if (t.requires_grad(x)) t.grad(x) += h - chebyshev_apply(p.transpose(), coeffs.c, h);
                    if (t.requires_grad(mu)) {
                      double d = 0.0;
                      for (std::size_t j = 0; j < basis.size(); ++j)
                        d -= coeffs.dc(static_cast<Eigen::Index>(j)) * h.cwiseProduct(basis[j]).sum();
                      t.grad(mu)(0, 0) += d;
                    }
                  });
}

/// Constant factor applied to the smoothed features: the reciprocal of the
/// kernel's peak value exp(theta / 2). The next operation is a linear
/// projection, so this only conditions the optimization.
inline double smoothing_gain(const FilterParams& fp) { return fp.force_zero_kernel ? 1.0 : std::exp(-0.5 * fp.theta); }

// --- coarsening ------------------------------------------------------------------------

struct PoolBlockOutput {
  Var z, assignment, a_next, x_next;
};

namespace detail {
inline Var run_stack(GradientTape& t, ParamBinder& bind, const std::vector<AttentionLayerParams>& stack,
                     const ModelConfig& cfg, Var x, const ad::BoolMatrix& nb) {
  for (const auto& l : stack) {
    Var h = attention(t, x, bind(l.w), bind(l.a_src), bind(l.a_dst), bind(l.b_src), bind(l.b_dst), cfg.attention,
                      l.heads, l.head_dim, cfg.leaky_slope, nb);
    x = l.activate ? ad::elu(t, h) : h;
  }
  return x;
}
}  // namespace detail

/// One coarsening step: z = GNN_embed(a, x), B = row-softmax(GNN_pool(a, x)),
/// x_next = B^T z, a_next = B^T a B. Rows with row_mask false get zero
/// assignment. `forced_assignment` replaces B (test hook).
inline PoolBlockOutput pool_block(GradientTape& t, ParamBinder& bind, const PoolBlockParams& block,
                                  const ModelConfig& cfg, Var a, Var x, const std::vector<std::uint8_t>& row_mask,
                                  const Matrix* forced_assignment = nullptr) {
  const Matrix& va = t.value(a);
  if (va.rows() != block.in_clusters || va.cols() != block.in_clusters || t.value(x).rows() != block.in_clusters)
    throw Error("pool_block: expected " + std::to_string(block.in_clusters) + " input clusters");
  auto nb = neighbor_mask(va, row_mask);
  PoolBlockOutput o;
  o.z = detail::run_stack(t, bind, block.embed_gnn, cfg, x, nb);
  if (forced_assignment) {
    o.assignment = t.constant(*forced_assignment);
  } else {
    Var logits = detail::run_stack(t, bind, block.pool_gnn, cfg, x, nb);
    o.assignment = ad::softmax_rows(t, logits, row_mask);
  }
  Var bt = ad::transpose(t, o.assignment);
  o.x_next = ad::matmul(t, bt, o.z);
  o.a_next = ad::matmul(t, ad::matmul(t, bt, a), o.assignment);
  return o;
}

/// Concatenation over levels of column-wise max (or sum); mask applies to
/// the first level only.
inline Var readout(GradientTape& t, const std::vector<Var>& levels, ReadoutMode mode,
                   const std::vector<std::uint8_t>& first_mask) {
  if (levels.empty()) throw Error("readout: no levels");
  std::vector<Var> parts;
  for (std::size_t k = 0; k < levels.size(); ++k) {
    std::vector<std::uint8_t> mask = k == 0 ? first_mask : std::vector<std::uint8_t>{};
    parts.push_back(mode == ReadoutMode::max ? ad::readout_max(t, levels[k], mask)
                                             : ad::readout_sum(t, levels[k], mask));
  }
  return parts.size() == 1 ? parts[0] : ad::concat_cols(t, parts);
}

inline Matrix readout(const std::vector<Matrix>& levels, ReadoutMode mode,
                      const std::vector<std::uint8_t>& first_mask = {}) {
  GradientTape t;
  std::vector<Var> vars;
  for (const auto& l : levels) vars.push_back(t.constant(l));
  return t.value(readout(t, vars, mode, first_mask));
}

// --- full model ------------------------------------------------------------------------

struct ForwardTrace {
  std::vector<int> cluster_sizes;
  std::vector<Matrix> assignments;
  std::vector<Matrix> adjacencies;
  Matrix smoothed;
  Matrix graph_embedding;
};

/// Records the full forward pass and returns the output logit (1x1).
inline Var forward_logit(GradientTape& t, const ModelParams& model, const EgoInstance& e, const FeatureMatrix& features,
                   ForwardTrace* trace = nullptr) {
  const auto& cfg = model.config;
  if (!(features.layout == model.first_order)) throw Error("forward: feature layout does not match the model");
  if (e.size() != cfg.m) throw Error("forward: instance size differs from model m");
  ParamBinder bind(t, model);

  Var x1 = t.constant(features.values);
  Var x = x1;
  if (cfg.features.second_order) {
    Var sum{}, sq{};
    for (std::size_t i = 0; i < model.fm.size(); ++i) {
      const auto& s = model.first_order.at(model.fm_spans[i]);
      Var v = ad::matmul(t, ad::slice_cols(t, x1, s.offset, s.width), bind(model.fm[i]));
      Var v2 = ad::square(t, v);
      sum = sum.valid() ? ad::add(t, sum, v) : v;
      sq = sq.valid() ? ad::add(t, sq, v2) : v2;
    }
    Var cross = sum.valid() ? ad::scale(t, ad::sub(t, ad::square(t, sum), sq), 0.5)
                            : t.constant(Matrix::Zero(cfg.m, cfg.features.cross_dim));
    x = ad::concat_cols(t, {x1, cross});
  }

  const Matrix adj = e.adjacency.cast<double>();
  if (cfg.smoothing) {
    auto lb = build_laplacian(adj);
    if (cfg.filter.mode == SmoothingMode::exact) compute_eigenpairs(lb);
    x = ad::scale(t, smooth_op(t, x, bind(model.mu), lb, cfg.filter), smoothing_gain(cfg.filter));
  }
  if (trace) trace->smoothed = t.value(x);

  Var a = t.constant(adj);
  std::vector<std::uint8_t> mask = e.mask;
  std::vector<Var> levels;
  if (trace) trace->cluster_sizes.push_back(cfg.m);
  for (const auto& block : model.blocks) {
    auto o = pool_block(t, bind, block, cfg, a, x, mask);
    levels.push_back(o.z);
    if (trace) {
      trace->assignments.push_back(t.value(o.assignment));
      trace->adjacencies.push_back(t.value(o.a_next));
      trace->cluster_sizes.push_back(block.out_clusters);
    }
    a = o.a_next;
    x = o.x_next;
    mask.assign(static_cast<std::size_t>(block.out_clusters), 1);
  }
  if (cfg.include_coarsest) {
    auto nb = neighbor_mask(t.value(a), mask);
    levels.push_back(detail::run_stack(t, bind, model.final_embed, cfg, x, nb));
  }
  Var zg = readout(t, levels, cfg.readout, e.mask);
  if (trace) trace->graph_embedding = t.value(zg);
  Var h = ad::relu(t, ad::add_row(t, ad::matmul(t, zg, bind(model.fc1_w)), bind(model.fc1_b)));
  return ad::add_row(t, ad::matmul(t, h, bind(model.fc2_w)), bind(model.fc2_b));
}

/// Predicted probability sigmoid(forward_logit) as a 1x1 variable.
inline Var forward(GradientTape& t, const ModelParams& model, const EgoInstance& e, const FeatureMatrix& features,
                   ForwardTrace* trace = nullptr) {
  return ad::sigmoid(t, forward_logit(t, model, e, features, trace));
}

inline double predict(const ModelParams& model, const EgoInstance& e, const FeatureMatrix& features) {
  GradientTape t;
  return t.scalar(forward(t, model, e, features));
}

inline double loss_bce(double pred, int label) { return ad::bce(pred, label); }

/// Summed loss over a batch; gradients accumulated into `grads`.
inline double batch_loss_and_gradients(const ModelParams& model, std::span<const EgoInstance* const> batch,
                                       std::span<const FeatureMatrix> features, Gradients& grads) {
  if (grads.size() != model.tensors.size()) grads = zero_gradients(model);
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    GradientTape t;
    Var z = forward_logit(t, model, *batch[i], features[i]);
    Var l = ad::bce_with_logits(t, z, batch[i]->label);
    total += t.scalar(l);
    t.backward(l, grads);
  }
  return total;
}

// --- optimizer ---------------------------------------------------------------------------

struct AdagradState {
  std::vector<Matrix> accum;
};

inline constexpr double kAdagradEps = 1e-10;

/// g' = g + l2 * p; acc += g'^2; p -= lr * g' / sqrt(acc + eps); then mu is
/// projected onto [0, 2]. mu carries no L2 term.
inline void adagrad_step(ModelParams& model, const Gradients& grads, double lr, double l2, AdagradState& state) {
  if (grads.size() != model.tensors.size()) throw Error("adagrad: gradient count differs from parameters");
  if (state.accum.size() != model.tensors.size()) {
    state.accum.clear();
    for (const auto& t : model.tensors) state.accum.push_back(Matrix::Zero(t.value.rows(), t.value.cols()));
  }
  for (std::size_t i = 0; i < model.tensors.size(); ++i) {
    auto& p = model.tensors[i].value;
    if (grads[i].rows() != p.rows() || grads[i].cols() != p.cols()) throw Error("adagrad: gradient shape mismatch");
    const Matrix g = static_cast<int>(i) == model.mu ? grads[i] : Matrix(grads[i] + l2 * p);
    state.accum[i] += g.cwiseAbs2();
    p.array() -= lr * g.array() / (state.accum[i].array() + kAdagradEps).sqrt();
  }
  auto& mu = model.tensors[model.mu].value(0, 0);
  mu = std::clamp(mu, 0.0, 2.0);
}

// --- checkpoint ------------------------------------------------------------------------------
//
// "DGNNCKPT" | u32 version(=1) | u64 layout hash | u32 json length | config JSON
// | u32 tensor count | per tensor: u32 name length, name, i64 rows, i64 cols, f64 values (col-major)

inline std::uint64_t layout_hash(const FeatureLayout& l) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : l.to_json().dump()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline void save_checkpoint(const ModelParams& model, const nlohmann::json& extra, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out.write("DGNNCKPT", 8);
  detail::put<std::uint32_t>(out, 1);
  detail::put<std::uint64_t>(out, layout_hash(model.first_order));
  nlohmann::json meta = {{"config", model.config.to_json()},
                         {"first_order_layout", model.first_order.to_json()},
                         {"extra", extra}};
  const auto s = meta.dump();
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(model.tensors.size()));
  for (const auto& t : model.tensors) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put<std::int64_t>(out, t.value.rows());
    detail::put<std::int64_t>(out, t.value.cols());
    out.write(reinterpret_cast<const char*>(t.value.data()), static_cast<std::streamsize>(t.value.size() * sizeof(double)));
  }
  if (!out) throw Error("write failed for " + path);
}

struct Checkpoint {
  ModelParams model;
  nlohmann::json extra;
};

/// Loads a checkpoint; refuses when the stored feature layout hash differs
/// from `expected` (if given).
inline Checkpoint load_checkpoint(const std::string& path, const FeatureLayout* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, "DGNNCKPT", 8) != 0) throw Error(path + ": not a checkpoint");
  if (detail::get<std::uint32_t>(in) != 1) throw Error(path + ": unsupported checkpoint version");
  const auto hash = detail::get<std::uint64_t>(in);
  if (expected && layout_hash(*expected) != hash)
    throw Error(path + ": feature layout manifest does not match this checkpoint");
  std::string s(detail::get<std::uint32_t>(in), '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(s.size()))) throw Error(path + ": truncated");
  const auto meta = nlohmann::json::parse(s);
  const auto cfg = ModelConfig::from_json(meta.at("config"));
  const auto layout = FeatureLayout::from_json(meta.at("first_order_layout"));
  if (layout_hash(layout) != hash) throw Error(path + ": corrupt layout hash");
  Checkpoint ck{ModelParams::init(cfg, layout, 0), meta.value("extra", nlohmann::json::object())};
  const auto count = detail::get<std::uint32_t>(in);
  if (count != ck.model.tensors.size()) throw Error(path + ": tensor count differs from configuration");
  for (auto& t : ck.model.tensors) {
    std::string name(detail::get<std::uint32_t>(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto r = detail::get<std::int64_t>(in);
    const auto c = detail::get<std::int64_t>(in);
    if (name != t.name || r != t.value.rows() || c != t.value.cols()) throw Error(path + ": tensor '" + name + "' mismatch");
    if (!in.read(reinterpret_cast<char*>(t.value.data()), static_cast<std::streamsize>(t.value.size() * sizeof(double))))
      throw Error(path + ": truncated");
  }
  return ck;
}

}  // namespace diffuse
