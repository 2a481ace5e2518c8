#pragma once

// Metrics, class rebalancing, the mini-batch training loop with early
// stopping, and the logistic-regression baseline over hand-crafted features.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "diffuse/diffuse_gnn.hpp"
#include "diffuse/ego_sampler.hpp"
#include "diffuse/error.hpp"
#include "diffuse/feature_builder.hpp"
#include "diffuse/graph_core.hpp"

namespace diffuse {

// --- metrics -----------------------------------------------------------------------

namespace detail {
inline void check_labels(std::span<const double> scores, std::span<const int> labels, const char* what) {
  if (scores.size() != labels.size()) throw Error(std::string(what) + ": scores and labels differ in length");
}
}  // namespace detail

/// Average ranks (1-based), ties share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

/// Mann-Whitney AUC with average ranks for ties.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_labels(scores, labels, "auc");
  double n_pos = 0, n_neg = 0, rank_sum = 0;
  const auto r = average_ranks(scores);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) {
      n_pos += 1;
      rank_sum += r[i];
    } else {
      n_neg += 1;
    }
  }
  if (n_pos == 0 || n_neg == 0) throw Error("auc: both classes must be present");
  return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg);
}

struct PRF1 {
  double precision = 0, recall = 0, f1 = 0;
};

/// Positive prediction when score >= threshold.
inline PRF1 prf1(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5) {
  detail::check_labels(scores, labels, "prf1");
  if (!(threshold > 0.0 && threshold < 1.0)) throw Error("prf1: threshold must be in (0,1)");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (pred && labels[i]) tp += 1;
    else if (pred) fp += 1;
    else if (labels[i]) fn += 1;
  }
  PRF1 r;
  r.precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  r.recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

/// Threshold in (0,1) maximizing F1; candidates are midpoints between
/// consecutive distinct scores.
inline double tune_threshold(std::span<const double> scores, std::span<const int> labels) {
  detail::check_labels(scores, labels, "tune_threshold");
  std::vector<double> s(scores.begin(), scores.end());
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  double best_t = 0.5, best_f1 = prf1(scores, labels, 0.5).f1;
  const std::size_t step = std::max<std::size_t>(1, s.size() / 400);
  for (std::size_t i = 0; i + 1 < s.size(); i += step) {
    const double t = 0.5 * (s[i] + s[i + 1]);
    if (!(t > 0.0 && t < 1.0)) continue;
    const double f = prf1(scores, labels, t).f1;
    if (f > best_f1) {
      best_f1 = f;
      best_t = t;
    }
  }
  return best_t;
}

struct EpochStat {
  int epoch = 0;
  double train_loss = 0.0;
  double val_auc = 0.0;
};

struct MetricsReport {
  double precision = 0, recall = 0, f1 = 0, auc = 0;
  double threshold = 0.5;
  PRF1 tuned;
  double tuned_threshold = 0.5;
  std::vector<EpochStat> loss_trace;
  int best_epoch = 0;

  nlohmann::json to_json() const {
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& e : loss_trace)
      trace.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_auc", e.val_auc}});
    return {{"precision", precision},
            {"recall", recall},
            {"f1", f1},
            {"auc", auc},
            {"threshold", threshold},
            {"tuned", {{"precision", tuned.precision}, {"recall", tuned.recall}, {"f1", tuned.f1},
                       {"threshold", tuned_threshold}}},
            {"best_epoch", best_epoch},
            {"loss_trace", trace}};
  }
};

inline MetricsReport evaluate_scores(std::span<const double> scores, std::span<const int> labels,
                                     double tuned_threshold = 0.5) {
  MetricsReport r;
  r.auc = auc(scores, labels);
  const auto fixed = prf1(scores, labels, 0.5);
  r.precision = fixed.precision;
  r.recall = fixed.recall;
  r.f1 = fixed.f1;
  r.tuned_threshold = tuned_threshold;
  r.tuned = prf1(scores, labels, tuned_threshold);
  return r;
}

inline void write_loss_trace_csv(const MetricsReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "epoch,train_loss,val_auc\n";
  out.precision(17);
  for (const auto& e : r.loss_trace) out << e.epoch << ',' << e.train_loss << ',' << e.val_auc << '\n';
}

// --- rebalancing ---------------------------------------------------------------------

/// Keeps every positive and a seeded uniform subset of negatives so that
/// positives / negatives is as close to `ratio` as the data allows. Order of
/// the survivors is preserved.
template <class T, class LabelFn>
std::vector<T> rebalance(const std::vector<T>& items, double ratio, std::uint64_t seed, LabelFn label_of) {
  if (!(ratio > 0.0)) throw Error("rebalance: ratio must be > 0");
  std::vector<std::size_t> neg;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (label_of(items[i])) ++pos;
    else neg.push_back(i);
  }
  if (pos == 0 || neg.empty()) throw Error("rebalance: both classes must be present");
  const auto target = std::min<std::size_t>(neg.size(), static_cast<std::size_t>(std::llround(pos / ratio)));
  std::mt19937_64 rng(seed);
  std::shuffle(neg.begin(), neg.end(), rng);
  std::vector<std::uint8_t> keep(items.size(), 0);
  for (std::size_t i = 0; i < items.size(); ++i)
    if (label_of(items[i])) keep[i] = 1;
  for (std::size_t k = 0; k < target; ++k) keep[neg[k]] = 1;
  std::vector<T> out;
  out.reserve(pos + target);
  for (std::size_t i = 0; i < items.size(); ++i)
    if (keep[i]) out.push_back(items[i]);
  return out;
}

template <class T>
std::vector<T> rebalance(const std::vector<T>& items, double ratio, std::uint64_t seed) {
  return rebalance(items, ratio, seed, [](const T& x) { return x.label; });
}

// --- training ------------------------------------------------------------------------

struct Ablations {
  bool no_pretrain = false;
  bool no_node_feature = false;
  bool no_2nd_feature = false;
  bool no_smoothing = false;

  nlohmann::json to_json() const {
    return {{"no_pretrain", no_pretrain},
            {"no_node_feature", no_node_feature},
            {"no_2nd_feature", no_2nd_feature},
            {"no_smoothing", no_smoothing}};
  }
  static Ablations from_json(const nlohmann::json& j) {
    Ablations a;
    a.no_pretrain = j.value("no_pretrain", false);
    a.no_node_feature = j.value("no_node_feature", false);
    a.no_2nd_feature = j.value("no_2nd_feature", false);
    a.no_smoothing = j.value("no_smoothing", false);
    return a;
  }
  void set(const std::string& name) {
    if (name == "no_pretrain") no_pretrain = true;
    else if (name == "no_node_feature") no_node_feature = true;
    else if (name == "no_2nd_feature") no_2nd_feature = true;
    else if (name == "no_smoothing") no_smoothing = true;
    else throw Error("unknown ablation '" + name + "'");
  }
  void apply(ModelConfig& c) const {
    if (no_pretrain) c.features.pretrain = false;
    if (no_node_feature) c.features.node_features = false;
    if (no_2nd_feature) c.features.second_order = false;
    if (no_smoothing) c.smoothing = false;
  }
};

struct TrainConfig {
  Behavior behavior = Behavior::wow;
  double lr = 0.01;
  double l2 = 0.0005;
  int batch_size = 256;
  int max_epochs = 20;
  int patience = 5;
  double pos_neg_ratio = 1.5;
  std::uint64_t seed = 1;
  AttentionKind attention = AttentionKind::additive;
  Ablations ablations;
  bool tune_threshold = true;

  static double default_lr(Behavior b) { return b == Behavior::wow ? 0.01 : 0.1; }

  void validate() const {
    if (!(lr > 0.0)) throw Error("train: lr must be > 0");
    if (!(l2 >= 0.0)) throw Error("train: l2 must be >= 0");
    if (batch_size < 1) throw Error("train: batch_size must be >= 1");
    if (max_epochs < 0) throw Error("train: max_epochs must be >= 0");
    if (patience < 1) throw Error("train: patience must be >= 1");
    if (!(pos_neg_ratio > 0.0)) throw Error("train: pos_neg_ratio must be > 0");
  }

  nlohmann::json to_json() const {
    return {{"behavior", to_string(behavior)}, {"lr", lr}, {"l2", l2}, {"batch_size", batch_size},
            {"max_epochs", max_epochs}, {"patience", patience}, {"pos_neg_ratio", pos_neg_ratio},
            {"seed", seed}, {"attention", to_string(attention)}, {"ablations", ablations.to_json()},
            {"tune_threshold", tune_threshold}};
  }
};

inline std::vector<int> labels_of(std::span<const EgoInstance> xs) {
  std::vector<int> y;
  y.reserve(xs.size());
  for (const auto& x : xs) y.push_back(x.label);
  return y;
}

inline std::vector<double> predict_all(const ModelParams& model, const FeatureBuilder& fb,
                                       std::span<const EgoInstance> xs) {
  std::vector<double> s;
  s.reserve(xs.size());
  for (const auto& x : xs) s.push_back(predict(model, x, fb.build(x)));
  return s;
}

struct TrainResult {
  ModelParams model;  // best validation checkpoint
  MetricsReport report;
};

using EpochCallback = std::function<void(const EpochStat&)>;

/// Mini-batch Adagrad over the summed BCE loss. Early-stops once validation
/// AUC has not improved for `patience` epochs and returns the best model
/// evaluated on the test split.
inline TrainResult train(const ModelParams& init, const Splits<EgoInstance>& splits, const FeatureBuilder& fb,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (splits.train.empty() || splits.val.empty()) throw Error("train: train and validation splits must be nonempty");
  if (!(fb.layout() == init.first_order)) throw Error("train: feature builder layout differs from the model");

  ModelParams model = init;
  TrainResult res{init, {}};
  AdagradState state;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(splits.train.size());
  std::iota(order.begin(), order.end(), 0);
  const auto val_labels = labels_of(splits.val);
  double best_auc = -1.0;
  int stale = 0;
  Gradients grads = zero_gradients(model);
  std::vector<FeatureMatrix> feats;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const EgoInstance*> batch;
      feats.clear();
      for (std::size_t k = start; k < end; ++k) {
        batch.push_back(&splits.train[order[k]]);
        feats.push_back(fb.build(*batch.back()));
      }
      for (auto& g : grads) g.setZero();
      const double loss = batch_loss_and_gradients(model, batch, feats, grads);
      if (!std::isfinite(loss)) throw Error("train: loss diverged (non-finite) in epoch " + std::to_string(epoch));
      epoch_loss += loss;
      adagrad_step(model, grads, cfg.lr, cfg.l2, state);
    }
    EpochStat st{epoch, epoch_loss / static_cast<double>(order.size()), 0.0};
    st.val_auc = auc(predict_all(model, fb, splits.val), val_labels);
    res.report.loss_trace.push_back(st);
    if (on_epoch) on_epoch(st);
    if (st.val_auc > best_auc) {
      best_auc = st.val_auc;
      res.model = model;
      res.report.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }

  double thr = 0.5;
  if (cfg.tune_threshold) thr = tune_threshold(predict_all(res.model, fb, splits.val), val_labels);
  if (!splits.test.empty()) {
    auto trace = std::move(res.report.loss_trace);
    const int best = res.report.best_epoch;
    res.report = evaluate_scores(predict_all(res.model, fb, splits.test), labels_of(splits.test), thr);
    res.report.loss_trace = std::move(trace);
    res.report.best_epoch = best;
  }
  return res;
}

// --- logistic regression baseline -------------------------------------------------------

/// Hand-crafted per-exposure features: ego gender, age, PageRank, cut point
/// and opinion-leader flags, number of active friends, number of connected
/// components among active friends, ego local clustering coefficient, and
/// mean and sum of the common-friend ratio between ego and each active friend
/// (common friends divided by the ego's degree).
class HandcraftedExtractor {
 public:
  explicit HandcraftedExtractor(const SocialGraph& g, bool include_cc = true) : g_(&g), include_cc_(include_cc) {
    for (const auto& a : g.all_attributes()) pr_max_ = std::max(pr_max_, a.pagerank_score);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> n{"gender", "age", "pagerank", "cut_point", "opinion_leader", "n_active"};
    if (include_cc_) n.push_back("n_cc");
    n.insert(n.end(), {"clustering", "cf_ratio_mean", "cf_ratio_sum"});
    return n;
  }
  int width() const { return static_cast<int>(names().size()); }

  Eigen::VectorXd operator()(const InteractionRecord& r) const {
    const auto& a = g_->attributes(r.user);
    std::vector<double> f{a.gender / 2.0, a.age / 100.0, pr_max_ > 0 ? a.pagerank_score / pr_max_ : 0.0,
                          a.is_cut_point ? 1.0 : 0.0, a.is_opinion_leader ? 1.0 : 0.0,
                          static_cast<double>(r.active_friends.size())};
    std::vector<NodeId> ids;
    for (const auto& af : r.active_friends) ids.push_back(af.id);
    if (include_cc_) f.push_back(count_components(Subgraph::induced(*g_, ids)));

    std::vector<NodeId> ego_net{r.user};
    const auto nb = g_->neighbors(r.user);
    ego_net.insert(ego_net.end(), nb.begin(), nb.end());
    f.push_back(local_clustering_coefficient(Subgraph::induced(*g_, ego_net), r.user));

    double sum = 0.0;
    const double deg = std::max<double>(1.0, static_cast<double>(nb.size()));
    for (NodeId v : ids) {
      const auto nv = g_->neighbors(v);
      std::size_t common = 0;
      auto i = nb.begin();
      auto j = nv.begin();
      while (i != nb.end() && j != nv.end()) {
        if (*i < *j) ++i;
        else if (*j < *i) ++j;
        else {
          ++common;
          ++i;
          ++j;
        }
      }
      sum += static_cast<double>(common) / deg;
    }
    f.push_back(ids.empty() ? 0.0 : sum / static_cast<double>(ids.size()));
    f.push_back(sum);
    return Eigen::Map<Eigen::VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
  }

 private:
  const SocialGraph* g_;
  bool include_cc_;
  double pr_max_ = 0.0;
};

struct LogisticOptions {
  double l2 = 0.0005;
  int max_iter = 5000;
  double tol = 1e-10;
  bool standardize = true;
};

/// p(y=1|x) = sigmoid(w.x + b), coefficients on the raw feature scale.
struct LogisticModel {
  Eigen::VectorXd w;
  double b = 0.0;
  int iterations = 0;

  double predict(const Eigen::VectorXd& x) const { return ad::sigmoid(w.dot(x) + b); }
};

/// Gradient descent with Armijo backtracking on
/// mean BCE + 0.5 * l2 * |w|^2 (bias unpenalized). With standardize on, the
/// fit runs on z-scored columns and the result is mapped back.
inline LogisticModel fit_logistic(const Eigen::MatrixXd& x, std::span<const int> y, const LogisticOptions& opt = {}) {
  const auto n = x.rows();
  const auto d = x.cols();
  if (n == 0 || static_cast<std::size_t>(n) != y.size()) throw Error("logistic: bad design matrix");
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d), scale = Eigen::VectorXd::Ones(d);
  if (opt.standardize) {
    mean = x.colwise().mean().transpose();
    for (Eigen::Index j = 0; j < d; ++j) {
      const double s = std::sqrt((x.col(j).array() - mean(j)).square().mean());
      scale(j) = s > 1e-12 ? s : 1.0;
    }
  }
  const Eigen::MatrixXd z = (x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
  Eigen::VectorXd yv(n);
  for (Eigen::Index i = 0; i < n; ++i) yv(i) = y[static_cast<std::size_t>(i)] ? 1.0 : 0.0;

  // theta = [w; b]
  auto objective = [&](const Eigen::VectorXd& th, Eigen::VectorXd* grad) {
    const Eigen::VectorXd s = (z * th.head(d)).array() + th(d);
    double loss = 0.0;
    Eigen::VectorXd r(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      // log(1 + e^s) - y s, stable
      loss += (s(i) > 0 ? s(i) + std::log1p(std::exp(-s(i))) : std::log1p(std::exp(s(i)))) - yv(i) * s(i);
      r(i) = ad::sigmoid(s(i)) - yv(i);
    }
    loss = loss / n + 0.5 * opt.l2 * th.head(d).squaredNorm();
    if (grad) {
      grad->resize(d + 1);
      grad->head(d) = z.transpose() * r / n + opt.l2 * th.head(d);
      (*grad)(d) = r.sum() / n;
    }
    return loss;
  };

  Eigen::VectorXd th = Eigen::VectorXd::Zero(d + 1), g;
  double f = objective(th, &g);
  double step = 1.0;
  LogisticModel m;
  for (int it = 0; it < opt.max_iter; ++it) {
    m.iterations = it;
    if (g.squaredNorm() < opt.tol * opt.tol) break;
    step = std::min(step * 2.0, 1e3);
    while (true) {
      const Eigen::VectorXd cand = th - step * g;
      const double fc = objective(cand, nullptr);
      if (fc <= f - 0.5 * step * g.squaredNorm() || step < 1e-14) {
        th = cand;
        break;
      }
      step *= 0.5;
    }
    f = objective(th, &g);
  }
  m.w = th.head(d).array() / scale.array();
  m.b = th(d) - m.w.dot(mean);
  return m;
}

struct LRResult {
  LogisticModel model;
  MetricsReport report;
};

template <class Extractor>
Eigen::MatrixXd extract_matrix(const Extractor& ex, std::span<const InteractionRecord> recs) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(recs.size()), ex.width());
  for (std::size_t i = 0; i < recs.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = ex(recs[i]).transpose();
  return x;
}

/// Fits on train, tunes the threshold on validation, reports on test.
template <class Extractor>
LRResult lr_baseline(const Extractor& ex, const Splits<InteractionRecord>& splits, Behavior behavior,
                     const LogisticOptions& opt = {}) {
  if (splits.train.empty() || splits.test.empty()) throw Error("lr_baseline: train and test must be nonempty");
  auto labels = [&](std::span<const InteractionRecord> rs) {
    std::vector<int> y;
    for (const auto& r : rs) y.push_back(r.label(behavior));
    return y;
  };
  auto scores = [&](const LogisticModel& m, std::span<const InteractionRecord> rs) {
    std::vector<double> s;
    for (const auto& r : rs) s.push_back(m.predict(ex(r)));
    return s;
  };
  LRResult res;
  res.model = fit_logistic(extract_matrix(ex, splits.train), labels(splits.train), opt);
  double thr = 0.5;
  if (!splits.val.empty()) thr = tune_threshold(scores(res.model, splits.val), labels(splits.val));
  res.report = evaluate_scores(scores(res.model, splits.test), labels(splits.test), thr);
  return res;
}

}  // namespace diffuse
