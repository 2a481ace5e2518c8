#pragma once

// Subcommand implementations behind the diffuse_cli tool. Each command reads
// its inputs from a directory, writes its artifacts plus a resolved-config
// JSON snapshot, and is deterministic for fixed inputs and seeds.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffuse/analytics.hpp"
#include "diffuse/diffuse_gnn.hpp"
#include "diffuse/ego_sampler.hpp"
#include "diffuse/feature_builder.hpp"
#include "diffuse/graph_core.hpp"
#include "diffuse/train_eval.hpp"

namespace diffuse::cli {

namespace fs = std::filesystem;

inline constexpr const char* kEdgesFile = "graph.edges";
inline constexpr const char* kAttributesFile = "attributes.csv";
inline constexpr const char* kLogFile = "log.jsonl";
inline constexpr const char* kEmbeddingsFile = "embeddings.bin";
inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kLayoutFile = "layout.json";
inline constexpr const char* kMetricsFile = "metrics.json";
inline constexpr const char* kLossTraceFile = "loss_trace.csv";
inline constexpr const char* kResolvedConfigFile = "resolved_config.json";

inline std::string split_cache(const std::string& split) { return split + ".cache"; }
inline std::string split_log(const std::string& split) { return split + ".jsonl"; }

inline void require_files(const fs::path& dir, const std::vector<std::string>& names) {
  std::vector<std::string> missing;
  for (const auto& n : names)
    if (!fs::exists(dir / n)) missing.push_back((dir / n).string());
  if (missing.empty()) return;
  std::string msg = "missing input file(s):";
  for (const auto& m : missing) msg += " " + m;
  throw Error(msg);
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory " + dir.string());
}

inline void write_json(const nlohmann::json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

/// Graph with PageRank and social roles computed.
inline SocialGraph load_dataset_graph(const fs::path& data_dir, double ol_quantile = 0.01) {
  require_files(data_dir, {kEdgesFile, kAttributesFile});
  auto g = load_social_graph((data_dir / kEdgesFile).string(), (data_dir / kAttributesFile).string());
  g.set_pagerank(pagerank(g));
  mark_social_roles(g, ol_quantile);
  return g;
}

// --- synth ----------------------------------------------------------------------------

inline void cmd_synth(const SynthConfig& cfg, const fs::path& out_dir) {
  ensure_dir(out_dir);
  const auto ds = generate_synthetic(cfg);
  write_edge_list(ds.graph, (out_dir / kEdgesFile).string());
  write_attributes_csv(ds.graph, (out_dir / kAttributesFile).string());
  write_log(ds.log, (out_dir / kLogFile).string());
  write_json({{"command", "synth"}, {"synth", cfg.to_json()}}, out_dir / kResolvedConfigFile);
}

// --- pretrain -------------------------------------------------------------------------

inline nlohmann::json to_json(const PretrainOptions& o) {
  return {{"dim", o.dim}, {"svd_rank", o.svd_rank}, {"power_iters", o.power_iters}, {"seed", o.seed},
          {"normalize_rows", o.normalize_rows},
          {"filter", {{"mu", o.filter.mu}, {"theta", o.filter.theta}, {"cheb_order", o.filter.cheb_order}}}};
}

inline void cmd_pretrain(const PretrainOptions& opt, const fs::path& data_dir, const fs::path& out_dir) {
  const auto g = load_dataset_graph(data_dir);
  ensure_dir(out_dir);
  auto o = opt;
  o.svd_rank = std::min<int>(o.svd_rank, static_cast<int>(g.node_count()));
  write_embeddings(pretrain_embeddings(g, o), (out_dir / kEmbeddingsFile).string());
  write_json({{"command", "pretrain"}, {"data", data_dir.string()}, {"pretrain", to_json(o)}},
             out_dir / kResolvedConfigFile);
}

// --- sample ---------------------------------------------------------------------------

struct SampleOptions {
  int m = 32;
  std::string method = "bfs";  // bfs | rwr
  int tau = 2;
  double restart_prob = 0.8;
  Behavior behavior = Behavior::wow;
  double train_frac = 0.7;
  double val_frac = 0.1;
  int min_active = 1;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const {
    return {{"m", m}, {"method", method}, {"tau", tau}, {"restart_prob", restart_prob},
            {"behavior", to_string(behavior)}, {"train_frac", train_frac}, {"val_frac", val_frac},
            {"min_active", min_active}, {"seed", seed}};
  }
};

inline std::vector<EgoInstance> sample_split(const SocialGraph& g, std::span<const InteractionRecord> recs,
                                             const SampleOptions& o, std::uint64_t split_salt) {
  if (o.method != "bfs" && o.method != "rwr") throw Error("sample: unknown method '" + o.method + "'");
  std::vector<EgoInstance> out;
  out.reserve(recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (o.method == "bfs") out.push_back(sample_bfs(g, recs[i], o.m, o.tau, o.behavior));
    else out.push_back(sample_rwr(g, recs[i], o.m, o.restart_prob, o.seed ^ (split_salt << 40) ^ i, o.behavior));
  }
  return out;
}

/// Chronological split of the log into train/val/test, one instance cache
/// and one JSON-lines log per split.
inline void cmd_sample(const SampleOptions& opt, const fs::path& data_dir, const fs::path& out_dir) {
  require_files(data_dir, {kLogFile});
  const auto g = load_dataset_graph(data_dir);
  auto log = filter_interactions(read_log((data_dir / kLogFile).string()), static_cast<std::size_t>(opt.min_active));
  for (const auto& r : log) validate_record(g, r);
  const auto splits = time_split(std::move(log), opt.train_frac, opt.val_frac);
  ensure_dir(out_dir);
  const std::vector<std::pair<std::string, const std::vector<InteractionRecord>*>> parts = {
      {"train", &splits.train}, {"val", &splits.val}, {"test", &splits.test}};
  std::uint64_t salt = 1;
  for (const auto& [name, recs] : parts) {
    write_log(*recs, (out_dir / split_log(name)).string());
    write_instance_cache(sample_split(g, *recs, opt, salt++), opt.m, (out_dir / split_cache(name)).string());
  }
  write_json({{"command", "sample"}, {"data", data_dir.string()}, {"sample", opt.to_json()}},
             out_dir / kResolvedConfigFile);
}

// --- train / eval ---------------------------------------------------------------------

inline Splits<EgoInstance> load_instance_splits(const fs::path& sample_dir) {
  require_files(sample_dir, {split_cache("train"), split_cache("val"), split_cache("test")});
  Splits<EgoInstance> s;
  s.train = read_instance_cache((sample_dir / split_cache("train")).string());
  s.val = read_instance_cache((sample_dir / split_cache("val")).string());
  s.test = read_instance_cache((sample_dir / split_cache("test")).string());
  return s;
}

struct TrainPaths {
  fs::path data_dir;      // graph + attributes
  fs::path pretrain_dir;  // embeddings (unused with no_pretrain)
  fs::path sample_dir;    // split caches
  fs::path out_dir;
};

inline EmbeddingTable load_embeddings_for(const ModelConfig& mc, const fs::path& pretrain_dir,
                                          const SocialGraph& g) {
  if (!mc.features.pretrain) return EmbeddingTable::zeros(g.node_count(), 0);
  require_files(pretrain_dir, {kEmbeddingsFile});
  auto t = read_embeddings((pretrain_dir / kEmbeddingsFile).string());
  if (t.node_count() != g.node_count()) throw Error("embedding table size differs from the graph");
  return t;
}

/// Trains on the rebalanced train split, writes checkpoint, layout manifest,
/// metrics and loss trace. Returns the metrics.
inline MetricsReport cmd_train(ModelConfig mc, const TrainConfig& tc, const TrainPaths& p,
                               std::ostream* progress = nullptr) {
  tc.validate();
  tc.ablations.apply(mc);
  mc.attention = tc.attention;
  const auto g = load_dataset_graph(p.data_dir);
  auto table = load_embeddings_for(mc, p.pretrain_dir, g);
  if (mc.features.pretrain) mc.embed_dim = table.dim();
  auto splits = load_instance_splits(p.sample_dir);
  if (!splits.train.empty() && splits.train.front().size() != mc.m)
    throw Error("train: instance size " + std::to_string(splits.train.front().size()) + " differs from m=" +
                std::to_string(mc.m));
  splits.train = rebalance(splits.train, tc.pos_neg_ratio, tc.seed);
  FeatureBuilder fb(g, mc.features.pretrain ? &table : nullptr, mc.features);
  const auto init = ModelParams::init(mc, fb.layout(), tc.seed);
  auto res = train(init, splits, fb, tc, [&](const EpochStat& s) {
    if (progress)
      *progress << "epoch " << s.epoch << " train_loss " << s.train_loss << " val_auc " << s.val_auc << std::endl;
  });
  ensure_dir(p.out_dir);
  const nlohmann::json extra = {{"train", tc.to_json()},
                                {"ablations", tc.ablations.to_json()},
                                {"threshold", res.report.tuned_threshold}};
  save_checkpoint(res.model, extra, (p.out_dir / kCheckpointFile).string());
  write_layout_manifest(fb.layout(), (p.out_dir / kLayoutFile).string());
  write_json(res.report.to_json(), p.out_dir / kMetricsFile);
  write_loss_trace_csv(res.report, (p.out_dir / kLossTraceFile).string());
  write_json({{"command", "train"},
              {"data", p.data_dir.string()},
              {"pretrain", p.pretrain_dir.string()},
              {"sample", p.sample_dir.string()},
              {"model", mc.to_json()},
              {"train", tc.to_json()}},
             p.out_dir / kResolvedConfigFile);
  return res.report;
}

/// Scores a split with a saved checkpoint; the layout manifest next to the
/// checkpoint must match the features rebuilt from the inputs.
inline MetricsReport cmd_eval(const fs::path& run_dir, const TrainPaths& p, const std::string& split = "test") {
  require_files(run_dir, {kCheckpointFile, kLayoutFile});
  const auto g = load_dataset_graph(p.data_dir);
  const auto manifest = read_layout_manifest((run_dir / kLayoutFile).string());
  auto ck = load_checkpoint((run_dir / kCheckpointFile).string(), &manifest);
  const auto& mc = ck.model.config;
  auto table = load_embeddings_for(mc, p.pretrain_dir, g);
  FeatureBuilder fb(g, mc.features.pretrain ? &table : nullptr, mc.features);
  if (!(fb.layout() == manifest)) throw Error("eval: rebuilt feature layout does not match the manifest");
  require_files(p.sample_dir, {split_cache(split)});
  const auto xs = read_instance_cache((p.sample_dir / split_cache(split)).string());
  const double thr = ck.extra.contains("threshold") ? ck.extra.at("threshold").get<double>() : 0.5;
  auto report = evaluate_scores(predict_all(ck.model, fb, xs), labels_of(xs), thr);
  ensure_dir(p.out_dir);
  write_json(report.to_json(), p.out_dir / kMetricsFile);
  write_json({{"command", "eval"}, {"run", run_dir.string()}, {"split", split}}, p.out_dir / kResolvedConfigFile);
  return report;
}

/// Logistic-regression baseline on the split logs written by sample.
inline MetricsReport cmd_baseline(const fs::path& data_dir, const fs::path& sample_dir, const fs::path& out_dir,
                                  Behavior behavior, bool include_cc, double l2) {
  require_files(sample_dir, {split_log("train"), split_log("val"), split_log("test")});
  const auto g = load_dataset_graph(data_dir);
  Splits<InteractionRecord> s;
  s.train = read_log((sample_dir / split_log("train")).string());
  s.val = read_log((sample_dir / split_log("val")).string());
  s.test = read_log((sample_dir / split_log("test")).string());
  HandcraftedExtractor ex(g, include_cc);
  LogisticOptions lo;
  lo.l2 = l2;
  auto res = lr_baseline(ex, s, behavior, lo);
  ensure_dir(out_dir);
  auto j = res.report.to_json();
  j["features"] = ex.names();
  j["coefficients"] = std::vector<double>(res.model.w.data(), res.model.w.data() + res.model.w.size());
  j["intercept"] = res.model.b;
  write_json(j, out_dir / kMetricsFile);
  write_json({{"command", "baseline"}, {"behavior", to_string(behavior)}, {"include_cc", include_cc}, {"l2", l2}},
             out_dir / kResolvedConfigFile);
  return res.report;
}

// --- analyze --------------------------------------------------------------------------

inline void cmd_analyze(const fs::path& data_dir, const fs::path& out_dir, int min_user_exposures) {
  require_files(data_dir, {kLogFile});
  const auto g = load_dataset_graph(data_dir);
  const auto log = filter_active_users(read_log((data_dir / kLogFile).string()), min_user_exposures);
  ensure_dir(out_dir);
  rate_by_demographics(log, g, {"gender"}).write_csv((out_dir / "demographics_gender.csv").string());
  rate_by_demographics(log, g, {"age"}).write_csv((out_dir / "demographics_age.csv").string());
  rate_by_demographics(log, g, {"gender", "age"}).write_csv((out_dir / "demographics_gender_age.csv").string());
  for (const std::string key : {"gender", "age", "role_OL", "role_SH"})
    rate_dyadic(log, g, key).write_csv((out_dir / ("dyadic_" + key + ".csv")).string());
  const auto dist = rate_dyadic(log, g, "distance");
  dist.write_csv((out_dir / "dyadic_distance.csv").string());
  distance_cumulative(dist).write_csv((out_dir / "dyadic_distance_cumulative.csv").string());
  for (const std::string key : {"gender", "age_diff", "distance"})
    rate_triadic(log, g, key).write_csv((out_dir / ("triadic_" + key + ".csv")).string());
  structural_diversity_curves(log, g, 0).write_csv((out_dir / "diversity_raw.csv").string());
  structural_diversity_curves(log, g, 1).write_csv((out_dir / "diversity_1core.csv").string());
  write_json({{"command", "analyze"}, {"data", data_dir.string()}, {"min_user_exposures", min_user_exposures}},
             out_dir / kResolvedConfigFile);
}

// --- Weibo-style conversion ---------------------------------------------------------------
//
// network file: one line per user "uid n f_1 r_1 ... f_n r_n" (followee id and
//   reciprocity flag); every pair becomes an undirected friendship.
// cascade file: blocks "item_id count" followed by `count` lines "uid ts".
//
// Every adopter with at least one earlier-adopting friend yields a positive
// record; friends of adopters who never adopt yield negatives stamped one
// tick after the last adoption. Ids are remapped densely in first-seen order.

struct ConvertStats {
  std::size_t nodes = 0, edges = 0, positives = 0, negatives = 0;
};

inline ConvertStats convert_weibo(const fs::path& network, const fs::path& cascades, const fs::path& out_dir) {
  std::ifstream net(network);
  if (!net) throw Error("cannot open network file " + network.string());
  std::unordered_map<std::int64_t, NodeId> ids;
  auto id_of = [&](std::int64_t raw) {
    auto [it, inserted] = ids.try_emplace(raw, static_cast<NodeId>(ids.size()));
    return it->second;
  };
  std::vector<std::pair<NodeId, NodeId>> edges;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(net, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::int64_t uid = 0, n = 0;
    if (!(ss >> uid >> n)) throw Error(network.string() + ":" + std::to_string(lineno) + ": expected 'uid n ...'");
    const NodeId u = id_of(uid);
    for (std::int64_t k = 0; k < n; ++k) {
      std::int64_t f = 0;
      int r = 0;
      if (!(ss >> f >> r)) throw Error(network.string() + ":" + std::to_string(lineno) + ": truncated followee list");
      edges.emplace_back(u, id_of(f));
    }
  }
  std::ifstream cas(cascades);
  if (!cas) throw Error("cannot open cascade file " + cascades.string());
  struct Adoption {
    NodeId user;
    std::int64_t ts;
  };
  std::vector<std::pair<std::int64_t, std::vector<Adoption>>> items;
  lineno = 0;
  while (std::getline(cas, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream hs(line);
    std::int64_t item = 0, count = 0;
    if (!(hs >> item >> count)) throw Error(cascades.string() + ":" + std::to_string(lineno) + ": expected 'item count'");
    std::vector<Adoption> ad;
    for (std::int64_t k = 0; k < count; ++k) {
      if (!std::getline(cas, line)) throw Error(cascades.string() + ": truncated cascade for item " + std::to_string(item));
      ++lineno;
      std::istringstream as(line);
      std::int64_t uid = 0, ts = 0;
      if (!(as >> uid >> ts)) throw Error(cascades.string() + ":" + std::to_string(lineno) + ": expected 'uid ts'");
      ad.push_back({id_of(uid), ts});
    }
    items.emplace_back(item, std::move(ad));
  }

  auto g = SocialGraph::from_edges(ids.size(), edges);
  std::vector<InteractionRecord> log;
  ConvertStats st;
  for (auto& [item, ad] : items) {
    std::stable_sort(ad.begin(), ad.end(), [](const Adoption& a, const Adoption& b) { return a.ts < b.ts; });
    std::unordered_map<NodeId, std::int64_t> first;
    for (const auto& a : ad) first.try_emplace(a.user, a.ts);
    std::int64_t last_ts = ad.empty() ? 0 : ad.back().ts;
    std::unordered_map<NodeId, std::vector<ActiveFriend>> exposed;  // non-adopters
    for (const auto& [u, ts] : first) {
      InteractionRecord r;
      r.user = u;
      r.item = item;
      r.ts = ts;
      r.is_wow = true;
      for (NodeId f : g.neighbors(u)) {
        auto it = first.find(f);
        if (it != first.end() && it->second < ts) r.active_friends.push_back({f, it->second});
        if (it == first.end()) exposed[f].push_back({u, ts});
      }
      if (r.active_friends.empty()) continue;
      std::stable_sort(r.active_friends.begin(), r.active_friends.end(),
                       [](const ActiveFriend& a, const ActiveFriend& b) {
                         return a.wow_ts != b.wow_ts ? a.wow_ts < b.wow_ts : a.id < b.id;
                       });
      log.push_back(std::move(r));
      ++st.positives;
    }
    for (auto& [v, friends] : exposed) {
      InteractionRecord r;
      r.user = v;
      r.item = item;
      r.ts = last_ts + 1;
      std::stable_sort(friends.begin(), friends.end(), [](const ActiveFriend& a, const ActiveFriend& b) {
        return a.wow_ts != b.wow_ts ? a.wow_ts < b.wow_ts : a.id < b.id;
      });
      r.active_friends = std::move(friends);
      log.push_back(std::move(r));
      ++st.negatives;
    }
  }
  std::stable_sort(log.begin(), log.end(), [](const InteractionRecord& a, const InteractionRecord& b) {
    return a.ts != b.ts ? a.ts < b.ts : (a.item != b.item ? a.item < b.item : a.user < b.user);
  });
  ensure_dir(out_dir);
  write_edge_list(g, (out_dir / kEdgesFile).string());
  write_attributes_csv(g, (out_dir / kAttributesFile).string());
  write_log(log, (out_dir / kLogFile).string());
  st.nodes = g.node_count();
  st.edges = g.edge_count();
  write_json({{"command", "convert-weibo"}, {"network", network.string()}, {"cascades", cascades.string()},
              {"nodes", st.nodes}, {"edges", st.edges}, {"positives", st.positives}, {"negatives", st.negatives}},
             out_dir / kResolvedConfigFile);
  return st;
}

}  // namespace diffuse::cli
