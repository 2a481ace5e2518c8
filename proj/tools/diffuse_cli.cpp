// diffuse_cli: synth | pretrain | sample | train | eval | baseline | analyze | convert-weibo
//
// Options may also come from a TOML/INI file given with --config; keys of a
// subcommand live in a section named after it ([train], [sample], ...).
// Flags given on the command line override the file.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "diffuse/cli.hpp"

using namespace diffuse;
namespace dc = diffuse::cli;

namespace {

void add_filter_options(CLI::App* app, FilterParams& f) {
  app->add_option("--mu", f.mu, "Initial pass-band center")->capture_default_str();
  app->add_option("--theta", f.theta, "Kernel sharpness")->capture_default_str();
  app->add_option("--cheb-order", f.cheb_order, "Chebyshev order")->capture_default_str();
}

Behavior parse_behavior(const std::string& s) { return behavior_from_string(s); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Social influence prediction toolkit"};
  app.set_config("--config", "", "TOML/INI file with option values");
  app.require_subcommand(1);

  // synth
  SynthConfig synth;
  std::string synth_out = "data";
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic graph and interaction log");
  c_synth->add_option("--out", synth_out, "Output directory")->capture_default_str();
  c_synth->add_option("--nodes", synth.node_count)->capture_default_str();
  c_synth->add_option("--communities", synth.communities)->capture_default_str();
  c_synth->add_option("--p-in", synth.p_in)->capture_default_str();
  c_synth->add_option("--cross-degree", synth.cross_degree)->capture_default_str();
  c_synth->add_option("--exposures", synth.exposures)->capture_default_str();
  c_synth->add_option("--min-active", synth.min_active)->capture_default_str();
  c_synth->add_option("--max-active", synth.max_active)->capture_default_str();
  c_synth->add_option("--wow-cc", synth.wow.cc, "Coefficient on #CC for wow")->capture_default_str();
  c_synth->add_option("--click-cc", synth.click.cc, "Coefficient on #CC for click")->capture_default_str();
  c_synth->add_option("--wow-b0", synth.wow.b0)->capture_default_str();
  c_synth->add_option("--click-b0", synth.click.b0)->capture_default_str();
  c_synth->add_option("--seed", synth.seed)->capture_default_str();

  // pretrain
  PretrainOptions pre;
  std::string pre_data = "data", pre_out = "pretrain";
  auto* c_pre = app.add_subcommand("pretrain", "Compute node embeddings");
  c_pre->add_option("--data", pre_data, "Dataset directory")->capture_default_str();
  c_pre->add_option("--out", pre_out, "Output directory")->capture_default_str();
  c_pre->add_option("--dim", pre.dim)->capture_default_str();
  c_pre->add_option("--svd-rank", pre.svd_rank)->capture_default_str();
  c_pre->add_option("--power-iters", pre.power_iters)->capture_default_str();
  c_pre->add_option("--seed", pre.seed)->capture_default_str();
  add_filter_options(c_pre, pre.filter);

  // sample
  dc::SampleOptions smp;
  std::string smp_data = "data", smp_out = "samples", smp_behavior = "wow";
  auto* c_smp = app.add_subcommand("sample", "Split the log and sample ego networks");
  c_smp->add_option("--data", smp_data)->capture_default_str();
  c_smp->add_option("--out", smp_out)->capture_default_str();
  c_smp->add_option("--m", smp.m, "Ego network size")->capture_default_str();
  c_smp->add_option("--method", smp.method, "bfs or rwr")->capture_default_str();
  c_smp->add_option("--tau", smp.tau)->capture_default_str();
  c_smp->add_option("--restart-prob", smp.restart_prob)->capture_default_str();
  c_smp->add_option("--behavior", smp_behavior, "wow or click")->capture_default_str();
  c_smp->add_option("--train-frac", smp.train_frac)->capture_default_str();
  c_smp->add_option("--val-frac", smp.val_frac)->capture_default_str();
  c_smp->add_option("--min-active", smp.min_active)->capture_default_str();
  c_smp->add_option("--seed", smp.seed)->capture_default_str();

  // train
  ModelConfig mc;
  TrainConfig tc;
  dc::TrainPaths tp{"data", "pretrain", "samples", "run"};
  std::string tr_behavior = "wow", tr_attention = "AA", tr_readout = "max", tr_mode = "chebyshev";
  std::vector<std::string> ablations;
  double tr_lr = -1.0;
  auto* c_train = app.add_subcommand("train", "Train a model");
  c_train->add_option("--data", tp.data_dir)->capture_default_str();
  c_train->add_option("--pretrain", tp.pretrain_dir)->capture_default_str();
  c_train->add_option("--samples", tp.sample_dir)->capture_default_str();
  c_train->add_option("--out", tp.out_dir)->capture_default_str();
  c_train->add_option("--behavior", tr_behavior)->capture_default_str();
  c_train->add_option("--attention", tr_attention, "AA or DA")->capture_default_str();
  c_train->add_option("--readout", tr_readout, "max or sum")->capture_default_str();
  c_train->add_option("--smoothing-mode", tr_mode, "chebyshev or exact")->capture_default_str();
  c_train->add_option("--lr", tr_lr, "Learning rate (default 0.01 wow, 0.1 click)");
  c_train->add_option("--l2", tc.l2)->capture_default_str();
  c_train->add_option("--batch-size", tc.batch_size)->capture_default_str();
  c_train->add_option("--epochs", tc.max_epochs)->capture_default_str();
  c_train->add_option("--patience", tc.patience)->capture_default_str();
  c_train->add_option("--pos-neg-ratio", tc.pos_neg_ratio)->capture_default_str();
  c_train->add_option("--seed", tc.seed)->capture_default_str();
  c_train->add_option("--ablation", ablations, "no_pretrain, no_node_feature, no_2nd_feature, no_smoothing");
  c_train->add_option("--m", mc.m)->capture_default_str();
  c_train->add_option("--heads", mc.heads)->capture_default_str();
  c_train->add_option("--head-dim", mc.head_dim)->capture_default_str();
  c_train->add_option("--coarsen-steps", mc.coarsen_steps)->capture_default_str();
  c_train->add_option("--gnn-depth", mc.gnn_depth)->capture_default_str();
  c_train->add_option("--hidden", mc.hidden)->capture_default_str();
  c_train->add_option("--cross-dim", mc.features.cross_dim)->capture_default_str();
  c_train->add_option("--include-coarsest", mc.include_coarsest)->capture_default_str();
  add_filter_options(c_train, mc.filter);

  // eval
  dc::TrainPaths ep{"data", "pretrain", "samples", "eval"};
  std::string ev_run = "run", ev_split = "test";
  auto* c_eval = app.add_subcommand("eval", "Evaluate a saved checkpoint");
  c_eval->add_option("--run", ev_run, "Directory holding checkpoint.bin and layout.json")->capture_default_str();
  c_eval->add_option("--data", ep.data_dir)->capture_default_str();
  c_eval->add_option("--pretrain", ep.pretrain_dir)->capture_default_str();
  c_eval->add_option("--samples", ep.sample_dir)->capture_default_str();
  c_eval->add_option("--split", ev_split)->capture_default_str();
  c_eval->add_option("--out", ep.out_dir)->capture_default_str();

  // baseline
  std::string bl_data = "data", bl_samples = "samples", bl_out = "baseline", bl_behavior = "wow";
  bool bl_no_cc = false;
  double bl_l2 = 0.0005;
  auto* c_bl = app.add_subcommand("baseline", "Logistic regression on hand-crafted features");
  c_bl->add_option("--data", bl_data)->capture_default_str();
  c_bl->add_option("--samples", bl_samples)->capture_default_str();
  c_bl->add_option("--out", bl_out)->capture_default_str();
  c_bl->add_option("--behavior", bl_behavior)->capture_default_str();
  c_bl->add_flag("--no-cc", bl_no_cc, "Drop the #CC feature");
  c_bl->add_option("--l2", bl_l2)->capture_default_str();

  // analyze
  std::string an_data = "data", an_out = "analysis";
  int an_min = 0;
  auto* c_an = app.add_subcommand("analyze", "Active-rate tables as CSV");
  c_an->add_option("--data", an_data)->capture_default_str();
  c_an->add_option("--out", an_out)->capture_default_str();
  c_an->add_option("--min-user-exposures", an_min, "Keep users with at least this many exposures")
      ->capture_default_str();

  // convert-weibo
  std::string cw_net, cw_cas, cw_out = "weibo";
  auto* c_cw = app.add_subcommand("convert-weibo", "Convert a Weibo-style dump to the log format");
  c_cw->add_option("--network", cw_net, "Follower network file")->required();
  c_cw->add_option("--cascades", cw_cas, "Cascade file")->required();
  c_cw->add_option("--out", cw_out)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*c_synth) {
      dc::cmd_synth(synth, synth_out);
    } else if (*c_pre) {
      dc::cmd_pretrain(pre, pre_data, pre_out);
    } else if (*c_smp) {
      smp.behavior = parse_behavior(smp_behavior);
      dc::cmd_sample(smp, smp_data, smp_out);
    } else if (*c_train) {
      tc.behavior = parse_behavior(tr_behavior);
      tc.attention = attention_from_string(tr_attention);
      tc.lr = tr_lr > 0 ? tr_lr : TrainConfig::default_lr(tc.behavior);
      for (const auto& a : ablations) tc.ablations.set(a);
      mc.readout = readout_from_string(tr_readout);
      mc.filter.mode = smoothing_mode_from_string(tr_mode);
      const auto r = dc::cmd_train(mc, tc, tp, &std::cerr);
      std::cout << r.to_json().dump(2) << '\n';
    } else if (*c_eval) {
      const auto r = dc::cmd_eval(ev_run, ep, ev_split);
      std::cout << r.to_json().dump(2) << '\n';
    } else if (*c_bl) {
      const auto r = dc::cmd_baseline(bl_data, bl_samples, bl_out, parse_behavior(bl_behavior), !bl_no_cc, bl_l2);
      std::cout << r.to_json().dump(2) << '\n';
    } else if (*c_an) {
      dc::cmd_analyze(an_data, an_out, an_min);
    } else if (*c_cw) {
      const auto st = dc::convert_weibo(cw_net, cw_cas, cw_out);
      std::cout << "nodes " << st.nodes << " edges " << st.edges << " positives " << st.positives << " negatives "
                << st.negatives << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
