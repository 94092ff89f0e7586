// Command-line front end: dataset generation, training, attacks, prompt
// tuning, single-image defense and experiment suites.
//
// Exit codes: 0 ok, 2 configuration error, 3 missing artifact,
// 4 threshold regression in `suite`.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "diffender/attacker.hpp"
#include "diffender/bench.hpp"
#include "diffender/checkpoint.hpp"
#include "diffender/classifier.hpp"
#include "diffender/data_io.hpp"
#include "diffender/desk_data.hpp"
#include "diffender/diffusion.hpp"
#include "diffender/image_io.hpp"
#include "diffender/report.hpp"
#include "diffender/restorer.hpp"
#include "diffender/tuner.hpp"

namespace fs = std::filesystem;
using namespace diffender;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitThreshold = 4;

// A dataset root holds one directory per split.
fs::path split_dir(const fs::path& root, Split split) { return root / to_string(split); }

Dataset load_split(const fs::path& root, Split split) {
  const auto dir = split_dir(root, split);
  if (!fs::exists(dir)) {
    throw MissingArtifactError("dataset not found: " + dir.string());
  }
  return load_dataset(dir, split);
}

struct AttackFlags {
  std::string kind = "advp";
  double patch = AttackSpec{}.patch_fraction;
  int iters = AttackSpec{}.iterations;
  double step = AttackSpec{}.step_size;
  std::string policy = "random_fixed";
  int restarts = AttackSpec{}.restarts;
  Seed seed = 0;
  int surrogate_steps = AttackSpec{}.surrogate_steps;

  void add(CLI::App* cmd) {
    cmd->add_option("--attack", kind, "advp | lavan | ir_cold | bpda_advp")->capture_default_str();
    cmd->add_option("--patch", patch, "patch area fraction")->capture_default_str();
    cmd->add_option("--iters", iters, "attack iterations")->capture_default_str();
    cmd->add_option("--step", step, "signed-gradient step size")->capture_default_str();
    cmd->add_option("--location", policy, "random_fixed | random_per_restart")->capture_default_str();
    cmd->add_option("--restarts", restarts)->capture_default_str();
    cmd->add_option("--attack-seed", seed)->capture_default_str();
    cmd->add_option("--surrogate-steps", surrogate_steps, "restoration steps inside the adaptive loop")
        ->capture_default_str();
  }
  AttackSpec spec() const {
    AttackSpec s;
    s.kind = attack_kind_from_string(kind);
    s.patch_fraction = patch;
    s.iterations = iters;
    s.step_size = step;
    s.location_policy = location_policy_from_string(policy);
    s.restarts = restarts;
    s.seed = seed;
    s.surrogate_steps = surrogate_steps;
    try {
      s.validate();
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
    return s;
  }
};

struct LocalizerFlags {
  LocalizerConfig cfg;
  void add(CLI::App* cmd) {
    cmd->add_option("--t-star", cfg.t_star, "noise ratio for the difference estimate")->capture_default_str();
    cmd->add_option("--m", cfg.m, "noise draws per image")->capture_default_str();
    cmd->add_option("--theta", cfg.theta, "binarization threshold")->capture_default_str();
    cmd->add_option("--diff-floor", cfg.diff_floor, "lower bound of the normalization scale")->capture_default_str();
  }
  LocalizerConfig get() const {
    try {
      cfg.validate();
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
    return cfg;
  }
};

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"diffender: diffusion-based adversarial patch localization and restoration"};
  app.require_subcommand(1);

  // make-dataset
  fs::path ds_out;
  std::size_t ds_train = 5000, ds_test = 512;
  Seed ds_seed = 1;
  bool ds_ir = false;
  auto* make_ds = app.add_subcommand("make-dataset", "generate the synthetic desk dataset");
  make_ds->add_option("--out", ds_out, "dataset root; writes train/ and test/")->required();
  make_ds->add_option("--train", ds_train)->capture_default_str();
  make_ds->add_option("--test", ds_test)->capture_default_str();
  make_ds->add_option("--seed", ds_seed)->capture_default_str();
  make_ds->add_flag("--infrared", ds_ir, "write the single-channel infrared proxy");

  // train-classifier
  fs::path tc_data, tc_out;
  ClassifierTrainConfig tc_cfg;
  Seed tc_seed = 11;
  auto* train_clf = app.add_subcommand("train-classifier", "train the victim classifier");
  train_clf->add_option("--data", tc_data)->required();
  train_clf->add_option("--out", tc_out)->required();
  train_clf->add_option("--epochs", tc_cfg.epochs)->capture_default_str();
  train_clf->add_option("--lr", tc_cfg.learn_rate)->capture_default_str();
  train_clf->add_option("--width", tc_cfg.width)->capture_default_str();
  train_clf->add_option("--seed", tc_seed)->capture_default_str();

  // train-diffusion
  fs::path td_data, td_out;
  DiffusionTrainConfig td_cfg;
  DenoiserConfig td_model;
  double td_ir_fraction = 0.1;
  Seed td_seed = 21;
  auto* train_diff = app.add_subcommand("train-diffusion", "train the text-conditioned denoiser");
  train_diff->add_option("--data", td_data)->required();
  train_diff->add_option("--out", td_out)->required();
  train_diff->add_option("--epochs", td_cfg.epochs)->capture_default_str();
  train_diff->add_option("--lr", td_cfg.learn_rate)->capture_default_str();
  train_diff->add_option("--base-channels", td_model.base_channels)->capture_default_str();
  train_diff->add_option("--ir-fraction", td_ir_fraction, "share of training images added as infrared copies")
      ->capture_default_str();
  train_diff->add_option("--seed", td_seed)->capture_default_str();

  // attack
  fs::path at_data, at_clf, at_cache;
  int at_count = 128;
  AttackFlags at_flags;
  auto* attack = app.add_subcommand("attack", "attack correctly classified test images and cache the results");
  attack->add_option("--data", at_data)->required();
  attack->add_option("--classifier", at_clf)->required();
  attack->add_option("--cache-dir", at_cache)->required();
  attack->add_option("--count", at_count)->capture_default_str();
  at_flags.add(attack);

  // tune-prompts
  fs::path tp_data, tp_diff, tp_clf, tp_out, tp_idc, tp_traj;
  TuneConfig tp_cfg;
  LocalizerFlags tp_loc;
  AttackFlags tp_attack;
  int tp_tokens = 16;
  double tp_init_std = 1.0;
  auto* tune = app.add_subcommand("tune-prompts", "few-shot tuning of the localization and restoration prompts");
  tune->add_option("--data", tp_data)->required();
  tune->add_option("--diffusion", tp_diff)->required();
  tune->add_option("--classifier", tp_clf)->required();
  tune->add_option("--out", tp_out)->required();
  tune->add_option("--idc", tp_idc, "frozen domain token checkpoint");
  tune->add_option("--trajectory", tp_traj, "loss trajectory CSV");
  tune->add_option("--shots", tp_cfg.shots)->capture_default_str();
  tune->add_option("--n", tp_tokens, "prompt tokens")->capture_default_str();
  tune->add_option("--steps", tp_cfg.steps)->capture_default_str();
  tune->add_option("--lr", tp_cfg.learn_rate)->capture_default_str();
  tune->add_option("--alpha", tp_cfg.alpha)->capture_default_str();
  tune->add_option("--beta", tp_cfg.beta)->capture_default_str();
  tune->add_option("--gamma", tp_cfg.gamma)->capture_default_str();
  tune->add_option("--delta", tp_cfg.delta)->capture_default_str();
  tune->add_option("--init-std", tp_init_std, "prompt init std in units of the token std")->capture_default_str();
  tune->add_flag("--infrared", tp_cfg.infrared, "add the texture and edge losses");
  tune->add_option("--seed", tp_cfg.seed)->capture_default_str();
  tp_loc.add(tune);
  tp_attack.add(tune);

  // learn-idc
  fs::path li_data, li_diff, li_out, li_traj;
  int li_steps = 300, li_count = 64;
  Seed li_seed = 0;
  auto* learn_idc = app.add_subcommand("learn-idc", "learn the infrared domain token");
  learn_idc->add_option("--data", li_data, "infrared dataset directory")->required();
  learn_idc->add_option("--diffusion", li_diff)->required();
  learn_idc->add_option("--out", li_out)->required();
  learn_idc->add_option("--trajectory", li_traj);
  learn_idc->add_option("--steps", li_steps)->capture_default_str();
  learn_idc->add_option("--count", li_count, "training images")->capture_default_str();
  learn_idc->add_option("--seed", li_seed)->capture_default_str();

  // defend
  fs::path df_in, df_out, df_diff, df_prompts, df_mask, df_heat, df_quad;
  LocalizerFlags df_loc;
  RestorerConfig df_res;
  int df_tokens = 16;
  Seed df_seed = 0;
  auto* defend_cmd = app.add_subcommand("defend", "localize and restore one PNG image");
  defend_cmd->add_option("--image", df_in)->required();
  defend_cmd->add_option("--out", df_out)->required();
  defend_cmd->add_option("--diffusion", df_diff)->required();
  defend_cmd->add_option("--prompts", df_prompts, "tuned prompts; empty prompts when omitted");
  defend_cmd->add_option("--n", df_tokens, "empty prompt tokens")->capture_default_str();
  defend_cmd->add_option("--mask-out", df_mask);
  defend_cmd->add_option("--diff-out", df_heat);
  defend_cmd->add_option("--figure", df_quad);
  defend_cmd->add_option("--steps", df_res.steps, "restoration steps")->capture_default_str();
  defend_cmd->add_option("--gate", df_res.gate_area, "minimum mask area to restore")->capture_default_str();
  defend_cmd->add_option("--seed", df_seed)->capture_default_str();
  df_loc.add(defend_cmd);

  // evaluate
  ExperimentConfig ev;
  std::string ev_defense = "diffender";
  fs::path ev_out;
  LocalizerFlags ev_loc;
  AttackFlags ev_attack;
  auto* evaluate = app.add_subcommand("evaluate", "evaluate one defense against one attack");
  fs::path ev_data;
  evaluate->add_option("--data", ev_data, "dataset root; evaluates its test split")->required();
  evaluate->add_option("--classifier", ev.classifier_ckpt)->required();
  evaluate->add_option("--diffusion", ev.diffusion_ckpt);
  evaluate->add_option("--prompts", ev.prompts_ckpt);
  evaluate->add_option("--cache-dir", ev.cache_dir);
  evaluate->add_option("--defense", ev_defense, "none | diffender | jpeg | smoothing | purify")->capture_default_str();
  evaluate->add_option("--count", ev.num_eval_images)->capture_default_str();
  evaluate->add_option("--steps", ev.restorer.steps)->capture_default_str();
  evaluate->add_option("--n", ev.prompt_tokens)->capture_default_str();
  evaluate->add_option("--seed", ev.seed)->capture_default_str();
  evaluate->add_option("--name", ev.name)->capture_default_str();
  evaluate->add_option("--out", ev_out, "report path (.json or .csv)");
  ev_loc.add(evaluate);
  ev_attack.add(evaluate);

  // suite
  fs::path su_config;
  auto* suite = app.add_subcommand("suite", "run a defense x attack grid from a JSON config");
  suite->add_option("config", su_config)->required();

  // report
  std::vector<fs::path> rp_inputs;
  fs::path rp_out;
  auto* report = app.add_subcommand("report", "summarize report files as a markdown table");
  report->add_option("inputs", rp_inputs, "report .json/.csv files")->required();
  report->add_option("--out", rp_out, "write the table here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (make_ds->parsed()) {
      auto train = make_desk_dataset(ds_train, Split::train, ds_seed);
      auto test = make_desk_dataset(ds_test, Split::test, ds_seed);
      if (ds_ir) {
        train = to_infrared_proxy(train);
        test = to_infrared_proxy(test);
      }
      save_dataset(train, split_dir(ds_out, Split::train));
      save_dataset(test, split_dir(ds_out, Split::test));
      std::printf("wrote %zu train and %zu test images to %s\n", train.size(), test.size(), ds_out.c_str());
    } else if (train_clf->parsed()) {
      auto train = load_split(tc_data, Split::train);
      auto test = load_split(tc_data, Split::test);
      auto clf = train_classifier(train, test, tc_cfg, tc_seed);
      save_checkpoint(clf.to_checkpoint(), tc_out);
      std::printf("train_acc %.4f test_acc %.4f\n", clf.train_accuracy, clf.test_accuracy);
    } else if (train_diff->parsed()) {
      auto train = load_split(td_data, Split::train);
      if (td_ir_fraction < 0.0 || td_ir_fraction > 1.0) {
        throw ConfigError("--ir-fraction must lie in [0,1]");
      }
      train = with_infrared_copies(train, td_ir_fraction);
      if (td_cfg.class_names.empty()) {
        td_cfg.class_names = train.names().empty() ? desk_class_names() : train.names();
      }
      auto trained = train_diffusion(train, td_cfg, td_model, td_seed);
      save_checkpoint(trained.model.to_checkpoint(), td_out);
      std::printf("loss %.4f -> %.4f\n", trained.initial_loss, trained.final_loss);
    } else if (attack->parsed()) {
      auto test = load_split(at_data, Split::test);
      auto clf = Classifier::from_checkpoint(load_checkpoint(at_clf));
      ExperimentConfig cfg;
      cfg.attack = at_flags.spec();
      if (cfg.attack.kind == AttackKind::bpda_advp) {
        throw ConfigError("adaptive attacks run inside `evaluate` or `suite`, which bind the defense");
      }
      auto idx = correctly_classified(test, clf, at_count);
      auto subset = test.select(idx);
      auto key = eval_set_key(subset, clf, cfg);
      auto results = run_attack(subset.images(), subset.labels(), clf, cfg.attack);
      auto path = attack_cache_path(at_cache, cfg.attack, key);
      fs::create_directories(at_cache);
      save_attack_cache(results, cfg.attack, key, path);
      std::size_t ok = 0;
      for (const auto& r : results) {
        ok += r.success ? 1 : 0;
      }
      std::printf("%s success %zu/%zu -> %s\n", to_string(cfg.attack.kind).c_str(), ok, results.size(),
                  path.c_str());
    } else if (tune->parsed()) {
      auto test = load_split(tp_data, Split::test);
      auto clf = Classifier::from_checkpoint(load_checkpoint(tp_clf));
      auto model = DenoiserModel::from_checkpoint(load_checkpoint(tp_diff));
      auto sched = make_schedule(250);
      auto loc = tp_loc.get();
      try {
        tp_cfg.validate();
      } catch (const ContractError& e) {
        throw ConfigError(e.what());
      }
      auto items = make_fewshot(test, clf, tp_attack.spec(), tp_cfg.shots);
      auto init = LearnablePrompts::random(tp_tokens, model.embed_dim(), model.token_std() * tp_init_std,
                                           derive_seed(tp_cfg.seed, 5));
      if (!tp_idc.empty()) {
        init.idc = idc_from_checkpoint(load_checkpoint(tp_idc));
      }
      auto result = tune_prompts(items, init, tp_cfg, loc, model, sched, clf);
      save_checkpoint(result.prompts.to_checkpoint(), tp_out);
      if (!tp_traj.empty()) {
        write_trajectory_csv(result.trajectory, tp_traj);
      }
      std::printf("L_PT %.4f -> %.4f\n", result.initial_loss, result.final_loss);
    } else if (learn_idc->parsed()) {
      auto train = load_split(li_data, Split::train);
      auto model = DenoiserModel::from_checkpoint(load_checkpoint(li_diff));
      auto sched = make_schedule(250);
      std::vector<torch::Tensor> images;
      for (std::size_t i = 0; i < std::min<std::size_t>(train.size(), static_cast<std::size_t>(li_count)); ++i) {
        images.push_back(train.image(i));
      }
      auto result = learn_idc_token(images, default_idc_templates(), model, sched, li_steps, li_seed);
      save_checkpoint(idc_to_checkpoint(result.token), li_out);
      if (!li_traj.empty()) {
        write_trajectory_csv(result.trajectory, li_traj);
      }
      std::printf("inversion loss %.4f -> %.4f\n", result.initial_loss, result.final_loss);
    } else if (defend_cmd->parsed()) {
      if (!fs::exists(df_in)) {
        throw MissingArtifactError("image not found: " + df_in.string());
      }
      auto image = read_png(df_in);
      auto model = DenoiserModel::from_checkpoint(load_checkpoint(df_diff));
      auto sched = make_schedule(250);
      auto prompts = df_prompts.empty() ? LearnablePrompts::zeros(df_tokens, model.embed_dim())
                                        : LearnablePrompts::from_checkpoint(load_checkpoint(df_prompts));
      auto out = defend(image, prompts.defense_prompts(), df_loc.get(), df_res, model, sched, df_seed);
      write_png(out.restored, df_out);
      if (!df_mask.empty()) {
        write_mask_png(out.mask, df_mask);
      }
      if (!df_heat.empty()) {
        write_heatmap_png(out.diff, df_heat);
      }
      if (!df_quad.empty()) {
        write_quadriptych(image, out.diff, out.mask, out.restored, df_quad);
      }
      std::printf("mask area %.4f restored %s\n", out.area_fraction, out.gated ? "yes" : "no");
    } else if (evaluate->parsed()) {
      ev.eval_dir = split_dir(ev_data, Split::test);
      ev.defense = defense_kind_from_string(ev_defense);
      ev.attack = ev_attack.spec();
      ev.localizer = ev_loc.get();
      auto rep = evaluate_defense(ev);
      if (!ev_out.empty()) {
        write_report(rep, ev_out, ev_out.extension() == ".csv" ? ReportFormat::csv : ReportFormat::json);
      }
      std::cout << render_summary_table({rep});
    } else if (suite->parsed()) {
      auto cfg = load_suite_config(su_config);
      auto result = run_experiment_suite(cfg);
      std::cout << result.table;
      for (const auto& f : result.threshold_failures) {
        std::cerr << "threshold: " << f << "\n";
      }
      if (!result.threshold_failures.empty()) {
        return kExitThreshold;
      }
    } else if (report->parsed()) {
      std::vector<DefenseReport> reports;
      for (const auto& p : rp_inputs) {
        if (p.extension() == ".csv") {
          auto rs = read_reports_csv(p);
          reports.insert(reports.end(), rs.begin(), rs.end());
        } else {
          reports.push_back(read_report_json(p));
        }
      }
      auto table = render_summary_table(reports);
      if (rp_out.empty()) {
        std::cout << table;
      } else {
        std::ofstream(rp_out) << table;
      }
    }
  } catch (const MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return kExitMissing;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ContractError& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
