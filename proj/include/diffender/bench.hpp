#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "diffender/attacker.hpp"
#include "diffender/baselines.hpp"
#include "diffender/report.hpp"
#include "diffender/tuner.hpp"

namespace diffender {

enum class DefenseKind { none, diffender, jpeg, smoothing, purify };
std::string to_string(DefenseKind kind);
/// Throws ConfigError naming an unknown defense.
DefenseKind defense_kind_from_string(const std::string& name);

struct BaselineConfig {
  int jpeg_quality = 75;
  int smoothing_window = 3;
  double purify_t_star = 0.5;
  int purify_steps = 250;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::filesystem::path eval_dir;          ///< dataset directory read with load_dataset
  std::filesystem::path diffusion_ckpt;
  std::filesystem::path classifier_ckpt;
  std::filesystem::path prompts_ckpt;      ///< optional; zero prompts when empty
  std::filesystem::path cache_dir;         ///< attack caches; empty disables caching
  DefenseKind defense = DefenseKind::diffender;
  AttackSpec attack;
  LocalizerConfig localizer;
  RestorerConfig restorer;
  BaselineConfig baselines;
  int prompt_tokens = 16;
  int num_eval_images = 128;
  Seed seed = 0;

  /// Canonical JSON of every field that affects results.
  std::string canonical() const;
  std::string hash() const;
};

/// In-memory inputs of an evaluation. `model` may be null for defenses that
/// do not need it.
struct EvalContext {
  const Dataset* pool = nullptr;           ///< candidate images; correctly classified ones are used
  const Classifier* clf = nullptr;
  const NoisePredictor* model = nullptr;
  const NoiseSchedule* sched = nullptr;
  LearnablePrompts prompts;
};

/// The configured defense bound to the context's model and prompts.
std::unique_ptr<Defense> make_defense(const ExperimentConfig& cfg, const EvalContext& ctx);

/// Indices of the first `count` pool items the classifier gets right.
std::vector<std::int64_t> correctly_classified(const Dataset& pool, const Classifier& clf, std::int64_t count);

/// `shots` attacked items from the end of the correctly classified pool, so
/// evaluation can draw from the start. Attack seeds are offset past any
/// evaluation index.
std::vector<FewShotItem> make_fewshot(const Dataset& pool, const Classifier& clf, const AttackSpec& spec, int shots);

/// The training set plus infrared-proxy copies of its first
/// round(fraction * N) items, replicated to three channels.
Dataset with_infrared_copies(const Dataset& train, double fraction);

/// Cache key of the evaluated image set (pixels, labels, classifier weights,
/// and for adaptive attacks the defense configuration).
std::string eval_set_key(const Dataset& subset, const Classifier& clf, const ExperimentConfig& cfg);

struct EvalOutputs {
  DefenseReport report;
  std::vector<AttackResult> attacks;
  std::vector<DefenseOutput> diffender_outputs;  ///< attacked images, diffender only
  torch::Tensor defended_adv;                   ///< [N,C,H,W]
};

/// Filters the pool to correctly classified images, attacks them (through the
/// cache when cfg.cache_dir is set), applies the defense to clean and attacked
/// images and reports clean/robust accuracy, ASR and mask IoU.
EvalOutputs evaluate_defense_detailed(const ExperimentConfig& cfg, const EvalContext& ctx);
DefenseReport evaluate_defense(const ExperimentConfig& cfg, const EvalContext& ctx);
/// Loads the dataset and checkpoints named in cfg; a missing checkpoint
/// raises MissingArtifactError (a ConfigError).
DefenseReport evaluate_defense(const ExperimentConfig& cfg);

struct Threshold {
  std::string defense, attack, metric;
  std::optional<double> min, max;
};

struct SuiteConfig {
  ExperimentConfig base;                 ///< shared settings; defense and attack vary
  std::vector<DefenseKind> defenses;
  std::vector<std::pair<std::string, AttackSpec>> attacks;  ///< (label, spec)
  std::filesystem::path out_dir;
  int figures = 4;                       ///< quadriptych PNGs per diffender cell
  std::vector<Threshold> thresholds;
};

/// Parses the JSON suite schema; unknown keys raise ConfigError listing all of them.
SuiteConfig parse_suite_config(const std::string& json_text, const std::filesystem::path& base_dir = {});
SuiteConfig load_suite_config(const std::filesystem::path& path);

struct SuiteResult {
  std::vector<DefenseReport> reports;
  std::string table;
  std::vector<std::string> threshold_failures;
};

/// Runs the defense x attack grid, writing per-cell reports (CSV and JSON),
/// combined.csv, summary.md and figures under out_dir.
SuiteResult run_experiment_suite(const SuiteConfig& suite);
/// Same grid with in-memory artifacts.
SuiteResult run_experiment_suite(const SuiteConfig& suite, const EvalContext& ctx);

/// Every report field except wall-clock timings, for reproducibility checks.
bool same_results(const DefenseReport& a, const DefenseReport& b);

}  // namespace diffender
