#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "advgrpo/attacks.hpp"
#include "advgrpo/grpo.hpp"
#include "advgrpo/sft.hpp"
#include "advgrpo/smoothing.hpp"
#include "advgrpo/synthenv.hpp"

namespace advgrpo {

enum class PipelineKind { kClean, kAdversarial, kBoth };

std::string_view pipeline_name(PipelineKind kind);
PipelineKind parse_pipeline(std::string_view name);

struct AttackSweepConfig {
  std::vector<double> epsilons = {0, 0.0025, 0.005, 0.01, 0.02, 0.04};
  std::vector<AttackKind> kinds = {AttackKind::kFgsm, AttackKind::kPgd};
  double alpha_ratio = 0.25;  // PGD step = alpha_ratio * epsilon
  int steps = 10;
  Norm norm = Norm::kLinf;
  int cw_samples = 100;  // C&W runs on the first cw_samples test samples; 0 disables it
  CwConfig cw{1.0, 0.0, 0.002, 100, 5};
};

struct Seeds {
  std::uint64_t master = 42;
  // Unset entries are derived from `master`.
  std::optional<std::uint64_t> data, init, sft, at_sft, grpo, at_grpo, certify;

  std::uint64_t data_seed() const;
  std::uint64_t init_seed() const;
  std::uint64_t sft_seed() const;
  std::uint64_t at_sft_seed() const;
  std::uint64_t grpo_seed() const;
  std::uint64_t at_grpo_seed() const;
  std::uint64_t certify_seed() const;
};

struct RunConfig {
  TaskSpec task;
  RewardConfig reward;
  int hidden = 64;
  PolicyMode mode = PolicyMode::kFactored;
  double init_scale = 0.05;
  SftConfig sft;
  SftAdvConfig sft_adv;
  GrpoConfig grpo;
  GrpoAdvConfig grpo_adv;
  AttackSweepConfig attack;
  SmoothingConfig smoothing;
  int certify_samples = 0;  // 0: the whole test split
  std::vector<double> radii = {0, 0.025, 0.05, 0.075, 0.1, 0.125, 0.15, 0.2};
  Seeds seeds;
  PipelineKind pipeline = PipelineKind::kBoth;
  bool weighted_overall = false;
  std::filesystem::path out = "runs/default";
  int threads = 1;

  PolicyConfig policy() const;
  SftConfig sft_config(bool adversarial) const;
  GrpoConfig grpo_config(bool adversarial) const;
};

// Checks every sub-config and the cross-config shape constraints.
void validate(const RunConfig& config);

// Applies one `key = value` setting; unknown keys and bad values throw ConfigError.
void apply_setting(RunConfig& config, std::string_view key, std::string_view value);

// Flat text of dotted keys; '#' starts a comment. "default" (or an empty
// path) yields the built-in defaults.
RunConfig load_config(const std::string& path_or_default);
RunConfig parse_config(std::string_view text);

// Every result-affecting key in sorted order, one `key = value` per line.
// Parsing the dump reproduces the config.
std::string dump_config(const RunConfig& config);
std::string config_hash(const RunConfig& config);
// Hash over the keys that affect training only; stored in checkpoint
// manifests so evaluation-only changes keep checkpoints reusable.
std::string training_hash(const RunConfig& config);

std::vector<std::string> modality_names(int modalities);

// ---- Evaluation -------------------------------------------------------------

struct AccuracyBreakdown {
  std::vector<double> modality;  // per-modality accuracy (0 with count 0 when a modality is empty)
  std::vector<long> counts;
  double overall = 0.0;
};

// Unweighted mean of modality accuracies, or sample-weighted when `weighted`.
double aggregate_overall(std::span<const double> modality_accuracy, std::span<const long> counts, bool weighted);

// Correctness flags and their breakdown.
AccuracyBreakdown breakdown(std::span<const Sample> samples, std::span<const char> correct, int modalities,
                            bool weighted);

// Greedy decode -> serialized text -> parsed answer; unparseable output
// counts as incorrect. Throws ConfigError on a shape mismatch.
AccuracyBreakdown evaluate_clean(const ParamSet& params, std::span<const Sample> samples, int modalities,
                                 bool weighted);

struct AttackCurvePoint {
  double epsilon = 0.0;
  AccuracyBreakdown accuracy;
};

struct AttackCurve {
  AttackKind kind = AttackKind::kPgd;
  Norm norm = Norm::kLinf;
  std::vector<AttackCurvePoint> points;
  std::optional<double> aua;  // needs >= 2 points
};

struct CwSummary {
  long samples = 0;
  long successes = 0;
  double median_l2 = 0.0;  // over successes
};

struct AttackEvaluation {
  std::vector<AttackCurve> curves;
  std::optional<CwSummary> cw;
  std::vector<AttackRow> rows;
};

// Accuracy against the ground truth at each epsilon, for each attack kind.
// The epsilon = 0 point is the clean evaluation itself.
AttackEvaluation evaluate_under_attack(const ParamSet& params, std::span<const Sample> samples,
                                       const AttackSweepConfig& sweep, int modalities, bool weighted, int threads);

struct CertificationSummary {
  long samples = 0;
  long certified = 0;
  long certified_correct = 0;
  std::vector<std::pair<double, double>> curve;  // (radius, certified accuracy)
};

struct EvalReport {
  std::string method;
  AccuracyBreakdown clean;
  std::vector<AttackCurve> curves;
  std::optional<CwSummary> cw;
  std::optional<CertificationSummary> certification;
  std::string config_hash;
  std::string checkpoint_hash;
  std::string task_hash;
  std::uint64_t seed = 0;
};

void write_eval_report(const std::filesystem::path& path, const EvalReport& report);
EvalReport read_eval_report(const std::filesystem::path& path);

// Refuses a checkpoint whose manifest does not match the dataset and config.
void check_provenance(const CheckpointManifest& manifest, const std::string& task_hash,
                      const std::string& config_hash);

// ---- Reports ----------------------------------------------------------------

// Writes summary.tsv, summary.txt, robustness.tsv, accuracy_vs_eps.tsv and
// certified_vs_radius.tsv into `dir`. `train_epsilon` selects the attacked
// row of the summary table.
void render_report(std::span<const EvalReport> reports, const std::filesystem::path& dir, int modalities,
                   double train_epsilon);

// ---- Pipeline ---------------------------------------------------------------

inline constexpr std::string_view kStages[] = {"gendata",  "clean_sft", "clean_grpo", "adv_sft",
                                               "adv_grpo", "evaluate",  "report"};

struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path data_dir() const { return root / "data"; }
  std::filesystem::path train() const { return data_dir() / "train.jsonl"; }
  std::filesystem::path test() const { return data_dir() / "test.jsonl"; }
  std::filesystem::path rule() const { return data_dir() / "rule.json"; }
  std::filesystem::path checkpoint(std::string_view stage) const {
    return root / "checkpoints" / (std::string(stage) + ".json");
  }
  std::filesystem::path log(std::string_view stage) const { return root / "logs" / (std::string(stage) + ".tsv"); }
  std::filesystem::path eval(std::string_view stage) const { return root / "eval" / (std::string(stage) + ".json"); }
  std::filesystem::path attacks(std::string_view stage) const {
    return root / "eval" / (std::string(stage) + ".attacks.tsv");
  }
  std::filesystem::path certificates(std::string_view stage) const {
    return root / "eval" / (std::string(stage) + ".certificates.tsv");
  }
  std::filesystem::path report_dir() const { return root / "report"; }
  std::filesystem::path error() const { return root / "error.json"; }
  std::filesystem::path config() const { return root / "config.txt"; }
};

struct TaskData {
  PlantedRule rule;
  Dataset train;
  Dataset test;
};

std::string task_hash(const TaskData& data);

// Generates the task data from the config and writes it under data/.
TaskData ensure_data(const RunConfig& config, const RunPaths& paths);

struct StageResult {
  ParamSet params;
  bool reused = false;
};

// One training stage ("clean_sft", "clean_grpo", "adv_sft", "adv_grpo"),
// reusing a checkpoint whose manifest matches the config.
StageResult run_stage(const RunConfig& config, const RunPaths& paths, const TaskData& data, std::string_view stage,
                      bool force);

EvalReport evaluate_checkpoint(const RunConfig& config, const RunPaths& paths, const TaskData& data,
                               std::string_view stage, const ParamSet& params);

struct PipelineOptions {
  // Recompute this stage and every later one even when artifacts exist.
  std::optional<std::string> from_stage;
  std::ostream* progress = nullptr;
};

// gendata -> SFT -> GRPO (per selected pipeline) -> evaluation and
// certification -> report. A failure writes error.json and rethrows.
std::vector<EvalReport> run_pipeline(const RunConfig& config, const PipelineOptions& options = {});

}  // namespace advgrpo
