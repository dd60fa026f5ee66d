#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "advgrpo/errors.hpp"
#include "advgrpo/harness.hpp"

using namespace advgrpo;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("advgrpo_harness_" + name);
  fs::remove_all(dir);
  return dir;
}

// Small enough to run the whole pipeline in a couple of seconds.
const char* kTinyConfig = R"(
# tiny run
task.counts = 24, 24, 24, 24, 24, 24, 24, 24
policy.hidden = 16
sft.epochs = 1
sft.adv.epochs = 1
grpo.iterations = 3
grpo.minibatch = 8
attack.epsilons = 0, 0.005, 0.01
attack.cw.samples = 4
attack.cw.steps = 20
attack.cw.search_rounds = 1
smoothing.n_pred = 10
smoothing.n_cert = 40
smoothing.samples = 8
)";

RunConfig tiny(const fs::path& out) {
  auto c = parse_config(kTinyConfig);
  c.out = out;
  return c;
}

}  // namespace

TEST_CASE("config parse, dump round trip and errors") {
  const auto c = parse_config("grpo.k = 4  # comment\nsft.adv.epsilon = 0.02\nseeds.sft = 7\nattack.kinds = pgd\n");
  CHECK(c.grpo.group_size == 4);
  CHECK(c.sft_adv.epsilon == 0.02);
  CHECK(c.seeds.sft_seed() == 7);
  CHECK(c.attack.kinds == std::vector<AttackKind>{AttackKind::kPgd});
  const auto dump = dump_config(c);
  CHECK(dump_config(parse_config(dump)) == dump);
  CHECK(config_hash(parse_config(dump)) == config_hash(c));
  CHECK(config_hash(c) != config_hash(RunConfig{}));
  CHECK(dump.find("run.out") == std::string::npos);

  CHECK_THROWS_AS(parse_config("grpo.kk = 4\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("grpo.k = four\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("grpo.k 4\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("grpo.k = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("attack.epsilons = 0.01, 0.005\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/advgrpo.cfg"), IoError);
}

TEST_CASE("seeds are derived from the master unless pinned") {
  Seeds a, b;
  b.master = 43;
  CHECK(a.data_seed() == 42);
  CHECK(a.sft_seed() != a.grpo_seed());
  CHECK(a.sft_seed() != b.sft_seed());
  a.grpo = 9;
  CHECK(a.grpo_seed() == 9);
}

TEST_CASE("training hash ignores evaluation-only keys") {
  RunConfig a, b;
  b.attack.steps = 20;
  b.smoothing.sigma = 0.5;
  CHECK(training_hash(a) == training_hash(b));
  CHECK(config_hash(a) != config_hash(b));
  b.grpo.beta_kl = 0.1;
  CHECK(training_hash(a) != training_hash(b));
}

TEST_CASE("overall is the unweighted modality mean") {
  const std::vector<double> acc = {0.58, 0.76, 0.89, 0.80, 0.78, 0.87, 0.72, 0.84};
  const std::vector<long> counts = {10, 200, 30, 40, 50, 60, 70, 80};
  CHECK(std::abs(100 * aggregate_overall(acc, counts, false) - 78.00) <= 1e-9);
  // Sample weighting gives a different number on the same row.
  CHECK(std::abs(100 * aggregate_overall(acc, counts, true) - 78.00) > 0.1);
  const std::vector<long> with_empty = {10, 0, 30, 40, 50, 60, 70, 80};
  CHECK(aggregate_overall(acc, with_empty, false) ==
        doctest::Approx((0.58 + 0.89 + 0.80 + 0.78 + 0.87 + 0.72 + 0.84) / 7));
}

TEST_CASE("a constant policy scores at chance") {
  TaskSpec spec;
  const auto rule = make_rule(spec, 42);
  const auto data = gen_dataset(rule, spec, 42);
  const auto p = zero_params(PolicyConfig{});
  const auto b = evaluate_clean(p, data.test.samples, spec.modalities, true);
  const double n = static_cast<double>(data.test.samples.size());
  CHECK(std::abs(b.overall - 0.25) <= 3 * std::sqrt(0.25 * 0.75 / n));
  for (double v : b.modality) CHECK((v >= 0 && v <= 1));

  PolicyConfig wrong;
  wrong.d = 3;
  CHECK_THROWS_AS(evaluate_clean(zero_params(wrong), data.test.samples, 8, false), ConfigError);
}

TEST_CASE("epsilon 0 of the sweep is the clean evaluation") {
  TaskSpec spec;
  spec.counts.assign(8, 20);
  const auto data = gen_dataset(make_rule(spec, 3), spec, 3);
  const auto p = init_params(PolicyConfig{}, 5, 0.5);
  AttackSweepConfig sweep;
  sweep.epsilons = {0, 0.01};
  sweep.cw_samples = 0;
  const auto clean = evaluate_clean(p, data.test.samples, 8, false);
  const auto ev = evaluate_under_attack(p, data.test.samples, sweep, 8, false, 2);
  REQUIRE(ev.curves.size() == 2);
  for (const auto& c : ev.curves) {
    CHECK(c.points[0].accuracy.overall == clean.overall);
    CHECK(c.points[0].accuracy.modality == clean.modality);
    CHECK(c.aua.has_value());
  }
  CHECK_FALSE(ev.cw.has_value());
}

TEST_CASE("report shape, determinism and the empty sweep") {
  EvalReport r;
  r.method = "m";
  r.clean.modality = {1, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5};
  r.clean.counts.assign(8, 2);
  r.clean.overall = aggregate_overall(r.clean.modality, r.clean.counts, false);
  r.config_hash = "c";
  r.checkpoint_hash = "k";
  r.task_hash = "t";

  const auto a = scratch("report_a"), b = scratch("report_b");
  render_report(std::span(&r, 1), a, 8, 0.01);
  render_report(std::span(&r, 1), b, 8, 0.01);
  for (const char* f : {"summary.tsv", "summary.txt", "robustness.tsv", "accuracy_vs_eps.tsv", "certified_vs_radius.tsv"}) {
    CHECK(slurp(a / f) == slurp(b / f));
  }
  const auto tsv = slurp(a / "summary.tsv");
  CHECK(tsv.rfind("method\tsetting\tCT\tMRI\tX-Ray\tUltrasound\tDermoscopy\tFundus\tOCT\tMicroscopy\tOverall\n", 0) == 0);
  CHECK(tsv.find("m\tclean\t100.00\t50.00") != std::string::npos);
  CHECK(tsv.find("56.25") != std::string::npos);
  CHECK(slurp(a / "robustness.tsv").find("AUA") == std::string::npos);
  CHECK_THROWS_AS(render_report({}, a, 8, 0.01), ConfigError);

  // With a curve the AUA column appears.
  AttackCurve c;
  c.points = {{0.0, r.clean}, {0.01, r.clean}};
  c.aua = r.clean.overall;
  r.curves.push_back(c);
  render_report(std::span(&r, 1), a, 8, 0.01);
  CHECK(slurp(a / "robustness.tsv").find("\tAUA\n") != std::string::npos);
  CHECK(slurp(a / "summary.tsv").find("pgd@0.01") != std::string::npos);
}

TEST_CASE("eval report JSON round trip") {
  EvalReport r;
  r.method = "adv_grpo";
  r.clean = {{0.1, 0.2}, {3, 4}, 0.15};
  AttackCurve c;
  c.kind = AttackKind::kFgsm;
  c.points = {{0.0, r.clean}, {0.5, r.clean}};
  c.aua = 0.123456789;
  r.curves = {c};
  r.cw = CwSummary{10, 7, 0.3};
  r.certification = CertificationSummary{5, 3, 2, {{0.0, 0.4}, {0.1, 0.2}}};
  r.config_hash = "abc";
  r.seed = 99;
  const auto dir = scratch("json");
  write_eval_report(dir / "r.json", r);
  const auto back = read_eval_report(dir / "r.json");
  CHECK(back.clean.modality == r.clean.modality);
  CHECK(back.curves[0].kind == AttackKind::kFgsm);
  CHECK(*back.curves[0].aua == *c.aua);
  CHECK(back.cw->successes == 7);
  CHECK(back.certification->curve == r.certification->curve);
  CHECK(back.seed == 99);
  write_eval_report(dir / "r2.json", back);
  CHECK(slurp(dir / "r.json") == slurp(dir / "r2.json"));
}

TEST_CASE("provenance mismatch is refused") {
  CheckpointManifest m{"clean_sft", 1, "task", "cfg"};
  CHECK_NOTHROW(check_provenance(m, "task", "cfg"));
  CHECK_THROWS_AS(check_provenance(m, "other", "cfg"), ConfigError);
  CHECK_THROWS_AS(check_provenance(m, "task", "other"), ConfigError);
}

TEST_CASE("pipeline: structure, resume and reproducibility") {
  const auto dir = scratch("pipe");
  auto cfg = tiny(dir / "a");
  cfg.pipeline = PipelineKind::kClean;
  auto reports = run_pipeline(cfg);
  CHECK(reports.size() == 2);
  CHECK(fs::exists(dir / "a/checkpoints/clean_sft.json"));
  CHECK(fs::exists(dir / "a/checkpoints/clean_grpo.json"));
  CHECK_FALSE(fs::exists(dir / "a/checkpoints/adv_sft.json"));

  cfg.pipeline = PipelineKind::kBoth;
  std::ostringstream log;
  PipelineOptions opts;
  opts.progress = &log;
  reports = run_pipeline(cfg, opts);
  REQUIRE(reports.size() == 4);
  CHECK(log.str().find("clean_sft: reused") != std::string::npos);
  CHECK(log.str().find("adv_sft: trained") != std::string::npos);
  for (const auto& r : reports) {
    CHECK(r.config_hash == config_hash(cfg));
    CHECK(r.certification->samples == 8);
    CHECK(r.cw->samples == 4);
  }

  auto cfg_b = tiny(dir / "b");
  run_pipeline(cfg_b);
  for (const char* f : {"checkpoints/clean_sft.json", "checkpoints/clean_grpo.json", "checkpoints/adv_sft.json",
                        "checkpoints/adv_grpo.json", "report/summary.tsv", "report/summary.txt",
                        "report/robustness.tsv", "report/certified_vs_radius.tsv", "eval/adv_grpo.json"}) {
    CHECK_MESSAGE(slurp(dir / "a" / f) == slurp(dir / "b" / f), f);
  }

  // Forcing a restart reproduces the same bytes.
  opts.from_stage = "clean_grpo";
  log.str("");
  run_pipeline(cfg_b, opts);
  CHECK(log.str().find("clean_sft: reused") != std::string::npos);
  CHECK(log.str().find("clean_grpo: trained") != std::string::npos);
  CHECK(slurp(dir / "a/report/summary.txt") == slurp(dir / "b/report/summary.txt"));

  // A stage failure leaves a machine-readable record.
  auto bad = tiny(dir / "c");
  bad.pipeline = PipelineKind::kClean;
  bad.sft.learning_rate = 1e308;
  bad.sft.clip_norm = 0;
  CHECK_THROWS_AS(run_pipeline(bad), TrainingDiverged);
  const auto err = slurp(dir / "c/error.json");
  CHECK(err.find("\"stage\": \"clean_sft\"") != std::string::npos);
  CHECK(err.find("TrainingDiverged") != std::string::npos);
}
