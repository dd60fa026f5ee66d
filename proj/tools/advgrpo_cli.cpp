// advgrpo command-line driver.
#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "advgrpo/errors.hpp"
#include "advgrpo/harness.hpp"

using namespace advgrpo;

namespace {

struct Common {
  std::string config = "default";
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::string stage;
  std::vector<std::string> sets;
  int threads = 0;
  bool adversarial = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "config file, or 'default'");
  cmd->add_option("--seed", c.seed, "master seed");
  cmd->add_option("--out", c.out, "run directory");
  cmd->add_option("--set", c.sets, "override a config key: key=value")->take_all();
  cmd->add_option("--threads", c.threads, "worker threads for evaluation");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = load_config(c.config);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.seeds.master = *c.seed;
  if (!c.out.empty()) cfg.out = c.out;
  if (c.threads > 0) cfg.threads = c.threads;
  validate(cfg);
  return cfg;
}

std::string training_stage(std::string_view verb, bool adversarial) {
  return std::string(adversarial ? "adv_" : "clean_") + std::string(verb);
}

// A checkpoint from --checkpoint, or the run directory's one for --stage.
std::pair<std::string, ParamSet> load_model(const Common& c, const RunConfig& cfg, const RunPaths& paths,
                                            const TaskData& data) {
  if (c.checkpoint.empty() && c.stage.empty()) throw ConfigError("need --checkpoint or --stage");
  const std::filesystem::path path = c.checkpoint.empty() ? paths.checkpoint(c.stage) : std::filesystem::path(c.checkpoint);
  auto ck = read_checkpoint(path);
  check_provenance(ck.manifest, task_hash(data), training_hash(cfg));
  return {ck.manifest.stage, std::move(ck.params)};
}

void print_breakdown(const std::string& label, const AccuracyBreakdown& b, int modalities) {
  const auto names = modality_names(modalities);
  std::cout << label << ": overall " << format_double(b.overall);
  for (int m = 0; m < modalities; ++m) std::cout << "  " << names[m] << " " << format_double(b.modality[m]);
  std::cout << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"Adversarially robust SFT + GRPO lab on a synthetic structured-output VQA task"};
  app.require_subcommand(1);
  Common c;

  auto* gendata = app.add_subcommand("gendata", "generate the synthetic task");
  auto* sft = app.add_subcommand("sft", "supervised fine-tuning (AT-SFT with --adversarial)");
  auto* grpo = app.add_subcommand("grpo", "GRPO from the SFT checkpoint (AT-GRPO with --adversarial)");
  auto* attack = app.add_subcommand("attack", "FGSM/PGD sweep and C&W on a checkpoint");
  auto* certify = app.add_subcommand("certify", "randomized-smoothing certification of a checkpoint");
  auto* evaluate = app.add_subcommand("evaluate", "clean, attacked and certified evaluation of a checkpoint");
  auto* report = app.add_subcommand("report", "render tables from evaluated stages");
  auto* pipeline = app.add_subcommand("pipeline", "run every stage end to end");
  for (auto* cmd : {gendata, sft, grpo, attack, certify, evaluate, report, pipeline}) add_common(cmd, c);
  for (auto* cmd : {sft, grpo}) cmd->add_flag("--adversarial", c.adversarial, "adversarial variant");
  for (auto* cmd : {attack, certify, evaluate}) {
    cmd->add_option("--checkpoint", c.checkpoint, "checkpoint file");
    cmd->add_option("--stage", c.stage, "stage whose checkpoint to use (clean_sft, clean_grpo, adv_sft, adv_grpo)");
  }
  pipeline->add_option("--stage", c.stage, "recompute from this stage onwards");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  const RunConfig cfg = resolve(c);
  const RunPaths paths{cfg.out};
  std::filesystem::create_directories(paths.root);

  if (pipeline->parsed()) {
    PipelineOptions opts;
    if (!c.stage.empty()) opts.from_stage = c.stage;
    opts.progress = &std::cerr;
    run_pipeline(cfg, opts);
    std::cout << "report written to " << paths.report_dir().string() << "\n";
    return 0;
  }

  const TaskData data = ensure_data(cfg, paths);
  if (gendata->parsed()) {
    std::cout << data.train.samples.size() << " train / " << data.test.samples.size() << " test samples, task "
              << task_hash(data) << "\n";
    return 0;
  }
  if (sft->parsed() || grpo->parsed()) {
    const auto stage = training_stage(sft->parsed() ? "sft" : "grpo", c.adversarial);
    const auto r = run_stage(cfg, paths, data, stage, true);
    std::cout << stage << ": " << paths.checkpoint(stage).string() << " " << params_digest(r.params) << "\n";
    return 0;
  }
  if (report->parsed()) {
    std::vector<EvalReport> reports;
    for (auto s : kStages) {
      if (std::filesystem::exists(paths.eval(s))) reports.push_back(read_eval_report(paths.eval(s)));
    }
    if (reports.empty()) throw IoError("no evaluation reports under " + (paths.root / "eval").string());
    render_report(reports, paths.report_dir(), cfg.task.modalities, cfg.sft_adv.epsilon);
    std::cout << "report written to " << paths.report_dir().string() << "\n";
    return 0;
  }

  auto [stage, params] = load_model(c, cfg, paths, data);
  const auto& test = data.test.samples;
  const int m = cfg.task.modalities;
  if (attack->parsed()) {
    const auto ev = evaluate_under_attack(params, test, cfg.attack, m, cfg.weighted_overall, cfg.threads);
    std::filesystem::create_directories(paths.attacks(stage).parent_path());
    write_attack_table(paths.attacks(stage), ev.rows);
    for (const auto& curve : ev.curves) {
      for (const auto& p : curve.points) {
        print_breakdown(std::string(attack_name(curve.kind)) + " eps=" + format_double(p.epsilon), p.accuracy, m);
      }
      if (curve.aua) std::cout << attack_name(curve.kind) << " AUA " << format_double(*curve.aua) << "\n";
    }
    if (ev.cw) {
      std::cout << "cw: " << ev.cw->successes << "/" << ev.cw->samples << " successful, median L2 "
                << format_double(ev.cw->median_l2) << "\n";
    }
    return 0;
  }
  if (certify->parsed()) {
    const std::size_t n = cfg.certify_samples > 0
                              ? std::min<std::size_t>(test.size(), static_cast<std::size_t>(cfg.certify_samples))
                              : test.size();
    const auto subset = std::span(test).subspan(0, n);
    const auto certs = certify_all(params, subset, cfg.smoothing, cfg.seeds.certify_seed(), cfg.threads);
    std::filesystem::create_directories(paths.certificates(stage).parent_path());
    write_certificate_table(paths.certificates(stage), certs, subset);
    long certified = 0;
    for (const auto& ct : certs) certified += ct.prediction.has_value();
    std::cout << certified << "/" << certs.size() << " certified\n";
    for (const auto& [r, acc] : certified_accuracy_curve(certs, subset, cfg.radii)) {
      std::cout << "radius " << format_double(r) << ": certified accuracy " << format_double(acc) << "\n";
    }
    return 0;
  }
  // evaluate
  const auto r = evaluate_checkpoint(cfg, paths, data, stage, params);
  write_eval_report(paths.eval(stage), r);
  print_breakdown(stage + " clean", r.clean, m);
  std::cout << "wrote " << paths.eval(stage).string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  }
}
