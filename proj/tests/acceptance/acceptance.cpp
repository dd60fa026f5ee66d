// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails.
//
//   acceptance <path-to-advgrpo-cli> <scratch-dir>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "advgrpo/attacks.hpp"
#include "advgrpo/errors.hpp"
#include "advgrpo/grpo.hpp"
#include "advgrpo/harness.hpp"
#include "advgrpo/perturb.hpp"
#include "advgrpo/sft.hpp"
#include "advgrpo/smoothing.hpp"
#include "advgrpo/synthenv.hpp"

using namespace advgrpo;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kExact = 1e-9;
constexpr double kFdTolerance = 1e-6;
constexpr double kFdStep = 1e-3;
constexpr int kFdSeeds = 20;
constexpr double kNormalization = 1e-12;
constexpr int kDraws = 100000;
constexpr double kSigmas = 3.0;
constexpr int kCoverageTrials = 10000;
constexpr long kMinCertified = 200;
constexpr double kAttackFraction = 0.9;
constexpr double kCleanFloor = 0.90;
constexpr double kAttackDrop = 0.30;
constexpr double kRobustGap = 0.20;
constexpr double kCleanGap = 0.08;
constexpr double kRewardRise = 0.20;
constexpr double kEmaDecay = 0.9;
constexpr int kVarianceGroups = 200;
constexpr double kBudget1 = 1.0, kBudget2 = 30.0, kBudget4 = 60.0, kBudget5 = 300.0, kBudget7 = 900.0;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;
};

void require(Outcome& o, bool ok, const std::string& what) {
  if (!ok) {
    o.pass = false;
    o.detail += (o.detail.empty() ? "" : "; ") + what;
  }
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

PolicyConfig small_policy(PolicyMode mode = PolicyMode::kFactored) {
  PolicyConfig c;
  c.d = 3;
  c.choices = 2;
  c.vocab = 3;
  c.trace_len = 2;
  c.questions = 2;
  c.hidden = 4;
  c.mode = mode;
  return c;
}

Sample random_sample(const PolicyConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  Sample s;
  s.image.resize(c.d);
  rng.fill_normal(s.image, 1.0);
  s.question = static_cast<int>(rng.below(c.questions));
  s.choices = c.choices;
  s.truth = static_cast<AnswerId>(rng.below(c.choices));
  s.evidence = {1};
  return s;
}

std::vector<StructuredOutput> all_outputs(const PolicyConfig& c) {
  std::vector<StructuredOutput> out;
  std::size_t traces = 1;
  for (int t = 0; t < c.trace_len; ++t) traces *= c.vocab;
  for (std::size_t code = 0; code < traces; ++code) {
    std::vector<TokenId> trace(c.trace_len);
    auto rest = code;
    for (int t = 0; t < c.trace_len; ++t) {
      trace[t] = static_cast<TokenId>(rest % c.vocab);
      rest /= c.vocab;
    }
    for (int a = 0; a < c.choices; ++a) out.push_back({trace, a});
  }
  return out;
}

// ---- 1 ---------------------------------------------------------------------

Outcome exact_math() {
  Outcome o;
  const auto t0 = Clock::now();
  const std::vector<double> r = {1, 2, 3};
  const auto a = normalized_advantages(r, 0.0);
  require(o, std::abs(a[0] + 1) <= kExact && std::abs(a[1]) <= kExact && std::abs(a[2] - 1) <= kExact,
          "advantages of [1,2,3]");
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(8);
    rng.fill_normal(x, 1.0);
    const auto adv = normalized_advantages(x, 0.0);
    double sum = 0;
    for (double v : adv) sum += v;
    require(o, std::abs(sum) <= kExact, "advantages sum to zero");
    const double scale = 0.1 + 5 * rng.uniform(), shift = rng.normal() * 3;
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = scale * x[i] + shift;
    const auto ady = normalized_advantages(y, 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) require(o, std::abs(adv[i] - ady[i]) <= kExact, "affine invariance");
  }
  auto surrogate = [](double rho, double adv) {
    const std::vector<double> n = {std::log(rho)}, old = {0.0}, av = {adv};
    return clipped_surrogate(n, old, av, 0.2);
  };
  require(o, std::abs(surrogate(1.5, 1) - 1.2) <= kExact, "clip rho=1.5");
  require(o, std::abs(surrogate(0.5, -1) - (-0.8)) <= kExact, "clip rho=0.5");
  require(o, std::abs(surrogate(1.0, 0.37) - 0.37) <= kExact, "clip identity");

  std::vector<double> delta(3, 0.0);
  pgd_step(delta, std::vector<double>{2, -3, 0}, 0.002, 0.01, Norm::kLinf);
  require(o, delta == std::vector<double>{0.002, -0.002, 0.0}, "sign step");
  {
    PolicyConfig c;
    c.d = 3;
    c.choices = 2;
    c.vocab = 2;
    c.trace_len = 0;
    c.questions = 1;
    c.hidden = 1;
    auto p = zero_params(c);
    p.input_weights = {-0.2, 0.3, 0.0, 0.0};
    p.hidden_bias = {0.1};
    p.answer_head = {1.0, -1.0};
    Sample s;
    s.image = {0, 0, 0};
    s.choices = 2;
    const auto f = fgsm(p, s, 0.01);
    require(o, std::abs(f.delta[0] - 0.01) <= kExact && std::abs(f.delta[1] + 0.01) <= kExact && f.delta[2] == 0,
            "fgsm sign cases");
  }
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(6);
    rng.fill_normal(v, 1.0);
    for (auto norm : {Norm::kLinf, Norm::kL2}) {
      auto p = v;
      project(p, 0.3, norm);
      auto pp = p;
      project(pp, 0.3, norm);
      for (std::size_t j = 0; j < p.size(); ++j) require(o, std::abs(pp[j] - p[j]) <= kExact, "projection idempotence");
    }
  }
  using P = std::pair<double, double>;
  require(o, std::abs(aua(std::vector<P>{{0, 1.0}, {0.1, 0.5}}) - 0.75) <= kExact, "aua single trapezoid");
  require(o, std::abs(aua(std::vector<P>{{0, 1.0}, {0.05, 0.5}, {0.1, 0.5}}) - 0.625) <= kExact, "aua two trapezoids");
  const double t = seconds_since(t0);
  require(o, t < kBudget1, "runtime " + fmt(t) + " s");
  if (o.pass) o.detail = "all identities within 1e-9 in " + fmt(t, 2) + " s";
  return o;
}

// ---- 2 ---------------------------------------------------------------------

// Richardson-extrapolated central differences: (4 D(h/2) - D(h)) / 3 cancels
// the h^2 truncation term that dominates plain central differences here.
GradientSet extrapolated_gradient(const ParamSet& params, std::span<const double> image,
                                  const std::function<double(const ParamSet&, std::span<const double>)>& f, double h) {
  const auto coarse = numeric_gradient(params, image, f, h);
  auto fine = numeric_gradient(params, image, f, h / 2);
  scale_trainable(fine.params, 4.0);
  axpy(-1.0, coarse.params, fine.params);
  scale_trainable(fine.params, 1.0 / 3.0);
  for (std::size_t j = 0; j < fine.image.size(); ++j) fine.image[j] = (4 * fine.image[j] - coarse.image[j]) / 3;
  return fine;
}

Outcome gradients() {
  Outcome o;
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_where;
  auto note = [&](const FdReport& r, const std::string& what) {
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_where = what + " " + r.worst_coordinate;
    }
  };

  TaskSpec spec;
  const auto data = gen_dataset(make_rule(spec, 42), spec, 42);
  for (int seed = 0; seed < kFdSeeds; ++seed) {
    // SFT loss.
    PolicyConfig c;
    c.hidden = 6;
    c.trace_len = 2;
    auto p = init_params(c, seed, 0.3);
    fit_input_normalization(p, data.train.samples);
    const auto batch = make_targets(std::span(data.train.samples).subspan(5 * seed, 5), c);
    auto analytic = sft_gradient(p, batch);
    analytic.grad.image.assign(c.d, 0.0);
    note(compare_gradients(analytic.grad,
                           extrapolated_gradient(
                               p, std::vector<double>(c.d, 0.0),
                               [&](const ParamSet& q, std::span<const double>) { return sft_loss(q, batch); }, kFdStep),
                           kFdTolerance),
         "sft");

    // GRPO objective: surrogate + reference KL + robust KL (factored, exact),
    // surrogate alone (autoregressive).
    for (auto mode : {PolicyMode::kFactored, PolicyMode::kAutoregressive}) {
      const bool factored = mode == PolicyMode::kFactored;
      const auto sc = small_policy(mode);
      const auto old = init_params(sc, 100 + seed, 0.6);
      auto params = old;
      axpy(1.0, init_params(sc, 200 + seed, 0.05), params);
      const auto ref = init_params(sc, 300 + seed, 0.6);
      GrpoConfig cfg;
      cfg.group_size = 4;
      cfg.beta_kl = factored ? 0.05 : 0.0;
      const double lambda = factored ? 1.0 : 0.0;
      const RewardFn rf = [](const StructuredOutput& y, const Sample& s) {
        return 0.3 + 0.7 * (!y.trace.empty() && y.trace[0] == s.evidence[0]);
      };
      const ParamSet rollout = tempered_view(old, cfg.temperature);
      std::vector<Sample> states, adv_states;
      std::vector<Group> clean, adv;
      for (std::uint64_t j = 0; j < 3; ++j) {
        states.push_back(random_sample(sc, 1000 * seed + 10 + j));
        Sample a = states.back();
        for (auto& v : a.image) v += 0.05;
        adv_states.push_back(a);
        Rng r(1000 * seed + 20 + j);
        clean.push_back(sample_group(rollout, states.back(), cfg.group_size, r));
        score_group(clean.back(), rf, cfg.eps_std);
        adv.push_back(sample_group(rollout, a, cfg.group_size, r));
        score_group(adv.back(), rf, cfg.eps_std);
      }
      const Rng rng(seed);
      const auto obj = grpo_objective(params, ref, states, clean, adv_states, adv, 0.3, lambda, cfg, rng);
      const auto numeric = extrapolated_gradient(
          params, std::vector<double>(sc.d, 0.0),
          [&](const ParamSet& q, std::span<const double>) {
            return grpo_objective(q, ref, states, clean, adv_states, adv, 0.3, lambda, cfg, rng).value;
          },
          kFdStep);
      note(compare_gradients(GradientSet{obj.grad, std::vector<double>(sc.d, 0.0)}, numeric, kFdTolerance),
           factored ? "grpo(factored)" : "grpo(autoregressive)");
    }

    // Attack losses.
    PolicyConfig ac;
    ac.d = 5;
    ac.choices = 3;
    ac.vocab = 4;
    ac.trace_len = 2;
    ac.questions = 2;
    ac.hidden = 6;
    const auto ap = init_params(ac, seed, 0.7);
    const auto s = random_sample(ac, seed + 500);
    const AnswerId anchor = greedy_answer(ap, s.image, s.question);
    const auto ul = untargeted_loss(ap, s.image, s.question, anchor);
    LossSpec spec_nll;
    spec_nll.terms.push_back(AnswerNllTerm{anchor, 1.0});
    note(compare_gradients(ul.grad,
                           extrapolated_gradient(ap, s.image,
                                                 [&](const ParamSet& q, std::span<const double> x) {
                                                   return grad(q, x, s.question, spec_nll).value;
                                                 },
                                                 kFdStep),
                           kFdTolerance),
         "untargeted");
    const auto m = cw_margin(ap, s.image, s.question, anchor, 10.0);
    note(compare_gradients(m.grad,
                           extrapolated_gradient(ap, s.image,
                                                 [&](const ParamSet& q, std::span<const double> x) {
                                                   return cw_margin(q, x, s.question, anchor, 10.0).value;
                                                 },
                                                 kFdStep),
                           kFdTolerance),
         "cw margin");
  }
  const double t = seconds_since(t0);
  require(o, worst < kFdTolerance, "max relative error " + fmt(worst) + " at " + worst_where);
  require(o, t < kBudget2, "runtime " + fmt(t) + " s");
  if (o.pass) {
    o.detail = "max relative error " + fmt(worst, 3) + " over " + std::to_string(kFdSeeds) + " seeds in " + fmt(t, 3) + " s";
  }
  return o;
}

// ---- 3 ---------------------------------------------------------------------

Outcome normalization() {
  Outcome o;
  double worst_sum = 0, worst_z = 0;
  for (auto mode : {PolicyMode::kFactored, PolicyMode::kAutoregressive}) {
    PolicyConfig c = small_policy(mode);
    c.vocab = 2;
    c.trace_len = 1;
    const auto p = init_params(c, 5, 1.0);
    const auto s = random_sample(c, 6);
    const auto outputs = all_outputs(c);
    std::map<std::pair<TokenId, AnswerId>, double> prob;
    double total = 0;
    for (const auto& y : outputs) {
      const double q = std::exp(total_logprob(p, s, y));
      prob[{y.trace[0], y.answer}] = q;
      total += q;
    }
    worst_sum = std::max(worst_sum, std::abs(total - 1.0));
    Rng rng(77);
    std::map<std::pair<TokenId, AnswerId>, int> counts;
    for (int i = 0; i < kDraws; ++i) {
      const auto d = sample_output(p, s.image, s.question, rng, 1.0);
      ++counts[{d.output.trace[0], d.output.answer}];
    }
    for (const auto& [k, q] : prob) {
      const double z = std::abs(counts[k] - kDraws * q) / std::sqrt(kDraws * q * (1 - q));
      worst_z = std::max(worst_z, z);
    }
  }
  require(o, worst_sum <= kNormalization, "sum deviates by " + fmt(worst_sum));
  require(o, worst_z <= kSigmas, "frequency deviation " + fmt(worst_z) + " sigma");
  if (o.pass) o.detail = "|sum-1| = " + fmt(worst_sum, 3) + ", worst frequency deviation " + fmt(worst_z, 3) + " sigma";
  return o;
}

// ---- 4 ---------------------------------------------------------------------

double quantile_oracle(double p) {
  long double lo = -40, hi = 40;
  for (int i = 0; i < 200; ++i) {
    const long double mid = 0.5L * (lo + hi);
    (0.5L * std::erfc(-mid / std::sqrt(2.0L)) < p ? lo : hi) = mid;
  }
  return static_cast<double>(0.5L * (lo + hi));
}

Outcome certification_math() {
  Outcome o;
  const auto t0 = Clock::now();
  double worst_q = 0;
  for (double p : {1e-10, 1e-6, 0.001, 0.01, 0.02425, 0.1, 0.25, 0.5, 0.6, 0.9, 0.975, 0.999, 1 - 1e-9}) {
    worst_q = std::max(worst_q, std::abs(inverse_normal_cdf(p) - quantile_oracle(p)));
  }
  Rng rng(11);
  for (int i = 0; i < 2000; ++i) {
    const double p = rng.uniform();
    if (p > 0) worst_q = std::max(worst_q, std::abs(inverse_normal_cdf(p) - quantile_oracle(p)));
  }
  require(o, worst_q <= kExact, "quantile error " + fmt(worst_q));
  require(o, inverse_normal_cdf(0.5) == 0.0, "quantile(0.5)");
  require(o, std::abs(normal_cdf(0.0) - 0.5) <= kExact, "cdf(0)");
  require(o, std::abs(normal_cdf(1.959964) - 0.975) <= 1e-6, "cdf(1.959964)");
  require(o, std::abs(inverse_normal_cdf(0.975) - 1.959964) <= 1e-6, "quantile(0.975)");

  for (long n : {10L, 100L, 1000L}) {
    for (double alpha : {0.001, 0.05}) {
      require(o, std::abs(clopper_pearson_lower(n, n, alpha) - std::pow(alpha, 1.0 / n)) <= kExact,
              "Clopper-Pearson k=n");
    }
  }
  std::mt19937_64 eng(7);
  std::binomial_distribution<long> bin(200, 0.8);
  int misses = 0;
  for (int i = 0; i < kCoverageTrials; ++i) misses += clopper_pearson_lower(bin(eng), 200, 0.05) > 0.8;
  const double noncoverage = static_cast<double>(misses) / kCoverageTrials;
  require(o, noncoverage <= 0.05, "non-coverage " + fmt(noncoverage));

  require(o, std::abs(radius_two_sided(0.5, 0.9, 0.1) - 0.640776) <= 1e-5, "two-sided radius");

  require(o, std::abs(hoeffding_bound(1000, 0.05) - 2 * std::exp(-2 * 1000 * 0.05 * 0.05)) <= kExact,
          "Hoeffding formula");
  std::binomial_distribution<int> coin(100, 0.3);
  int far = 0;
  for (int i = 0; i < kCoverageTrials; ++i) far += std::abs(coin(eng) / 100.0 - 0.3) >= 0.1;
  const double freq = static_cast<double>(far) / kCoverageTrials;
  require(o, freq <= hoeffding_bound(100, 0.1), "Hoeffding frequency " + fmt(freq));

  const double t = seconds_since(t0);
  require(o, t < kBudget4, "runtime " + fmt(t) + " s");
  if (o.pass) {
    o.detail = "quantile error " + fmt(worst_q, 3) + ", CP non-coverage " + fmt(noncoverage, 3) +
               ", Hoeffding frequency " + fmt(freq, 3) + " <= " + fmt(hoeffding_bound(100, 0.1), 3) + " in " +
               fmt(t, 3) + " s";
  }
  return o;
}

// ---- 6 ---------------------------------------------------------------------

Outcome fgsm_equivalence() {
  Outcome o;
  PolicyConfig c;
  c.d = 5;
  c.choices = 3;
  c.vocab = 4;
  c.trace_len = 2;
  c.questions = 2;
  c.hidden = 6;
  int equal = 0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    const auto p = init_params(c, i, 0.7);
    const auto s = random_sample(c, 1000 + i);
    AttackConfig cfg;
    cfg.steps = 1;
    cfg.epsilon = 0.001 + 0.1 * static_cast<double>(i % 7);
    cfg.alpha = cfg.epsilon;
    equal += fgsm(p, s, cfg.epsilon).delta == pgd_attack(p, s, cfg).delta;
  }
  require(o, equal == 100, std::to_string(equal) + "/100 identical");
  if (o.pass) o.detail = "100/100 perturbations identical";
  return o;
}

// ---- pipeline-backed criteria ---------------------------------------------

struct PipelineRun {
  bool ok = false;
  double seconds = 0;
  fs::path dir;
};

PipelineRun run_cli(const std::string& cli, const fs::path& dir) {
  fs::remove_all(dir);
  const std::string cmd = "\"" + cli + "\" pipeline --config default --seed 42 --out \"" + dir.string() + "\"";
  const auto t0 = Clock::now();
  const int rc = std::system(cmd.c_str());
  return {rc == 0, seconds_since(t0), dir};
}

std::vector<std::string> tree(const fs::path& root) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root).string());
  }
  std::sort(files.begin(), files.end());
  return files;
}

Outcome reproducibility(const PipelineRun& a, const PipelineRun& b) {
  Outcome o;
  require(o, a.ok && b.ok, "pipeline run failed");
  if (!o.pass) return o;
  const auto fa = tree(a.dir), fb = tree(b.dir);
  require(o, fa == fb, "file sets differ");
  int compared = 0;
  for (const auto& f : fa) {
    require(o, slurp(a.dir / f) == slurp(b.dir / f), f + " differs");
    ++compared;
  }
  require(o, std::count_if(fa.begin(), fa.end(), [](const std::string& f) { return f.rfind("checkpoints", 0) == 0; }) == 4,
          "expected four checkpoints");
  if (o.pass) o.detail = std::to_string(compared) + " files byte-identical across two runs";
  return o;
}

const AttackCurvePoint* pgd_at(const EvalReport& r, double eps) {
  for (const auto& c : r.curves) {
    if (c.kind != AttackKind::kPgd) continue;
    for (const auto& p : c.points) {
      if (std::abs(p.epsilon - eps) <= 1e-12) return &p;
    }
  }
  return nullptr;
}

Outcome directional(const PipelineRun& run, const RunConfig& cfg) {
  Outcome o;
  require(o, run.ok, "pipeline run failed");
  if (!o.pass) return o;
  const RunPaths paths{run.dir};
  const auto clean = read_eval_report(paths.eval("clean_grpo"));
  const auto adv = read_eval_report(paths.eval("adv_grpo"));
  const double eps = cfg.sft_adv.epsilon;
  const auto* cp = pgd_at(clean, eps);
  const auto* ap = pgd_at(adv, eps);
  require(o, cp && ap, "no PGD point at the training epsilon");
  if (!o.pass) return o;
  const double c_clean = clean.clean.overall, c_rob = cp->accuracy.overall;
  const double a_clean = adv.clean.overall, a_rob = ap->accuracy.overall;
  require(o, c_clean >= kCleanFloor, "clean pipeline clean accuracy " + fmt(c_clean));
  require(o, c_clean - c_rob >= kAttackDrop, "PGD drop " + fmt(c_clean - c_rob));
  require(o, a_rob - c_rob >= kRobustGap, "robust gap " + fmt(a_rob - c_rob));
  require(o, std::abs(a_clean - c_clean) <= kCleanGap, "clean gap " + fmt(a_clean - c_clean));
  require(o, run.seconds <= kBudget7, "pipeline took " + fmt(run.seconds) + " s");
  o.detail = (o.pass ? "" : o.detail + " | ") + "clean pipeline " + fmt(c_clean) + " clean / " + fmt(c_rob) +
             " PGD; adversarial pipeline " + fmt(a_clean) + " clean / " + fmt(a_rob) + " PGD at eps " + fmt(eps) +
             "; full pipeline " + fmt(run.seconds, 3) + " s";
  return o;
}

std::vector<GrpoStats> read_reward_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<GrpoStats> log;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    GrpoStats s;
    ls >> s.iteration >> s.reward_mean;
    log.push_back(s);
  }
  return log;
}

Outcome reward_trend(const PipelineRun& run, const RunConfig& cfg) {
  Outcome o;
  require(o, run.ok, "pipeline run failed");
  if (!o.pass) return o;
  const RunPaths paths{run.dir};
  const auto log = read_reward_log(paths.log("clean_grpo"));
  require(o, static_cast<int>(log.size()) >= 200, "only " + std::to_string(log.size()) + " iterations");
  const auto ema = reward_ema(log, kEmaDecay);
  const double rise = ema.back() / ema.front() - 1.0;
  require(o, rise >= kRewardRise, "EMA rise " + fmt(rise));

  const auto sft = read_checkpoint(paths.checkpoint("clean_sft")).params;
  const auto train = read_dataset(paths.train(), Split::kTrain);
  RewardConfig rc = cfg.reward;
  rc.trace_len = cfg.task.trace_len;
  const auto rf = make_reward_fn(rc, Vocabulary::standard(cfg.task.vocab), AnswerSet(cfg.task.choices));
  const auto v = compare_gradient_variance(sft, train.samples, cfg.grpo, rf, kVarianceGroups, cfg.seeds.master);
  require(o, v.groups >= kVarianceGroups, "too few groups");
  require(o, v.normalized_relative < v.raw_relative,
          "relative variance normalized " + fmt(v.normalized_relative) + " vs raw " + fmt(v.raw_relative));
  o.detail = (o.pass ? "" : o.detail + " | ") + "EMA reward " + fmt(ema.front()) + " -> " + fmt(ema.back()) + " (+" +
             fmt(100 * rise, 3) + "%); relative gradient variance " + fmt(v.normalized_relative) +
             " (normalized) vs " + fmt(v.raw_relative) + " (raw) over " + std::to_string(v.groups) + " groups";
  return o;
}

Outcome certificate_soundness(const PipelineRun& run, const RunConfig& cfg) {
  Outcome o;
  require(o, run.ok, "pipeline run failed");
  if (!o.pass) return o;
  const auto t0 = Clock::now();
  const RunPaths paths{run.dir};
  const auto params = read_checkpoint(paths.checkpoint("adv_grpo")).params;
  const auto test = read_dataset(paths.test(), Split::kTest);
  const auto& sc = cfg.smoothing;
  const auto certs = certify_all(params, test.samples, sc, cfg.seeds.certify_seed(), 1);
  long n = 0, flips = 0;
  for (std::size_t i = 0; i < certs.size(); ++i) {
    if (!certs[i].prediction) continue;
    ++n;
    const auto& s = test.samples[i];
    Rng rng(derive_seed(cfg.seeds.master + 1, i));
    const auto delta = smoothed_l2_attack(params, s, *certs[i].prediction, kAttackFraction * certs[i].radius, sc.sigma,
                                          SmoothedAttackConfig{}, rng);
    const auto x = add(s.image, delta);
    flips += smoothed_predict(params, x, s, sc.sigma, sc.n_cert, rng) != certs[i].prediction;
  }
  const double bound = sc.alpha * n + kSigmas * std::sqrt(n * sc.alpha * (1 - sc.alpha));
  const double t = seconds_since(t0);
  require(o, n >= kMinCertified, "only " + std::to_string(n) + " certified");
  require(o, flips <= bound, std::to_string(flips) + " flips");
  require(o, t < kBudget5, "runtime " + fmt(t) + " s");
  o.detail = (o.pass ? "" : o.detail + " | ") + std::to_string(flips) + " of " + std::to_string(n) +
             " certified predictions flipped at 0.9R (bound " + fmt(bound, 3) + ") in " + fmt(t, 3) + " s";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 3) {
    std::fprintf(stderr, "usage: %s <advgrpo-cli> <scratch-dir>\n", argv[0]);
    return 2;
  }
  const std::string cli = argv[1];
  const fs::path scratch = argv[2];
  fs::create_directories(scratch);

  std::map<int, Outcome> results;
  auto guarded = [&](int id, const std::function<Outcome()>& f) {
    try {
      results[id] = f();
    } catch (const std::exception& e) {
      results[id] = {false, std::string("exception: ") + e.what()};
    }
    std::printf("CRITERION %d %s: %s\n", id, results[id].pass ? "PASS" : "FAIL", results[id].detail.c_str());
    std::fflush(stdout);
  };

  guarded(1, exact_math);
  guarded(2, gradients);
  guarded(3, normalization);
  guarded(4, certification_math);

  const RunConfig cfg = load_config("default");
  const auto first = run_cli(cli, scratch / "run_a");
  guarded(5, [&] { return certificate_soundness(first, cfg); });
  guarded(6, fgsm_equivalence);
  guarded(7, [&] { return directional(first, cfg); });
  guarded(8, [&] { return reward_trend(first, cfg); });
  const auto second = run_cli(cli, scratch / "run_b");
  guarded(9, [&] { return reproducibility(first, second); });

  int failed = 0;
  for (const auto& [id, r] : results) failed += !r.pass;
  std::printf("%d/%zu criteria passed\n", static_cast<int>(results.size()) - failed, results.size());
  return failed == 0 ? 0 : 1;
}
