#include "advgrpo/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "advgrpo/errors.hpp"

namespace advgrpo {

using json = nlohmann::json;

std::string_view pipeline_name(PipelineKind kind) {
  switch (kind) {
    case PipelineKind::kClean: return "clean";
    case PipelineKind::kAdversarial: return "adversarial";
    case PipelineKind::kBoth: return "both";
  }
  return "?";
}

PipelineKind parse_pipeline(std::string_view name) {
  if (name == "clean") return PipelineKind::kClean;
  if (name == "adversarial" || name == "adv") return PipelineKind::kAdversarial;
  if (name == "both") return PipelineKind::kBoth;
  throw ConfigError("unknown pipeline '" + std::string(name) + "'");
}

// ---- Seeds and derived configs ---------------------------------------------

namespace {

std::uint64_t pick(const std::optional<std::uint64_t>& v, std::uint64_t master, std::uint64_t tag) {
  return v ? *v : derive_seed(master, tag);
}

}  // namespace

std::uint64_t Seeds::data_seed() const { return data.value_or(master); }
std::uint64_t Seeds::init_seed() const { return init.value_or(master); }
std::uint64_t Seeds::sft_seed() const { return pick(sft, master, 1); }
std::uint64_t Seeds::at_sft_seed() const { return pick(at_sft, master, 2); }
std::uint64_t Seeds::grpo_seed() const { return pick(grpo, master, 3); }
std::uint64_t Seeds::at_grpo_seed() const { return pick(at_grpo, master, 4); }
std::uint64_t Seeds::certify_seed() const { return pick(certify, master, 5); }

PolicyConfig RunConfig::policy() const {
  PolicyConfig p;
  p.d = task.d;
  p.choices = task.choices;
  p.vocab = task.vocab;
  p.trace_len = task.trace_len;
  p.questions = task.questions;
  p.hidden = hidden;
  p.mode = mode;
  p.temperature = grpo.temperature;
  return p;
}

SftConfig RunConfig::sft_config(bool adversarial) const {
  SftConfig c = sft;
  c.adv.reset();
  if (adversarial) c.adv = sft_adv;
  return c;
}

GrpoConfig RunConfig::grpo_config(bool adversarial) const {
  GrpoConfig c = grpo;
  c.adv.reset();
  if (adversarial) c.adv = grpo_adv;
  return c;
}

void validate(const RunConfig& c) {
  validate(c.task);
  validate(c.policy());
  RewardConfig r = c.reward;
  r.trace_len = c.task.trace_len;
  validate(r);
  validate(c.sft_config(true));
  validate(c.grpo_config(true));
  validate(c.smoothing);
  if (!(c.init_scale >= 0)) throw ConfigError("policy.init_scale must be >= 0");
  if (c.certify_samples < 0) throw ConfigError("smoothing.samples must be >= 0");
  if (c.threads < 1) throw ConfigError("run.threads must be >= 1");
  const auto& a = c.attack;
  for (std::size_t i = 0; i < a.epsilons.size(); ++i) {
    if (!(a.epsilons[i] >= 0)) throw ConfigError("attack epsilons must be >= 0");
    if (i > 0 && !(a.epsilons[i] > a.epsilons[i - 1])) throw ConfigError("attack epsilons must be increasing");
  }
  if (!a.epsilons.empty() && a.epsilons.front() != 0.0) throw ConfigError("attack epsilons must start at 0");
  if (!(a.alpha_ratio > 0)) throw ConfigError("attack.alpha_ratio must be > 0");
  if (a.steps < 1) throw ConfigError("attack.steps must be >= 1");
  for (auto k : a.kinds) {
    if (k == AttackKind::kCw) throw ConfigError("C&W is configured through attack.cw.*, not attack.kinds");
    if (k == AttackKind::kFgsm && a.norm != Norm::kLinf) throw ConfigError("fgsm needs attack.norm = linf");
  }
  if (a.cw_samples < 0) throw ConfigError("attack.cw.samples must be >= 0");
  if (a.cw_samples > 0) {
    AttackConfig cw;
    cw.kind = AttackKind::kCw;
    cw.cw = a.cw;
    validate(cw);
  }
  for (double r : c.radii) {
    if (!(r >= 0)) throw ConfigError("smoothing radii must be >= 0");
  }
}

// ---- Config text -------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view v) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : v) {
    if (ch == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
  return out;
}

template <typename T>
T parse_number(std::string_view v, std::string_view key) {
  T out{};
  const std::string s = trim(v);
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
    throw ConfigError("bad value '" + std::string(v) + "' for " + std::string(key));
  }
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(out)) throw ConfigError("non-finite value for " + std::string(key));
  }
  return out;
}

void from_text(std::string_view v, std::string_view key, int& out) { out = parse_number<int>(v, key); }
void from_text(std::string_view v, std::string_view key, double& out) { out = parse_number<double>(v, key); }
void from_text(std::string_view v, std::string_view key, std::uint64_t& out) {
  out = parse_number<std::uint64_t>(v, key);
}
void from_text(std::string_view v, std::string_view key, bool& out) {
  const auto s = trim(v);
  if (s == "true" || s == "1") out = true;
  else if (s == "false" || s == "0") out = false;
  else throw ConfigError("bad boolean '" + s + "' for " + std::string(key));
}
void from_text(std::string_view v, std::string_view, Norm& out) { out = parse_norm(trim(v)); }
void from_text(std::string_view v, std::string_view, Optimizer& out) { out = parse_optimizer(trim(v)); }
void from_text(std::string_view v, std::string_view, PolicyMode& out) { out = parse_mode(trim(v)); }
void from_text(std::string_view v, std::string_view, PipelineKind& out) { out = parse_pipeline(trim(v)); }
void from_text(std::string_view v, std::string_view key, std::vector<double>& out) {
  out.clear();
  for (const auto& s : split_list(v)) out.push_back(parse_number<double>(s, key));
}
void from_text(std::string_view v, std::string_view key, std::vector<int>& out) {
  out.clear();
  for (const auto& s : split_list(v)) out.push_back(parse_number<int>(s, key));
}
void from_text(std::string_view v, std::string_view, std::vector<AttackKind>& out) {
  out.clear();
  for (const auto& s : split_list(v)) out.push_back(parse_attack(s));
}
template <typename T>
void from_text(std::string_view v, std::string_view key, std::optional<T>& out) {
  if (trim(v) == "none") {
    out.reset();
    return;
  }
  T x{};
  from_text(v, key, x);
  out = x;
}

std::string to_text(int v) { return std::to_string(v); }
std::string to_text(double v) { return format_double(v); }
std::string to_text(std::uint64_t v) { return std::to_string(v); }
std::string to_text(bool v) { return v ? "true" : "false"; }
std::string to_text(Norm v) { return std::string(norm_name(v)); }
std::string to_text(Optimizer v) { return std::string(optimizer_name(v)); }
std::string to_text(PolicyMode v) { return std::string(mode_name(v)); }
std::string to_text(PipelineKind v) { return std::string(pipeline_name(v)); }
template <typename T>
std::string to_text(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + to_text(v[i]);
  return s;
}
std::string to_text(const std::vector<AttackKind>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::string(attack_name(v[i]));
  return s;
}
template <typename T>
std::string to_text(const std::optional<T>& v) {
  return v ? to_text(*v) : "none";
}

struct Key {
  std::function<void(RunConfig&, std::string_view, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
  bool hashed = true;  // affects results
  bool training = true;  // affects checkpoints
};

template <typename F>
Key field(F ref, bool training = true, bool hashed = true) {
  Key k;
  k.set = [ref](RunConfig& c, std::string_view key, std::string_view v) { from_text(v, key, ref(c)); };
  k.get = [ref](const RunConfig& c) { return to_text(ref(const_cast<RunConfig&>(c))); };
  k.training = training;
  k.hashed = hashed;
  return k;
}

const std::map<std::string, Key, std::less<>>& keys() {
  static const std::map<std::string, Key, std::less<>> table = [] {
    std::map<std::string, Key, std::less<>> t;
    t["task.d"] = field([](RunConfig& c) -> int& { return c.task.d; });
    t["task.choices"] = field([](RunConfig& c) -> int& { return c.task.choices; });
    t["task.vocab"] = field([](RunConfig& c) -> int& { return c.task.vocab; });
    t["task.trace_len"] = field([](RunConfig& c) -> int& { return c.task.trace_len; });
    t["task.modalities"] = field([](RunConfig& c) -> int& { return c.task.modalities; });
    t["task.questions"] = field([](RunConfig& c) -> int& { return c.task.questions; });
    t["task.margin"] = field([](RunConfig& c) -> double& { return c.task.margin; });
    t["task.noise_sigma"] = field([](RunConfig& c) -> double& { return c.task.noise_sigma; });
    t["task.counts"] = field([](RunConfig& c) -> std::vector<int>& { return c.task.counts; });
    t["task.split_ratio"] = field([](RunConfig& c) -> double& { return c.task.split_ratio; });
    t["task.fragile_dims"] = field([](RunConfig& c) -> int& { return c.task.fragile_dims; });
    t["task.fragile_amplitude"] = field([](RunConfig& c) -> double& { return c.task.fragile_amplitude; });
    t["task.fragile_sigma"] = field([](RunConfig& c) -> double& { return c.task.fragile_sigma; });
    t["task.class_radius"] = field([](RunConfig& c) -> double& { return c.task.class_radius; });
    t["task.modality_spread"] = field([](RunConfig& c) -> double& { return c.task.modality_spread; });
    t["task.robust_weight"] = field([](RunConfig& c) -> double& { return c.task.robust_weight; });
    t["task.bias_scale"] = field([](RunConfig& c) -> double& { return c.task.bias_scale; });
    t["task.evidence_size"] = field([](RunConfig& c) -> int& { return c.task.evidence_size; });

    t["reward.w_fmt"] = field([](RunConfig& c) -> double& { return c.reward.w_fmt; });
    t["reward.w_cov"] = field([](RunConfig& c) -> double& { return c.reward.w_cov; });
    t["reward.w_len"] = field([](RunConfig& c) -> double& { return c.reward.w_len; });
    t["reward.length_budget"] = field([](RunConfig& c) -> int& { return c.reward.length_budget; });
    t["reward.w_ans"] = field([](RunConfig& c) -> double& { return c.reward.w_ans; });

    t["policy.hidden"] = field([](RunConfig& c) -> int& { return c.hidden; });
    t["policy.mode"] = field([](RunConfig& c) -> PolicyMode& { return c.mode; });
    t["policy.init_scale"] = field([](RunConfig& c) -> double& { return c.init_scale; });

    t["sft.lr"] = field([](RunConfig& c) -> double& { return c.sft.learning_rate; });
    t["sft.epochs"] = field([](RunConfig& c) -> int& { return c.sft.epochs; });
    t["sft.batch"] = field([](RunConfig& c) -> int& { return c.sft.batch_size; });
    t["sft.clip"] = field([](RunConfig& c) -> double& { return c.sft.clip_norm; });
    t["sft.optimizer"] = field([](RunConfig& c) -> Optimizer& { return c.sft.optimizer; });
    t["sft.warm_start"] = field([](RunConfig& c) -> bool& { return c.sft.warm_start; });
    t["sft.adv.epsilon"] = field([](RunConfig& c) -> double& { return c.sft_adv.epsilon; });
    t["sft.adv.alpha"] = field([](RunConfig& c) -> double& { return c.sft_adv.alpha; });
    t["sft.adv.n_pgd"] = field([](RunConfig& c) -> int& { return c.sft_adv.n_pgd; });
    t["sft.adv.norm"] = field([](RunConfig& c) -> Norm& { return c.sft_adv.norm; });
    t["sft.adv.ratio"] = field([](RunConfig& c) -> double& { return c.sft_adv.ratio; });
    t["sft.adv.epochs"] = field([](RunConfig& c) -> std::optional<int>& { return c.sft_adv.epochs; });

    t["grpo.k"] = field([](RunConfig& c) -> int& { return c.grpo.group_size; });
    t["grpo.eps_std"] = field([](RunConfig& c) -> double& { return c.grpo.eps_std; });
    t["grpo.eps_clip"] = field([](RunConfig& c) -> double& { return c.grpo.eps_clip; });
    t["grpo.beta"] = field([](RunConfig& c) -> double& { return c.grpo.beta_kl; });
    t["grpo.iterations"] = field([](RunConfig& c) -> int& { return c.grpo.iterations; });
    t["grpo.minibatch"] = field([](RunConfig& c) -> int& { return c.grpo.minibatch; });
    t["grpo.lr"] = field([](RunConfig& c) -> double& { return c.grpo.learning_rate; });
    t["grpo.clip"] = field([](RunConfig& c) -> double& { return c.grpo.clip_norm; });
    t["grpo.optimizer"] = field([](RunConfig& c) -> Optimizer& { return c.grpo.optimizer; });
    t["grpo.updates_per_refresh"] = field([](RunConfig& c) -> int& { return c.grpo.updates_per_refresh; });
    t["grpo.temperature"] = field([](RunConfig& c) -> double& { return c.grpo.temperature; });
    t["grpo.kl_samples"] = field([](RunConfig& c) -> int& { return c.grpo.kl_samples; });
    t["grpo.adv.epsilon"] = field([](RunConfig& c) -> double& { return c.grpo_adv.epsilon; });
    t["grpo.adv.alpha"] = field([](RunConfig& c) -> double& { return c.grpo_adv.alpha; });
    t["grpo.adv.n_pgd"] = field([](RunConfig& c) -> int& { return c.grpo_adv.n_pgd; });
    t["grpo.adv.norm"] = field([](RunConfig& c) -> Norm& { return c.grpo_adv.norm; });
    t["grpo.adv.w"] = field([](RunConfig& c) -> double& { return c.grpo_adv.adv_reward_weight; });
    t["grpo.adv.lambda"] = field([](RunConfig& c) -> double& { return c.grpo_adv.robust_kl_weight; });

    t["attack.epsilons"] = field([](RunConfig& c) -> std::vector<double>& { return c.attack.epsilons; }, false);
    t["attack.kinds"] = field([](RunConfig& c) -> std::vector<AttackKind>& { return c.attack.kinds; }, false);
    t["attack.alpha_ratio"] = field([](RunConfig& c) -> double& { return c.attack.alpha_ratio; }, false);
    t["attack.steps"] = field([](RunConfig& c) -> int& { return c.attack.steps; }, false);
    t["attack.norm"] = field([](RunConfig& c) -> Norm& { return c.attack.norm; }, false);
    t["attack.cw.samples"] = field([](RunConfig& c) -> int& { return c.attack.cw_samples; }, false);
    t["attack.cw.c"] = field([](RunConfig& c) -> double& { return c.attack.cw.c; }, false);
    t["attack.cw.kappa"] = field([](RunConfig& c) -> double& { return c.attack.cw.kappa; }, false);
    t["attack.cw.lr"] = field([](RunConfig& c) -> double& { return c.attack.cw.lr; }, false);
    t["attack.cw.steps"] = field([](RunConfig& c) -> int& { return c.attack.cw.steps; }, false);
    t["attack.cw.search_rounds"] = field([](RunConfig& c) -> int& { return c.attack.cw.search_rounds; }, false);

    t["smoothing.sigma"] = field([](RunConfig& c) -> double& { return c.smoothing.sigma; }, false);
    t["smoothing.n_pred"] = field([](RunConfig& c) -> int& { return c.smoothing.n_pred; }, false);
    t["smoothing.n_cert"] = field([](RunConfig& c) -> int& { return c.smoothing.n_cert; }, false);
    t["smoothing.alpha"] = field([](RunConfig& c) -> double& { return c.smoothing.alpha; }, false);
    t["smoothing.samples"] = field([](RunConfig& c) -> int& { return c.certify_samples; }, false);
    t["smoothing.radii"] = field([](RunConfig& c) -> std::vector<double>& { return c.radii; }, false);

    t["seed"] = field([](RunConfig& c) -> std::uint64_t& { return c.seeds.master; });
    t["seeds.data"] = field([](RunConfig& c) -> std::optional<std::uint64_t>& { return c.seeds.data; });
    t["seeds.init"] = field([](RunConfig& c) -> std::optional<std::uint64_t>& { return c.seeds.init; });
    t["seeds.sft"] = field([](RunConfig& c) -> std::optional<std::uint64_t>& { return c.seeds.sft; });
    t["seeds.at_sft"] = field([](RunConfig& c) -> std::optional<std::uint64_t>& { return c.seeds.at_sft; });
    t["seeds.grpo"] = field([](RunConfig& c) -> std::optional<std::uint64_t>& { return c.seeds.grpo; });
    t["seeds.at_grpo"] = field([](RunConfig& c) -> std::optional<std::uint64_t>& { return c.seeds.at_grpo; });
    t["seeds.certify"] = field([](RunConfig& c) -> std::optional<std::uint64_t>& { return c.seeds.certify; }, false);

    t["run.pipeline"] = field([](RunConfig& c) -> PipelineKind& { return c.pipeline; }, false);
    t["run.weighted_overall"] = field([](RunConfig& c) -> bool& { return c.weighted_overall; }, false);
    Key out;
    out.set = [](RunConfig& c, std::string_view, std::string_view v) { c.out = trim(v); };
    out.get = [](const RunConfig& c) { return c.out.string(); };
    out.hashed = out.training = false;
    t["run.out"] = out;
    t["run.threads"] = field([](RunConfig& c) -> int& { return c.threads; }, false, false);
    return t;
  }();
  return table;
}

std::string dump_filtered(const RunConfig& c, bool training_only) {
  std::string s;
  for (const auto& [name, key] : keys()) {
    if (!key.hashed || (training_only && !key.training)) continue;
    s += name + " = " + key.get(c) + "\n";
  }
  return s;
}

}  // namespace

void apply_setting(RunConfig& config, std::string_view key, std::string_view value) {
  const auto it = keys().find(key);
  if (it == keys().end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  it->second.set(config, key, value);
}

RunConfig parse_config(std::string_view text) {
  RunConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    apply_setting(c, trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)));
  }
  validate(c);
  return c;
}

RunConfig load_config(const std::string& path_or_default) {
  if (path_or_default.empty() || path_or_default == "default") return RunConfig{};
  std::ifstream in(path_or_default, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path_or_default);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const RunConfig& config) { return dump_filtered(config, false); }

std::string config_hash(const RunConfig& config) { return hex64(fnv1a64(dump_filtered(config, false))); }

std::string training_hash(const RunConfig& config) { return hex64(fnv1a64(dump_filtered(config, true))); }

std::vector<std::string> modality_names(int modalities) {
  static const char* kNames[] = {"CT", "MRI", "X-Ray", "Ultrasound", "Dermoscopy", "Fundus", "OCT", "Microscopy"};
  std::vector<std::string> out;
  for (int m = 0; m < modalities; ++m) {
    out.push_back(modalities == 8 ? kNames[m] : "M" + std::to_string(m));
  }
  return out;
}

// ---- Evaluation --------------------------------------------------------------

double aggregate_overall(std::span<const double> acc, std::span<const long> counts, bool weighted) {
  if (acc.size() != counts.size()) throw ConfigError("accuracy and count vectors differ in length");
  double num = 0.0, den = 0.0;
  for (std::size_t m = 0; m < acc.size(); ++m) {
    if (counts[m] == 0) continue;
    const double w = weighted ? static_cast<double>(counts[m]) : 1.0;
    num += w * acc[m];
    den += w;
  }
  return den > 0 ? num / den : 0.0;
}

AccuracyBreakdown breakdown(std::span<const Sample> samples, std::span<const char> correct, int modalities,
                            bool weighted) {
  if (samples.size() != correct.size()) throw ConfigError("one correctness flag per sample expected");
  AccuracyBreakdown b;
  b.modality.assign(static_cast<std::size_t>(modalities), 0.0);
  b.counts.assign(static_cast<std::size_t>(modalities), 0);
  std::vector<long> hits(static_cast<std::size_t>(modalities), 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const int m = samples[i].modality;
    if (m < 0 || m >= modalities) throw RangeError("sample modality out of range");
    ++b.counts[m];
    hits[m] += correct[i] ? 1 : 0;
  }
  for (int m = 0; m < modalities; ++m) {
    if (b.counts[m] > 0) b.modality[m] = static_cast<double>(hits[m]) / static_cast<double>(b.counts[m]);
  }
  b.overall = aggregate_overall(b.modality, b.counts, weighted);
  return b;
}

namespace {

void check_shape(const ParamSet& params, std::span<const Sample> samples) {
  const auto& c = params.config;
  SampleShape shape{c.d, c.choices, c.vocab, std::numeric_limits<int>::max(), c.questions};
  for (const auto& s : samples) {
    try {
      validate_sample(s, shape);
    } catch (const Error& e) {
      throw ConfigError(std::string("checkpoint and dataset are incompatible: ") + e.what());
    }
  }
}

}  // namespace

AccuracyBreakdown evaluate_clean(const ParamSet& params, std::span<const Sample> samples, int modalities,
                                 bool weighted) {
  check_shape(params, samples);
  const auto vocab = Vocabulary::standard(params.config.vocab);
  const AnswerSet answers(params.config.choices);
  std::vector<char> correct(samples.size(), 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto text = serialize_output(greedy_decode(params, s.image, s.question), vocab, answers);
    const auto parsed = try_parse_output(text, vocab, answers);
    correct[i] = parsed && parsed->answer == s.truth;
  }
  return breakdown(samples, correct, modalities, weighted);
}

AttackEvaluation evaluate_under_attack(const ParamSet& params, std::span<const Sample> samples,
                                       const AttackSweepConfig& sweep, int modalities, bool weighted, int threads) {
  check_shape(params, samples);
  AttackEvaluation out;
  if (sweep.epsilons.empty()) return out;
  const auto clean = evaluate_clean(params, samples, modalities, weighted);

  std::vector<AttackConfig> configs;
  for (auto kind : sweep.kinds) {
    for (double eps : sweep.epsilons) {
      if (eps == 0.0) continue;
      AttackConfig c;
      c.kind = kind;
      c.norm = sweep.norm;
      c.epsilon = eps;
      c.alpha = sweep.alpha_ratio * eps;
      c.steps = kind == AttackKind::kFgsm ? 1 : sweep.steps;
      configs.push_back(c);
    }
  }
  out.rows = attack_sweep(params, samples, configs, threads);

  const std::size_t n = samples.size();
  std::size_t block = 0;
  for (auto kind : sweep.kinds) {
    AttackCurve curve;
    curve.kind = kind;
    curve.norm = sweep.norm;
    for (double eps : sweep.epsilons) {
      AttackCurvePoint pt;
      pt.epsilon = eps;
      if (eps == 0.0) {
        pt.accuracy = clean;
      } else {
        std::vector<char> correct(n);
        for (std::size_t j = 0; j < n; ++j) correct[j] = out.rows[block * n + j].correct;
        pt.accuracy = breakdown(samples, correct, modalities, weighted);
        ++block;
      }
      curve.points.push_back(std::move(pt));
    }
    if (curve.points.size() >= 2) {
      std::vector<std::pair<double, double>> xy;
      for (const auto& p : curve.points) xy.emplace_back(p.epsilon, p.accuracy.overall);
      curve.aua = aua(xy);
    }
    out.curves.push_back(std::move(curve));
  }

  if (sweep.cw_samples > 0 && n > 0) {
    AttackConfig cw;
    cw.kind = AttackKind::kCw;
    cw.cw = sweep.cw;
    const auto subset = samples.subspan(0, std::min<std::size_t>(n, static_cast<std::size_t>(sweep.cw_samples)));
    const auto rows = attack_sweep(params, subset, std::span(&cw, 1), threads);
    CwSummary s;
    s.samples = static_cast<long>(rows.size());
    std::vector<double> norms;
    for (const auto& r : rows) {
      if (r.success) norms.push_back(r.delta_l2);
    }
    s.successes = static_cast<long>(norms.size());
    if (!norms.empty()) {
      std::sort(norms.begin(), norms.end());
      const std::size_t k = norms.size();
      s.median_l2 = k % 2 ? norms[k / 2] : 0.5 * (norms[k / 2 - 1] + norms[k / 2]);
    }
    out.cw = s;
    out.rows.insert(out.rows.end(), rows.begin(), rows.end());
  }
  return out;
}

// ---- Report JSON ---------------------------------------------------------------

namespace {

json breakdown_json(const AccuracyBreakdown& b) {
  return json{{"modality", b.modality}, {"counts", b.counts}, {"overall", b.overall}};
}

AccuracyBreakdown breakdown_from(const json& j) {
  AccuracyBreakdown b;
  b.modality = j.at("modality").get<std::vector<double>>();
  b.counts = j.at("counts").get<std::vector<long>>();
  b.overall = j.at("overall").get<double>();
  return b;
}

}  // namespace

void write_eval_report(const std::filesystem::path& path, const EvalReport& r) {
  json j;
  j["method"] = r.method;
  j["clean"] = breakdown_json(r.clean);
  j["curves"] = json::array();
  for (const auto& c : r.curves) {
    json jc{{"attack", attack_name(c.kind)}, {"norm", norm_name(c.norm)}, {"points", json::array()}};
    for (const auto& p : c.points) jc["points"].push_back({{"epsilon", p.epsilon}, {"accuracy", breakdown_json(p.accuracy)}});
    jc["aua"] = c.aua ? json(*c.aua) : json(nullptr);
    j["curves"].push_back(std::move(jc));
  }
  j["cw"] = r.cw ? json{{"samples", r.cw->samples}, {"successes", r.cw->successes}, {"median_l2", r.cw->median_l2}}
                 : json(nullptr);
  if (r.certification) {
    const auto& c = *r.certification;
    json curve = json::array();
    for (const auto& [rad, acc] : c.curve) curve.push_back({rad, acc});
    j["certification"] = {{"samples", c.samples},
                          {"certified", c.certified},
                          {"certified_correct", c.certified_correct},
                          {"curve", curve}};
  } else {
    j["certification"] = nullptr;
  }
  j["provenance"] = {{"config_hash", r.config_hash},
                     {"checkpoint_hash", r.checkpoint_hash},
                     {"task_hash", r.task_hash},
                     {"seed", r.seed}};
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(1) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

EvalReport read_eval_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    const json j = json::parse(in);
    EvalReport r;
    r.method = j.at("method").get<std::string>();
    r.clean = breakdown_from(j.at("clean"));
    for (const auto& jc : j.at("curves")) {
      AttackCurve c;
      c.kind = parse_attack(jc.at("attack").get<std::string>());
      c.norm = parse_norm(jc.at("norm").get<std::string>());
      for (const auto& p : jc.at("points")) {
        c.points.push_back({p.at("epsilon").get<double>(), breakdown_from(p.at("accuracy"))});
      }
      if (!jc.at("aua").is_null()) c.aua = jc.at("aua").get<double>();
      r.curves.push_back(std::move(c));
    }
    if (!j.at("cw").is_null()) {
      const auto& c = j.at("cw");
      r.cw = CwSummary{c.at("samples").get<long>(), c.at("successes").get<long>(), c.at("median_l2").get<double>()};
    }
    if (!j.at("certification").is_null()) {
      const auto& c = j.at("certification");
      CertificationSummary s;
      s.samples = c.at("samples").get<long>();
      s.certified = c.at("certified").get<long>();
      s.certified_correct = c.at("certified_correct").get<long>();
      for (const auto& pt : c.at("curve")) s.curve.emplace_back(pt.at(0).get<double>(), pt.at(1).get<double>());
      r.certification = std::move(s);
    }
    const auto& p = j.at("provenance");
    r.config_hash = p.at("config_hash").get<std::string>();
    r.checkpoint_hash = p.at("checkpoint_hash").get<std::string>();
    r.task_hash = p.at("task_hash").get<std::string>();
    r.seed = p.at("seed").get<std::uint64_t>();
    return r;
  } catch (const json::exception& e) {
    throw ConfigError("malformed evaluation report " + path.string() + ": " + e.what());
  }
}

void check_provenance(const CheckpointManifest& m, const std::string& task_hash, const std::string& cfg_hash) {
  if (m.task_hash != task_hash) {
    throw ConfigError("checkpoint task hash " + m.task_hash + " does not match dataset " + task_hash);
  }
  if (!cfg_hash.empty() && m.config_hash != cfg_hash) {
    throw ConfigError("checkpoint config hash " + m.config_hash + " does not match config " + cfg_hash);
  }
}

// ---- Reports -----------------------------------------------------------------

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

const AttackCurvePoint* point_at(const AttackCurve& c, double eps) {
  for (const auto& p : c.points) {
    if (std::abs(p.epsilon - eps) <= 1e-12) return &p;
  }
  return nullptr;
}

}  // namespace

void render_report(std::span<const EvalReport> reports, const std::filesystem::path& dir, int modalities,
                   double train_epsilon) {
  if (reports.empty()) throw ConfigError("render_report needs at least one report");
  std::filesystem::create_directories(dir);
  const auto names = modality_names(modalities);

  // Rows: one per (method, setting); columns: modalities + Overall.
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : reports) {
    if (static_cast<int>(r.clean.modality.size()) != modalities) throw ConfigError("report modality count mismatch");
    auto row = [&](const std::string& setting, const AccuracyBreakdown& b) {
      std::vector<std::string> cells = {r.method, setting};
      for (double v : b.modality) cells.push_back(pct(v));
      cells.push_back(pct(b.overall));
      rows.push_back(std::move(cells));
    };
    row("clean", r.clean);
    for (const auto& c : r.curves) {
      if (const auto* p = point_at(c, train_epsilon)) {
        row(std::string(attack_name(c.kind)) + "@" + format_double(train_epsilon), p->accuracy);
      }
    }
  }
  std::vector<std::string> header = {"method", "setting"};
  header.insert(header.end(), names.begin(), names.end());
  header.push_back("Overall");

  std::string tsv;
  auto tsv_line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) tsv += (i ? "\t" : "") + cells[i];
    tsv += '\n';
  };
  tsv_line(header);
  for (const auto& r : rows) tsv_line(r);
  write_file(dir / "summary.tsv", tsv);

  std::vector<std::size_t> width(header.size(), 0);
  for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  std::string txt = "Accuracy (%) by modality\n\n";
  auto txt_line = [&](const std::vector<std::string>& cells) {
    std::string line;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const std::string pad(width[i] - cells[i].size(), ' ');
      line += i < 2 ? cells[i] + pad : pad + cells[i];
      if (i + 1 < cells.size()) line += "  ";
    }
    txt += line + '\n';
  };
  txt_line(header);
  std::size_t total = 0;
  for (auto w : width) total += w;
  txt += std::string(total + 2 * (width.size() - 1), '-') + '\n';
  for (const auto& r : rows) txt_line(r);

  // Robustness summary.
  bool any_curve = false, any_aua = false;
  for (const auto& r : reports) {
    for (const auto& c : r.curves) {
      any_curve = true;
      any_aua |= c.aua.has_value();
    }
  }
  std::string rob = "method\tattack\tnorm";
  std::vector<double> eps_grid;
  for (const auto& r : reports)
    for (const auto& c : r.curves)
      for (const auto& p : c.points)
        if (std::find(eps_grid.begin(), eps_grid.end(), p.epsilon) == eps_grid.end()) eps_grid.push_back(p.epsilon);
  std::sort(eps_grid.begin(), eps_grid.end());
  for (double e : eps_grid) rob += "\teps=" + format_double(e);
  if (any_aua) rob += "\tAUA";
  rob += '\n';
  std::string curve_tsv = "method\tattack\tnorm\tepsilon\taccuracy\n";
  for (const auto& r : reports) {
    for (const auto& c : r.curves) {
      rob += r.method + "\t" + std::string(attack_name(c.kind)) + "\t" + std::string(norm_name(c.norm));
      for (double e : eps_grid) {
        const auto* p = point_at(c, e);
        rob += "\t" + (p ? pct(p->accuracy.overall) : std::string("-"));
      }
      if (any_aua) rob += "\t" + (c.aua ? pct(*c.aua) : std::string("-"));
      rob += '\n';
      for (const auto& p : c.points) {
        curve_tsv += r.method + "\t" + std::string(attack_name(c.kind)) + "\t" + std::string(norm_name(c.norm)) +
                     "\t" + format_double(p.epsilon) + "\t" + format_double(p.accuracy.overall) + "\n";
      }
    }
  }
  write_file(dir / "robustness.tsv", rob);
  write_file(dir / "accuracy_vs_eps.tsv", curve_tsv);

  if (any_curve) {
    txt += "\nAccuracy (%) under attack, overall\n\n";
    std::istringstream rs(rob);
    std::string line;
    while (std::getline(rs, line)) {
      std::replace(line.begin(), line.end(), '\t', ' ');
      txt += line + '\n';
    }
  }

  std::string cw = "method\tsamples\tsuccesses\tsuccess_rate\tmedian_l2\n";
  std::string cert = "method\tradius\tcertified_accuracy\n";
  bool any_cw = false, any_cert = false;
  for (const auto& r : reports) {
    if (r.cw) {
      any_cw = true;
      const double rate = r.cw->samples ? static_cast<double>(r.cw->successes) / static_cast<double>(r.cw->samples) : 0;
      cw += r.method + "\t" + std::to_string(r.cw->samples) + "\t" + std::to_string(r.cw->successes) + "\t" +
            format_double(rate) + "\t" + format_double(r.cw->median_l2) + "\n";
    }
    if (r.certification) {
      any_cert = true;
      for (const auto& [rad, acc] : r.certification->curve) {
        cert += r.method + "\t" + format_double(rad) + "\t" + format_double(acc) + "\n";
      }
    }
  }
  if (any_cw) {
    write_file(dir / "cw.tsv", cw);
    txt += "\nC&W (L2): success rate / median successful norm\n\n";
    for (const auto& r : reports) {
      if (!r.cw) continue;
      const double rate = r.cw->samples ? static_cast<double>(r.cw->successes) / static_cast<double>(r.cw->samples) : 0;
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s  %s%%  %.4f\n", r.method.c_str(), pct(rate).c_str(), r.cw->median_l2);
      txt += buf;
    }
  }
  write_file(dir / "certified_vs_radius.tsv", cert);
  if (any_cert) {
    txt += "\nRandomized smoothing: certified / certified-correct of evaluated samples\n\n";
    for (const auto& r : reports) {
      if (!r.certification) continue;
      const auto& c = *r.certification;
      txt += r.method + "  " + std::to_string(c.certified) + " / " + std::to_string(c.certified_correct) + " of " +
             std::to_string(c.samples) + "\n";
    }
  }
  txt += "\nProvenance\n\n";
  for (const auto& r : reports) {
    txt += r.method + "  config " + r.config_hash + "  checkpoint " + r.checkpoint_hash + "  task " + r.task_hash +
           "  seed " + std::to_string(r.seed) + "\n";
  }
  write_file(dir / "summary.txt", txt);
}

// ---- Pipeline ------------------------------------------------------------------

namespace {

std::string task_hash_of(const Dataset& train, const Dataset& test) {
  return hex64(fnv1a64(dataset_digest(train.samples) + "/" + dataset_digest(test.samples)));
}

}  // namespace

std::string task_hash(const TaskData& data) { return task_hash_of(data.train, data.test); }

namespace {

bool is_training_stage(std::string_view s) {
  return s == "clean_sft" || s == "clean_grpo" || s == "adv_sft" || s == "adv_grpo";
}

std::vector<std::string> training_stages(PipelineKind kind) {
  std::vector<std::string> out;
  if (kind != PipelineKind::kAdversarial) out.insert(out.end(), {"clean_sft", "clean_grpo"});
  if (kind != PipelineKind::kClean) out.insert(out.end(), {"adv_sft", "adv_grpo"});
  return out;
}

std::size_t stage_index(std::string_view s) {
  for (std::size_t i = 0; i < std::size(kStages); ++i) {
    if (kStages[i] == s) return i;
  }
  throw ConfigError("unknown stage '" + std::string(s) + "'");
}

std::uint64_t stage_seed(const RunConfig& c, std::string_view stage) {
  if (stage == "clean_sft") return c.seeds.sft_seed();
  if (stage == "clean_grpo") return c.seeds.grpo_seed();
  if (stage == "adv_sft") return c.seeds.at_sft_seed();
  if (stage == "adv_grpo") return c.seeds.at_grpo_seed();
  return c.seeds.master;
}

void write_sft_log(const std::filesystem::path& path, const std::vector<SftLogRecord>& log) {
  std::string s = "step\tepoch\tloss\tclean_loss\tlr\tgrad_norm\tadversarial\n";
  for (const auto& r : log) {
    s += std::to_string(r.step) + "\t" + std::to_string(r.epoch) + "\t" + format_double(r.loss) + "\t" +
         format_double(r.clean_loss) + "\t" + format_double(r.lr) + "\t" + format_double(r.grad_norm) + "\t" +
         std::to_string(int(r.adversarial)) + "\n";
  }
  std::filesystem::create_directories(path.parent_path());
  write_file(path, s);
}

void write_grpo_log(const std::filesystem::path& path, const std::vector<GrpoStats>& log) {
  std::string s =
      "iteration\treward_mean\treward_std\tadv_reward_mean\tadv_reward_std\tsurrogate\tref_kl\trobust_kl\t"
      "clip_fraction\tgrad_norm\tlr\tobjective\n";
  for (const auto& r : log) {
    s += std::to_string(r.iteration);
    for (double v : {r.reward_mean, r.reward_std, r.adv_reward_mean, r.adv_reward_std, r.surrogate, r.ref_kl,
                     r.robust_kl, r.clip_fraction, r.grad_norm, r.lr, r.objective}) {
      s += "\t" + format_double(v);
    }
    s += "\n";
  }
  std::filesystem::create_directories(path.parent_path());
  write_file(path, s);
}

RewardFn reward_for(const RunConfig& c) {
  RewardConfig r = c.reward;
  r.trace_len = c.task.trace_len;
  return make_reward_fn(r, Vocabulary::standard(c.task.vocab), AnswerSet(c.task.choices));
}

std::optional<ParamSet> load_matching(const std::filesystem::path& path, std::string_view stage,
                                      const std::string& task_hash, const std::string& train_hash) {
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    auto ck = read_checkpoint(path);
    if (ck.manifest.stage != stage || ck.manifest.task_hash != task_hash || ck.manifest.config_hash != train_hash) {
      return std::nullopt;
    }
    return std::move(ck.params);
  } catch (const ConfigError&) {
    return std::nullopt;
  }
}

}  // namespace

TaskData ensure_data(const RunConfig& config, const RunPaths& paths) {
  TaskData d;
  d.rule = make_rule(config.task, config.seeds.data_seed());
  auto split = gen_dataset(d.rule, config.task, config.seeds.data_seed());
  d.train = std::move(split.train);
  d.test = std::move(split.test);
  std::filesystem::create_directories(paths.data_dir());
  write_dataset(paths.train(), d.train);
  write_dataset(paths.test(), d.test);
  write_rule(paths.rule(), d.rule);
  return d;
}

StageResult run_stage(const RunConfig& config, const RunPaths& paths, const TaskData& data, std::string_view stage,
                      bool force) {
  if (!is_training_stage(stage)) throw ConfigError("not a training stage: " + std::string(stage));
  const std::string task_hash = task_hash_of(data.train, data.test);
  const std::string train_hash = training_hash(config);
  const auto path = paths.checkpoint(stage);
  if (!force) {
    if (auto p = load_matching(path, stage, task_hash, train_hash)) return {std::move(*p), true};
  }

  const auto& train = data.train.samples;
  const auto policy = config.policy();
  auto fresh = [&] {
    auto p = init_params(policy, config.seeds.init_seed(), config.init_scale);
    fit_input_normalization(p, train);
    return p;
  };
  auto prerequisite = [&](std::string_view prev) {
    auto p = load_matching(paths.checkpoint(prev), prev, task_hash, train_hash);
    if (!p) throw ConfigError("stage " + std::string(stage) + " needs a matching " + std::string(prev) + " checkpoint");
    return std::move(*p);
  };

  ParamSet params;
  if (stage == "clean_sft") {
    auto r = train_sft(fresh(), train, config.sft_config(false), config.seeds.sft_seed());
    write_sft_log(paths.log(stage), r.log);
    params = std::move(r.params);
  } else if (stage == "adv_sft") {
    const ParamSet start = config.sft.warm_start ? prerequisite("clean_sft") : fresh();
    auto r = train_at_sft(start, train, config.sft_config(true), config.seeds.at_sft_seed());
    write_sft_log(paths.log(stage), r.log);
    params = std::move(r.params);
  } else {
    const bool adv = stage == "adv_grpo";
    const ParamSet start = prerequisite(adv ? "adv_sft" : "clean_sft");
    auto r = train_grpo(start, start, train, config.grpo_config(adv), reward_for(config),
                        adv ? config.seeds.at_grpo_seed() : config.seeds.grpo_seed(), adv);
    write_grpo_log(paths.log(stage), r.log);
    params = std::move(r.params);
  }
  std::filesystem::create_directories(path.parent_path());
  write_checkpoint(path, params, {std::string(stage), stage_seed(config, stage), task_hash, train_hash});
  return {std::move(params), false};
}

EvalReport evaluate_checkpoint(const RunConfig& config, const RunPaths& paths, const TaskData& data,
                               std::string_view stage, const ParamSet& params) {
  const auto& test = data.test.samples;
  const int m = config.task.modalities;
  EvalReport r;
  r.method = std::string(stage);
  r.clean = evaluate_clean(params, test, m, config.weighted_overall);
  auto attacked = evaluate_under_attack(params, test, config.attack, m, config.weighted_overall, config.threads);
  r.curves = std::move(attacked.curves);
  r.cw = attacked.cw;
  std::filesystem::create_directories(paths.attacks(stage).parent_path());
  write_attack_table(paths.attacks(stage), attacked.rows);

  const std::size_t n_cert = config.certify_samples > 0
                                 ? std::min<std::size_t>(test.size(), static_cast<std::size_t>(config.certify_samples))
                                 : test.size();
  const auto subset = std::span(test).subspan(0, n_cert);
  const auto certs = certify_all(params, subset, config.smoothing, config.seeds.certify_seed(), config.threads);
  write_certificate_table(paths.certificates(stage), certs, subset);
  CertificationSummary cs;
  cs.samples = static_cast<long>(certs.size());
  for (std::size_t i = 0; i < certs.size(); ++i) {
    if (!certs[i].prediction) continue;
    ++cs.certified;
    cs.certified_correct += *certs[i].prediction == subset[i].truth;
  }
  cs.curve = certified_accuracy_curve(certs, subset, config.radii);
  r.certification = std::move(cs);

  r.config_hash = config_hash(config);
  r.checkpoint_hash = params_digest(params);
  r.task_hash = task_hash_of(data.train, data.test);
  r.seed = config.seeds.master;
  return r;
}

std::vector<EvalReport> run_pipeline(const RunConfig& config, const PipelineOptions& options) {
  validate(config);
  const RunPaths paths{config.out};
  std::filesystem::create_directories(paths.root);
  std::filesystem::remove(paths.error());
  write_file(paths.config(), dump_config(config));
  const std::size_t from = options.from_stage ? stage_index(*options.from_stage) : std::size(kStages);
  auto say = [&](const std::string& s) {
    if (options.progress) *options.progress << s << std::endl;
  };

  std::string current = "gendata";
  try {
    const TaskData data = ensure_data(config, paths);
    const std::string task_hash = task_hash_of(data.train, data.test);
    say("gendata: " + std::to_string(data.train.samples.size()) + " train / " +
        std::to_string(data.test.samples.size()) + " test samples, task " + task_hash);

    std::vector<std::pair<std::string, ParamSet>> finished;
    for (const auto& stage : training_stages(config.pipeline)) {
      current = stage;
      const bool force = stage_index(stage) >= from;
      auto r = run_stage(config, paths, data, stage, force);
      say(stage + (r.reused ? ": reused checkpoint" : ": trained") + " " + params_digest(r.params));
      finished.emplace_back(stage, std::move(r.params));
    }

    current = "evaluate";
    const bool force_eval = stage_index("evaluate") >= from;
    const std::string cfg_hash = config_hash(config);
    std::vector<EvalReport> reports;
    for (const auto& [stage, params] : finished) {
      const auto path = paths.eval(stage);
      if (!force_eval && std::filesystem::exists(path)) {
        try {
          auto old = read_eval_report(path);
          if (old.config_hash == cfg_hash && old.checkpoint_hash == params_digest(params) &&
              old.task_hash == task_hash) {
            say("evaluate " + stage + ": reused");
            reports.push_back(std::move(old));
            continue;
          }
        } catch (const ConfigError&) {
        }
      }
      auto r = evaluate_checkpoint(config, paths, data, stage, params);
      write_eval_report(path, r);
      say("evaluate " + stage + ": clean " + pct(r.clean.overall) + "%");
      reports.push_back(std::move(r));
    }

    current = "report";
    render_report(reports, paths.report_dir(), config.task.modalities, config.sft_adv.epsilon);
    say("report: " + paths.report_dir().string());
    return reports;
  } catch (const Error& e) {
    const char* type = dynamic_cast<const TrainingDiverged*>(&e) ? "TrainingDiverged"
                       : dynamic_cast<const IoError*>(&e)        ? "IoError"
                       : dynamic_cast<const ConfigError*>(&e)    ? "ConfigError"
                                                                 : "Error";
    json j{{"stage", current}, {"error", type}, {"message", e.what()}};
    std::ofstream out(paths.error(), std::ios::binary);
    out << j.dump(1) << '\n';
    throw;
  }
}

}  // namespace advgrpo
