#include "advgrpo/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "advgrpo/errors.hpp"

namespace advgrpo {

namespace {

// Rng substream purposes; keep stable, checkpoints depend on them.
enum Purpose : std::uint64_t {
  kCleanGroup = 1,
  kAdversary = 2,
  kUpdate = 3,
  kRefKl = 4,
  kRobustKl = 5,
  kKlEstimate = 6,
  kAdversaryStep = 7,
  kAdvGroup = 8,
  kVariance = 9,
  kIterations = 20,
  kMinibatch = 21,
};

std::vector<double> flatten_trainable(const ParamSet& p) {
  std::vector<double> out;
  for (const auto& arr : p.arrays()) {
    if (arr.trainable) out.insert(out.end(), arr.values.begin(), arr.values.end());
  }
  return out;
}

void scale_heads(ParamSet& p, double f) {
  for (double& v : p.answer_head) v *= f;
  for (double& v : p.trace_heads) v *= f;
}

double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

void scale_term(LogitLinearTerm& t, double f) {
  for (double& v : t.answer) v *= f;
  for (double& v : t.trace) v *= f;
}

}  // namespace

GrpoObjective grpo_objective(const ParamSet& params, const ParamSet& ref, std::span<const Sample> states,
                    std::span<const Group> clean, std::span<const Sample> adv_states, std::span<const Group> adv,
                    double w, double lambda, const GrpoConfig& cfg, const Rng& rng) {
  const std::size_t m = states.size();
  if (m == 0) throw ConfigError("empty GRPO minibatch");
  if (!clean.empty() && clean.size() != m) throw ConfigError("clean groups must pair with the minibatch");
  if (!adv_states.empty() && adv_states.size() != m) throw ConfigError("adversarial states must pair with the minibatch");
  if (!adv.empty() && adv.size() != m) throw ConfigError("adversarial groups must pair with the minibatch");

  const double temp = cfg.temperature;
  const bool factored = params.config.mode == PolicyMode::kFactored;
  const ParamSet pol = tempered_view(params, temp);
  const double md = static_cast<double>(m);

  GrpoObjective out;
  out.grad = zero_gradient(params.config).params;
  std::vector<LossSpec> clean_spec(m), adv_spec(m);
  long clipped = 0, counted = 0;

  auto add_groups = [&](std::span<const Group> groups, double weight, std::vector<LossSpec>& specs,
                        double& surrogate_out) {
    if (groups.empty() || weight == 0.0) return;
    double total = 0.0;
    for (std::size_t j = 0; j < groups.size(); ++j) {
      const auto& g = groups[j];
      const auto lp = output_logprobs(pol, g.state, g.outputs);
      const double s = clipped_surrogate(lp, g.old_logprobs, g.advantages, cfg.eps_clip);
      total += s;
      const auto wts = surrogate_logprob_weights(lp, g.old_logprobs, g.advantages, cfg.eps_clip);
      const double k = static_cast<double>(g.outputs.size());
      for (std::size_t i = 0; i < wts.size(); ++i) {
        ++counted;
        if (wts[i] == 0.0) {
          if (g.advantages[i] != 0.0) ++clipped;
          continue;
        }
        specs[j].terms.push_back(LogLikTerm{g.outputs[i], weight * wts[i] / (md * k)});
      }
    }
    surrogate_out = total / md;
    out.value += weight * surrogate_out;
  };

  double clean_surrogate = 0.0, adv_surrogate = 0.0;
  add_groups(clean, 1.0 - w, clean_spec, clean_surrogate);
  add_groups(adv, w, adv_spec, adv_surrogate);

  double ref_kl = 0.0;
  if (cfg.beta_kl != 0.0) {
    const ParamSet ref_view = tempered_view(ref, temp);
    const double c = -cfg.beta_kl / md;
    for (std::size_t j = 0; j < m; ++j) {
      const auto& s = states[j];
      if (factored) {
        auto kl = factored_kl(pol, s.image, ref_view, s.image, s.question);
        ref_kl += kl.value / md;
        scale_term(kl.d_p, c);
        clean_spec[j].terms.push_back(std::move(kl.d_p));
      } else {
        Rng r = rng.substream(kRefKl, j);
        const double n = static_cast<double>(cfg.kl_samples);
        for (int d = 0; d < cfg.kl_samples; ++d) {
          const auto y = sample_output(pol, s.image, s.question, r, 1.0);
          const double diff = y.logprob - total_logprob(ref_view, s.image, s.question, y.output);
          ref_kl += diff / (n * md);
          clean_spec[j].terms.push_back(LogLikTerm{y.output, c * diff / n});
        }
      }
    }
    out.value -= cfg.beta_kl * ref_kl;
  }

  double robust_kl = 0.0;
  if (lambda != 0.0 && !adv_states.empty()) {
    const double c = -lambda / md;
    for (std::size_t j = 0; j < m; ++j) {
      const auto& s = states[j];
      const auto& a = adv_states[j];
      if (factored) {
        auto kl = factored_kl(pol, s.image, pol, a.image, s.question);
        robust_kl += kl.value / md;
        scale_term(kl.d_p, c);
        scale_term(kl.d_q, c);
        clean_spec[j].terms.push_back(std::move(kl.d_p));
        adv_spec[j].terms.push_back(std::move(kl.d_q));
      } else {
        Rng r = rng.substream(kRobustKl, j);
        const double n = static_cast<double>(cfg.kl_samples);
        for (int d = 0; d < cfg.kl_samples; ++d) {
          const auto y = sample_output(pol, s.image, s.question, r, 1.0);
          const double diff = y.logprob - total_logprob(pol, a.image, a.question, y.output);
          robust_kl += diff / (n * md);
          clean_spec[j].terms.push_back(LogLikTerm{y.output, c * diff / n});
          adv_spec[j].terms.push_back(LogLikTerm{y.output, -c / n});
        }
      }
    }
    out.value -= lambda * robust_kl;
  }

  if (!std::isfinite(out.value)) throw TrainingDiverged("GRPO objective became non-finite");

  for (std::size_t j = 0; j < m; ++j) {
    if (!clean_spec[j].terms.empty()) axpy(1.0, grad(pol, states[j], clean_spec[j]).grad.params, out.grad);
  }
  for (std::size_t j = 0; j < m; ++j) {
    if (!adv_spec[j].terms.empty()) axpy(1.0, grad(pol, adv_states[j], adv_spec[j]).grad.params, out.grad);
  }
  fold_temperature(out.grad, temp);

  auto collect = [](std::span<const Group> groups, double& mean, double& sd) {
    std::vector<double> r;
    for (const auto& g : groups) r.insert(r.end(), g.rewards.begin(), g.rewards.end());
    mean = mean_of(r);
    sd = std_of(r);
  };
  collect(clean, out.stats.reward_mean, out.stats.reward_std);
  collect(adv, out.stats.adv_reward_mean, out.stats.adv_reward_std);
  out.stats.surrogate = w < 1.0 ? clean_surrogate : adv_surrogate;
  out.stats.ref_kl = ref_kl;
  out.stats.robust_kl = robust_kl;
  out.stats.clip_fraction = counted ? static_cast<double>(clipped) / static_cast<double>(counted) : 0.0;
  out.stats.objective = out.value;
  return out;
}

void validate(const GrpoAdvConfig& a) {
  if (!(a.alpha > 0) || !(a.epsilon >= a.alpha)) throw ConfigError("GRPO adversary needs epsilon >= alpha > 0");
  if (a.n_pgd < 1) throw ConfigError("GRPO adversary needs n_pgd >= 1");
  if (!(a.adv_reward_weight >= 0 && a.adv_reward_weight <= 1)) {
    throw ConfigError("adversarial reward weight must lie in [0, 1]");
  }
  if (!(a.robust_kl_weight >= 0)) throw ConfigError("robust KL weight must be >= 0");
}

void validate(const GrpoConfig& c) {
  if (c.group_size < 2) throw ConfigError("GRPO group size must be >= 2");
  if (!(c.eps_std > 0)) throw ConfigError("eps_std must be > 0");
  if (!(c.eps_clip > 0 && c.eps_clip < 1)) throw ConfigError("eps_clip must lie in (0, 1)");
  if (!(c.beta_kl >= 0)) throw ConfigError("beta_kl must be >= 0");
  if (c.iterations < 0) throw ConfigError("GRPO iterations must be >= 0");
  if (c.minibatch < 1) throw ConfigError("GRPO minibatch must be >= 1");
  if (!(c.learning_rate > 0)) throw ConfigError("GRPO learning rate must be > 0");
  if (c.clip_norm < 0) throw ConfigError("GRPO clip norm must be >= 0");
  if (c.updates_per_refresh < 1) throw ConfigError("updates per refresh must be >= 1");
  if (!(c.temperature > 0)) throw ConfigError("rollout temperature must be > 0");
  if (c.kl_samples < 1) throw ConfigError("kl_samples must be >= 1");
  if (c.adv) validate(*c.adv);
}

RewardFn make_reward_fn(const RewardConfig& config, const Vocabulary& vocab, const AnswerSet& answers) {
  validate(config);
  return [config, vocab, answers](const StructuredOutput& y, const Sample& s) {
    return reward(serialize_output(y, vocab, answers), s, config, vocab, answers);
  };
}

ParamSet tempered_view(const ParamSet& params, double temperature) {
  ParamSet v = params;
  if (temperature != 1.0) scale_heads(v, 1.0 / temperature);
  return v;
}

void fold_temperature(ParamSet& grad, double temperature) {
  if (temperature != 1.0) scale_heads(grad, 1.0 / temperature);
}

std::vector<double> output_logprobs(const ParamSet& params, const Sample& state,
                                    std::span<const StructuredOutput> outputs) {
  std::vector<double> out;
  out.reserve(outputs.size());
  if (params.config.mode != PolicyMode::kFactored) {
    for (const auto& y : outputs) out.push_back(total_logprob(params, state, y));
    return out;
  }
  const auto& c = params.config;
  const Forward f = forward(params, state.image, state.question);
  const auto ls_answer = log_softmax(f.answer_logits);
  std::vector<std::vector<double>> ls_trace;
  for (int t = 0; t < c.trace_len; ++t) {
    ls_trace.push_back(log_softmax(std::span<const double>(f.trace_logits.data() + static_cast<std::ptrdiff_t>(t) * c.vocab,
                                                           static_cast<std::size_t>(c.vocab))));
  }
  for (const auto& y : outputs) {
    if (y.answer < 0 || y.answer >= c.choices) throw RangeError("answer id out of range");
    if (static_cast<int>(y.trace.size()) > c.trace_len) throw RangeError("trace longer than the policy trace length");
    double lp = ls_answer[static_cast<std::size_t>(y.answer)];
    for (std::size_t t = 0; t < y.trace.size(); ++t) {
      if (y.trace[t] < 0 || y.trace[t] >= c.vocab) throw RangeError("token id out of range");
      lp += ls_trace[t][static_cast<std::size_t>(y.trace[t])];
    }
    out.push_back(lp);
  }
  return out;
}

Group sample_group(const ParamSet& policy, const Sample& state, int k, Rng& rng) {
  if (k < 2) throw ConfigError("group size must be >= 2");
  Group g;
  g.state = state;
  for (int i = 0; i < k; ++i) g.outputs.push_back(sample_output(policy, state.image, state.question, rng, 1.0).output);
  g.old_logprobs = output_logprobs(policy, state, g.outputs);
  return g;
}

std::vector<double> normalized_advantages(std::span<const double> rewards, double eps_std) {
  if (rewards.size() < 2) throw ConfigError("advantages need at least 2 rewards");
  const double m = mean_of(rewards);
  double ss = 0.0;
  for (double r : rewards) ss += (r - m) * (r - m);
  const double denom = std::sqrt(ss / static_cast<double>(rewards.size() - 1) + eps_std);
  std::vector<double> out(rewards.size(), 0.0);
  if (denom == 0.0) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - m) / denom;
  return out;
}

void score_group(Group& group, const RewardFn& reward, double eps_std) {
  group.rewards.clear();
  for (const auto& y : group.outputs) group.rewards.push_back(reward(y, group.state));
  group.advantages = normalized_advantages(group.rewards, eps_std);
}

double clipped_surrogate(std::span<const double> new_logprobs, std::span<const double> old_logprobs,
                         std::span<const double> advantages, double eps_clip) {
  if (new_logprobs.size() != old_logprobs.size() || new_logprobs.size() != advantages.size()) {
    throw ConfigError("surrogate inputs must have equal lengths");
  }
  if (new_logprobs.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < new_logprobs.size(); ++i) {
    const double rho = std::exp(new_logprobs[i] - old_logprobs[i]);
    const double clipped = std::clamp(rho, 1.0 - eps_clip, 1.0 + eps_clip);
    total += std::min(rho * advantages[i], clipped * advantages[i]);
  }
  return total / static_cast<double>(new_logprobs.size());
}

std::vector<double> surrogate_logprob_weights(std::span<const double> new_logprobs,
                                              std::span<const double> old_logprobs,
                                              std::span<const double> advantages, double eps_clip) {
  std::vector<double> out(new_logprobs.size(), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double rho = std::exp(new_logprobs[i] - old_logprobs[i]);
    const double a = advantages[i];
    const bool clip_active = (rho > 1.0 + eps_clip && a > 0) || (rho < 1.0 - eps_clip && a < 0);
    if (!clip_active) out[i] = rho * a;
  }
  return out;
}

FactoredKl factored_kl(const ParamSet& p, std::span<const double> p_image, const ParamSet& q,
                       std::span<const double> q_image, int question) {
  if (p.config.mode != PolicyMode::kFactored || q.config.mode != PolicyMode::kFactored) {
    throw UnsupportedLoss("closed-form KL needs factored policies");
  }
  const Forward fp = forward(p, p_image, question);
  const Forward fq = forward(q, q_image, question);
  FactoredKl out;
  out.d_p.answer.assign(fp.answer_logits.size(), 0.0);
  out.d_q.answer.assign(fp.answer_logits.size(), 0.0);
  out.d_p.trace.assign(fp.trace_logits.size(), 0.0);
  out.d_q.trace.assign(fp.trace_logits.size(), 0.0);

  auto factor = [&](std::span<const double> zp, std::span<const double> zq, std::span<double> gp,
                    std::span<double> gq) {
    const auto lp = log_softmax(zp);
    const auto lq = log_softmax(zq);
    double kl = 0.0;
    for (std::size_t i = 0; i < lp.size(); ++i) kl += std::exp(lp[i]) * (lp[i] - lq[i]);
    for (std::size_t i = 0; i < lp.size(); ++i) {
      const double pi = std::exp(lp[i]);
      gp[i] = pi * (lp[i] - lq[i] - kl);
      gq[i] = std::exp(lq[i]) - pi;
    }
    out.value += kl;
  };

  factor(fp.answer_logits, fq.answer_logits, out.d_p.answer, out.d_q.answer);
  const std::size_t v = static_cast<std::size_t>(p.config.vocab);
  for (int t = 0; t < p.config.trace_len; ++t) {
    const std::size_t off = static_cast<std::size_t>(t) * v;
    factor(std::span<const double>(fp.trace_logits).subspan(off, v),
           std::span<const double>(fq.trace_logits).subspan(off, v), std::span<double>(out.d_p.trace).subspan(off, v),
           std::span<double>(out.d_q.trace).subspan(off, v));
  }
  return out;
}

KlEstimate reference_kl(const ParamSet& params, const ParamSet& ref, std::span<const Sample> states, int n_mc,
                        Rng& rng) {
  if (n_mc < 1) throw ConfigError("reference KL needs n_mc >= 1");
  std::vector<double> diffs;
  for (std::size_t j = 0; j < states.size(); ++j) {
    Rng r = rng.substream(kKlEstimate, j);
    const auto& s = states[j];
    for (int d = 0; d < n_mc; ++d) {
      const auto y = sample_output(params, s.image, s.question, r, 1.0);
      diffs.push_back(y.logprob - total_logprob(ref, s, y.output));
    }
  }
  rng.next_u64();
  KlEstimate est;
  est.mean = mean_of(diffs);
  est.stderr_ = diffs.size() > 1 ? std_of(diffs) / std::sqrt(static_cast<double>(diffs.size())) : 0.0;
  return est;
}

namespace {

GrpoStats update_with_states(ParamSet& params, const ParamSet& ref, std::span<const Sample> states,
                             std::span<const Group> clean, std::span<const Sample> adv_states,
                             std::span<const Group> adversarial, double w, double lambda, const GrpoConfig& config,
                             double lr, const Rng& rng) {
  GrpoStats stats;
  for (int u = 0; u < config.updates_per_refresh; ++u) {
    const Rng pass = rng.substream(kUpdate, static_cast<std::uint64_t>(u));
    const auto obj = grpo_objective(params, ref, states, clean, adv_states, adversarial, w, lambda, config, pass);
    stats = obj.stats;
    stats.grad_norm = apply_update(params, obj.grad, lr, config.clip_norm, config.optimizer, 1.0);
  }
  stats.lr = lr;
  return stats;
}

std::vector<Group> sample_groups(const ParamSet& rollout, std::span<const Sample> states, const GrpoConfig& config,
                                 const RewardFn& reward, const Rng& rng, std::uint64_t purpose) {
  std::vector<Group> groups;
  groups.reserve(states.size());
  for (std::size_t j = 0; j < states.size(); ++j) {
    Rng r = rng.substream(purpose, j);
    groups.push_back(sample_group(rollout, states[j], config.group_size, r));
    score_group(groups.back(), reward, config.eps_std);
  }
  return groups;
}

}  // namespace

GrpoStats grpo_update(ParamSet& params, const ParamSet& ref, std::span<const Sample> states,
                      std::span<const Group> clean, std::span<const Group> adversarial, double w,
                      double robust_kl_weight, const GrpoConfig& config, double lr, Rng& rng) {
  std::vector<Sample> adv_states;
  for (const auto& g : adversarial) adv_states.push_back(g.state);
  const auto stats =
      update_with_states(params, ref, states, clean, adv_states, adversarial, w, robust_kl_weight, config, lr, rng);
  rng.next_u64();
  return stats;
}

std::vector<double> reward_image_gradient(const ParamSet& params_old, const Sample& state, const Sample& scored,
                                          const GrpoConfig& config, const RewardFn& reward, Rng& rng) {
  const ParamSet pol = tempered_view(params_old, config.temperature);
  const double k = static_cast<double>(config.group_size);
  LossSpec spec;
  for (int i = 0; i < config.group_size; ++i) {
    auto y = sample_output(pol, state.image, state.question, rng, 1.0).output;
    const double rew = reward(y, scored);
    if (rew != 0.0) spec.terms.push_back(LogLikTerm{std::move(y), rew / k});
  }
  if (spec.terms.empty()) return std::vector<double>(state.image.size(), 0.0);
  return grad(pol, state.image, state.question, spec).grad.image;
}

Sample adversarial_state(const ParamSet& params_old, const Sample& sample, const GrpoConfig& config,
                         const RewardFn& reward, Rng& rng) {
  if (!config.adv) throw ConfigError("adversarial state needs an adversarial config");
  const auto& adv = *config.adv;
  std::vector<double> delta(sample.image.size(), 0.0);
  Sample cur = sample;
  for (int step = 0; step < adv.n_pgd; ++step) {
    cur.image = add(sample.image, delta);
    Rng r = rng.substream(kAdversaryStep, static_cast<std::uint64_t>(step));
    auto descent = reward_image_gradient(params_old, cur, sample, config, reward, r);
    for (double& v : descent) v = -v;
    pgd_step(delta, descent, adv.alpha, adv.epsilon, adv.norm);
  }
  rng.next_u64();
  cur.image = add(sample.image, delta);
  return cur;
}

GrpoStep grpo_iteration(const ParamSet& params, const ParamSet& params_old, const ParamSet& ref,
                        std::span<const Sample> minibatch, const GrpoConfig& config, const RewardFn& reward,
                        double lr, Rng& rng) {
  const ParamSet rollout = tempered_view(params_old, config.temperature);
  const auto clean = sample_groups(rollout, minibatch, config, reward, rng, kCleanGroup);
  GrpoStep step{params, {}};
  step.stats = update_with_states(step.params, ref, minibatch, clean, {}, {}, 0.0, 0.0, config, lr, rng);
  rng.next_u64();
  return step;
}

GrpoStep at_grpo_iteration(const ParamSet& params, const ParamSet& params_old, const ParamSet& ref,
                           std::span<const Sample> minibatch, const GrpoConfig& config, const RewardFn& reward,
                           double lr, Rng& rng) {
  if (!config.adv) throw ConfigError("adversarial GRPO needs an adversarial config");
  const double w = config.adv->adv_reward_weight;
  const double lambda = config.adv->robust_kl_weight;
  const ParamSet rollout = tempered_view(params_old, config.temperature);
  const auto clean = sample_groups(rollout, minibatch, config, reward, rng, kCleanGroup);

  std::vector<Sample> adv_states;
  std::vector<Group> adv_groups;
  if (w > 0.0 || lambda > 0.0) {
    for (std::size_t j = 0; j < minibatch.size(); ++j) {
      Rng r = rng.substream(kAdversary, j);
      adv_states.push_back(adversarial_state(params_old, minibatch[j], config, reward, r));
    }
  }
  if (w > 0.0) adv_groups = sample_groups(rollout, adv_states, config, reward, rng, kAdvGroup);

  GrpoStep step{params, {}};
  step.stats =
      update_with_states(step.params, ref, minibatch, clean, adv_states, adv_groups, w, lambda, config, lr, rng);
  if (w == 0.0 && !adv_states.empty()) {
    // Still report how the adversary fares, from a separate stream.
    const auto probe = sample_groups(rollout, adv_states, config, reward, rng, kAdvGroup);
    std::vector<double> r;
    for (const auto& g : probe) r.insert(r.end(), g.rewards.begin(), g.rewards.end());
    step.stats.adv_reward_mean = mean_of(r);
    step.stats.adv_reward_std = std_of(r);
  }
  rng.next_u64();
  return step;
}

GrpoResult train_grpo(const ParamSet& params, const ParamSet& ref, std::span<const Sample> train,
                      const GrpoConfig& config, const RewardFn& reward, std::uint64_t seed, bool adversarial) {
  validate(config);
  if (adversarial && !config.adv) throw ConfigError("adversarial GRPO needs an adversarial config");
  GrpoResult result{params, {}};
  if (config.iterations == 0 || train.empty()) return result;
  const Rng root(seed);
  Rng it_rng = root.substream(kIterations);
  std::vector<Sample> minibatch(static_cast<std::size_t>(config.minibatch));
  for (int it = 0; it < config.iterations; ++it) {
    Rng pick = root.substream(kMinibatch, static_cast<std::uint64_t>(it));
    for (auto& s : minibatch) s = train[pick.below(train.size())];
    const double lr = cosine_lr(config.learning_rate, it, config.iterations);
    const ParamSet params_old = result.params;
    auto step = adversarial ? at_grpo_iteration(result.params, params_old, ref, minibatch, config, reward, lr, it_rng)
                            : grpo_iteration(result.params, params_old, ref, minibatch, config, reward, lr, it_rng);
    result.params = std::move(step.params);
    step.stats.iteration = it;
    result.log.push_back(step.stats);
  }
  return result;
}

std::vector<double> reward_ema(std::span<const GrpoStats> log, double decay) {
  std::vector<double> out;
  double ema = 0.0;
  for (std::size_t i = 0; i < log.size(); ++i) {
    ema = i == 0 ? log[i].reward_mean : decay * ema + (1.0 - decay) * log[i].reward_mean;
    out.push_back(ema);
  }
  return out;
}

VarianceComparison compare_gradient_variance(const ParamSet& params, std::span<const Sample> states,
                                             const GrpoConfig& config, const RewardFn& reward, int groups,
                                             std::uint64_t seed) {
  if (groups < 2 || states.empty()) throw ConfigError("variance comparison needs >= 2 groups and some states");
  const ParamSet pol = tempered_view(params, config.temperature);
  const Rng root(seed);
  const std::size_t dim = flatten_trainable(params).size();
  std::vector<double> sum_n(dim, 0.0), sq_n(dim, 0.0), sum_r(dim, 0.0), sq_r(dim, 0.0);

  auto estimate = [&](const Group& g, std::span<const double> weights) {
    LossSpec spec;
    const double k = static_cast<double>(g.outputs.size());
    for (std::size_t i = 0; i < g.outputs.size(); ++i) {
      if (weights[i] != 0.0) spec.terms.push_back(LogLikTerm{g.outputs[i], weights[i] / k});
    }
    ParamSet gp = grad(pol, g.state, spec).grad.params;
    fold_temperature(gp, config.temperature);
    return flatten_trainable(gp);
  };

  for (int n = 0; n < groups; ++n) {
    Rng r = root.substream(kVariance, static_cast<std::uint64_t>(n));
    Group g = sample_group(pol, states[static_cast<std::size_t>(n) % states.size()], config.group_size, r);
    score_group(g, reward, config.eps_std);
    const auto gn = estimate(g, g.advantages);
    const auto gr = estimate(g, g.rewards);
    for (std::size_t c = 0; c < dim; ++c) {
      sum_n[c] += gn[c];
      sq_n[c] += gn[c] * gn[c];
      sum_r[c] += gr[c];
      sq_r[c] += gr[c] * gr[c];
    }
  }

  const double nd = static_cast<double>(groups);
  auto summarize = [&](const std::vector<double>& sum, const std::vector<double>& sq, double& var, double& rel) {
    double tr = 0.0, mean_sq = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
      const double mu = sum[c] / nd;
      tr += (sq[c] - nd * mu * mu) / (nd - 1.0);
      mean_sq += mu * mu;
    }
    var = tr;
    rel = mean_sq > 0 ? tr / mean_sq : std::numeric_limits<double>::infinity();
  };
  VarianceComparison out;
  out.groups = groups;
  summarize(sum_n, sq_n, out.normalized_variance, out.normalized_relative);
  summarize(sum_r, sq_r, out.raw_variance, out.raw_relative);
  return out;
}

}  // namespace advgrpo
