#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "advgrpo/optim.hpp"
#include "advgrpo/perturb.hpp"
#include "advgrpo/policy.hpp"
#include "advgrpo/reward.hpp"

namespace advgrpo {

struct GrpoAdvConfig {
  double epsilon = 0.01;
  double alpha = 0.002;
  int n_pgd = 5;
  Norm norm = Norm::kLinf;
  double adv_reward_weight = 0.3;  // w: convex weight of the adversarial surrogate
  double robust_kl_weight = 1.0;   // lambda on KL(pi(.|s) || pi(.|s + delta))
};

struct GrpoConfig {
  int group_size = 8;
  double eps_std = 1e-8;
  double eps_clip = 0.2;
  double beta_kl = 0.05;
  int iterations = 200;
  int minibatch = 64;
  double learning_rate = 0.02;
  double clip_norm = 1.0;
  Optimizer optimizer = Optimizer::kRms;
  int updates_per_refresh = 1;  // ascent steps per pi_old snapshot
  double temperature = 0.7;     // rollout temperature; the optimized policy is the tempered one
  int kl_samples = 8;           // Monte-Carlo draws per state (autoregressive mode only)
  std::optional<GrpoAdvConfig> adv;
};

void validate(const GrpoConfig& config);
void validate(const GrpoAdvConfig& config);

using RewardFn = std::function<double(const StructuredOutput&, const Sample&)>;

// Scores the serialized text of an output, so a format failure is possible in
// principle and costs the floor reward.
RewardFn make_reward_fn(const RewardConfig& config, const Vocabulary& vocab, const AnswerSet& answers);

struct Group {
  Sample state;
  std::vector<StructuredOutput> outputs;
  std::vector<double> old_logprobs;
  std::vector<double> rewards;
  std::vector<double> advantages;
};

// The rollout policy: output heads divided by the temperature. Sampling from
// it at temperature 1 equals sampling from `params` at `temperature`.
ParamSet tempered_view(const ParamSet& params, double temperature);

// Maps a gradient taken at tempered_view(params, T) back to `params`.
void fold_temperature(ParamSet& grad, double temperature);

// log pi(y | state) for each output; one forward pass in factored mode.
std::vector<double> output_logprobs(const ParamSet& params, const Sample& state,
                                    std::span<const StructuredOutput> outputs);

// K independent draws from `policy` (already a rollout view) at temperature 1.
Group sample_group(const ParamSet& policy, const Sample& state, int k, Rng& rng);

// (r - mean) / sqrt(var + eps_std), var with the K - 1 denominator.
std::vector<double> normalized_advantages(std::span<const double> rewards, double eps_std);

void score_group(Group& group, const RewardFn& reward, double eps_std);

// mean_i min(rho_i A_i, clip(rho_i, 1 - eps, 1 + eps) A_i), rho = exp(new - old).
double clipped_surrogate(std::span<const double> new_logprobs, std::span<const double> old_logprobs,
                         std::span<const double> advantages, double eps_clip);

// d(surrogate term i)/d(new_logprob_i): rho_i A_i on the unclipped branch, 0
// where the clip is active.
std::vector<double> surrogate_logprob_weights(std::span<const double> new_logprobs,
                                              std::span<const double> old_logprobs,
                                              std::span<const double> advantages, double eps_clip);

// Closed-form KL(p || q) for factored policies, summed over the answer and
// every trace position; p and q may differ in parameters and in image.
struct FactoredKl {
  double value = 0.0;
  LogitLinearTerm d_p;  // gradient w.r.t. p's logits
  LogitLinearTerm d_q;  // gradient w.r.t. q's logits
};
FactoredKl factored_kl(const ParamSet& p, std::span<const double> p_image, const ParamSet& q,
                       std::span<const double> q_image, int question);

struct KlEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
};

// Monte-Carlo estimate of the mean over states of KL(pi_theta || pi_ref),
// from n_mc draws of pi_theta per state.
KlEstimate reference_kl(const ParamSet& params, const ParamSet& ref, std::span<const Sample> states, int n_mc,
                        Rng& rng);

struct GrpoStats {
  long iteration = 0;
  double reward_mean = 0.0;
  double reward_std = 0.0;
  double adv_reward_mean = 0.0;
  double adv_reward_std = 0.0;
  double surrogate = 0.0;
  double ref_kl = 0.0;
  double robust_kl = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  double objective = 0.0;
};

// Value and gradient (w.r.t. `params`) of
//   (1 - w) S(clean) + w S(adversarial) - lambda KL(clean || adversarial) - beta KL_ref
// where S is the clipped surrogate of the tempered policy. In factored mode
// both KL terms are closed-form; in autoregressive mode they are Monte-Carlo
// estimates from streams of `rng` and the gradient is the score-function one.
struct GrpoObjective {
  double value = 0.0;
  ParamSet grad;
  GrpoStats stats;
};

GrpoObjective grpo_objective(const ParamSet& params, const ParamSet& ref, std::span<const Sample> states,
                             std::span<const Group> clean, std::span<const Sample> adv_states,
                             std::span<const Group> adversarial, double w, double robust_kl_weight,
                             const GrpoConfig& config, const Rng& rng);

// `updates_per_refresh` clipped ascent steps on grpo_objective from
// already-sampled groups. `states` are the clean minibatch states
// (reference and robust KL are taken there); `adversarial[j]`, when present,
// pairs with `states[j]`. Rollout views are built from `params` internally.
GrpoStats grpo_update(ParamSet& params, const ParamSet& ref, std::span<const Sample> states,
                      std::span<const Group> clean, std::span<const Group> adversarial, double w,
                      double robust_kl_weight, const GrpoConfig& config, double lr, Rng& rng);

// Score-function estimate of grad_image E[reward] under the rollout policy
// of `params_old`: (1/K) sum_i r_i grad_image log pi(Y_i | image), Y_i drawn
// from `rng`.
std::vector<double> reward_image_gradient(const ParamSet& params_old, const Sample& state, const Sample& scored,
                                          const GrpoConfig& config, const RewardFn& reward, Rng& rng);

// Reward-minimizing PGD on the image: ascent on -J, with the score-function
// estimate of grad J from fresh draws of pi_old at each step.
Sample adversarial_state(const ParamSet& params_old, const Sample& sample, const GrpoConfig& config,
                         const RewardFn& reward, Rng& rng);

struct GrpoStep {
  ParamSet params;
  GrpoStats stats;
};

GrpoStep grpo_iteration(const ParamSet& params, const ParamSet& params_old, const ParamSet& ref,
                        std::span<const Sample> minibatch, const GrpoConfig& config, const RewardFn& reward,
                        double lr, Rng& rng);

GrpoStep at_grpo_iteration(const ParamSet& params, const ParamSet& params_old, const ParamSet& ref,
                           std::span<const Sample> minibatch, const GrpoConfig& config, const RewardFn& reward,
                           double lr, Rng& rng);

struct GrpoResult {
  ParamSet params;
  std::vector<GrpoStats> log;
};

// `iterations` outer steps, each on a uniformly drawn minibatch, with
// pi_old refreshed every step and a cosine learning-rate schedule.
GrpoResult train_grpo(const ParamSet& params, const ParamSet& ref, std::span<const Sample> train,
                      const GrpoConfig& config, const RewardFn& reward, std::uint64_t seed, bool adversarial);

// Exponential moving average of the per-iteration mean group reward.
std::vector<double> reward_ema(std::span<const GrpoStats> log, double decay);

// Spread of the per-group policy-gradient estimate (1/K) sum_i w_i grad log pi(Y_i)
// over `groups` groups, with w = normalized advantages versus raw rewards.
// Relative variance = trace(Cov) / ||mean||^2.
struct VarianceComparison {
  double normalized_variance = 0.0;
  double raw_variance = 0.0;
  double normalized_relative = 0.0;
  double raw_relative = 0.0;
  int groups = 0;
};

VarianceComparison compare_gradient_variance(const ParamSet& params, std::span<const Sample> states,
                                             const GrpoConfig& config, const RewardFn& reward, int groups,
                                             std::uint64_t seed);

}  // namespace advgrpo
