#pragma once

#include <optional>
#include <span>
#include <vector>

#include "advgrpo/optim.hpp"
#include "advgrpo/perturb.hpp"
#include "advgrpo/policy.hpp"

namespace advgrpo {

struct SftAdvConfig {
  double epsilon = 0.01;
  double alpha = 0.002;
  int n_pgd = 5;
  Norm norm = Norm::kLinf;
  double ratio = 0.5;  // fraction of batches trained on perturbed images
  // Adversarial training converges more slowly; overrides SftConfig::epochs
  // for the adversarial stage when set.
  std::optional<int> epochs = 20;
};

struct SftConfig {
  double learning_rate = 1.0;
  int epochs = 3;
  int batch_size = 16;
  double clip_norm = 1.0;
  Optimizer optimizer = Optimizer::kSgd;
  std::optional<SftAdvConfig> adv;
  bool warm_start = false;  // adversarial stage starts from the clean SFT checkpoint
};

void validate(const SftConfig& config);
void validate(const SftAdvConfig& config);

struct SftTarget {
  Sample sample;
  StructuredOutput target;
};

// Ground-truth output: the evidence tokens in sorted order (truncated to the
// trace length) followed by the true answer.
SftTarget make_target(const Sample& sample, const PolicyConfig& policy);
std::vector<SftTarget> make_targets(std::span<const Sample> samples, const PolicyConfig& policy);

// Mean negative log-likelihood of the targets.
double sft_loss(const ParamSet& params, std::span<const SftTarget> batch);

// Value and parameter gradient of sft_loss (image gradient left empty).
LossGradient sft_gradient(const ParamSet& params, std::span<const SftTarget> batch);

struct SftLogRecord {
  long step = 0;
  int epoch = 0;
  double loss = 0.0;        // on the batch actually trained on
  double clean_loss = 0.0;  // same batch, unperturbed (equals loss on clean batches)
  double lr = 0.0;
  double grad_norm = 0.0;
  bool adversarial = false;
};

struct SftResult {
  ParamSet params;
  std::vector<SftLogRecord> log;
};

// Clipped gradient descent with cosine decay over epochs x batches. Batch
// order is a per-epoch permutation drawn from `seed`. Throws TrainingDiverged
// on a non-finite loss.
SftResult train_sft(const ParamSet& params, std::span<const Sample> train, const SftConfig& config,
                    std::uint64_t seed);

// Inner maximization: N steps of projected sign ascent on the SFT loss of one
// target, starting from zero. Returns the perturbed image.
std::vector<double> pgd_maximize_sft(const ParamSet& params, const SftTarget& target, const SftAdvConfig& adv);

// Batch i is perturbed iff floor((i + 1) * ratio) > floor(i * ratio), which
// alternates at ratio 0.5 and reduces to plain SFT at ratio 0.
bool is_adversarial_batch(long index, double ratio);

// Mixed clean / adversarial training; requires config.adv.
SftResult train_at_sft(const ParamSet& params, std::span<const Sample> train, const SftConfig& config,
                       std::uint64_t seed);

}  // namespace advgrpo
