#include "advgrpo/sft.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "advgrpo/errors.hpp"

namespace advgrpo {

void validate(const SftAdvConfig& a) {
  if (!(a.alpha > 0) || !(a.epsilon >= a.alpha)) throw ConfigError("adversarial config needs epsilon >= alpha > 0");
  if (a.n_pgd < 1) throw ConfigError("adversarial config needs n_pgd >= 1");
  if (!(a.ratio >= 0 && a.ratio <= 1)) throw ConfigError("adversarial ratio must lie in [0, 1]");
  if (a.epochs && *a.epochs < 0) throw ConfigError("adversarial epochs must be >= 0");
}

void validate(const SftConfig& c) {
  if (!(c.learning_rate > 0) || !std::isfinite(c.learning_rate)) throw ConfigError("sft learning rate must be > 0");
  if (c.epochs < 0) throw ConfigError("sft epochs must be >= 0");
  if (c.batch_size < 1) throw ConfigError("sft batch size must be >= 1");
  if (c.clip_norm < 0) throw ConfigError("sft clip norm must be >= 0");
  if (c.adv) validate(*c.adv);
}

SftTarget make_target(const Sample& sample, const PolicyConfig& policy) {
  SftTarget t{sample, {}};
  const auto n = std::min<std::size_t>(sample.evidence.size(), static_cast<std::size_t>(policy.trace_len));
  t.target.trace.assign(sample.evidence.begin(), sample.evidence.begin() + static_cast<std::ptrdiff_t>(n));
  t.target.answer = sample.truth;
  return t;
}

std::vector<SftTarget> make_targets(std::span<const Sample> samples, const PolicyConfig& policy) {
  std::vector<SftTarget> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(make_target(s, policy));
  return out;
}

double sft_loss(const ParamSet& params, std::span<const SftTarget> batch) {
  if (batch.empty()) throw ConfigError("sft loss of an empty batch");
  double total = 0.0;
  for (const auto& t : batch) total -= total_logprob(params, t.sample, t.target);
  return total / static_cast<double>(batch.size());
}

LossGradient sft_gradient(const ParamSet& params, std::span<const SftTarget> batch) {
  if (batch.empty()) throw ConfigError("sft loss of an empty batch");
  LossGradient out;
  out.grad.params = zero_gradient(params.config).params;
  const double w = -1.0 / static_cast<double>(batch.size());
  for (const auto& t : batch) {
    LossSpec spec;
    spec.terms.push_back(LogLikTerm{t.target, w});
    const auto g = grad(params, t.sample, spec);
    out.value += g.value;
    axpy(1.0, g.grad.params, out.grad.params);
  }
  return out;
}

std::vector<double> pgd_maximize_sft(const ParamSet& params, const SftTarget& target, const SftAdvConfig& adv) {
  const auto& image = target.sample.image;
  std::vector<double> delta(image.size(), 0.0);
  LossSpec spec;
  spec.terms.push_back(LogLikTerm{target.target, -1.0});
  for (int step = 0; step < adv.n_pgd; ++step) {
    const auto x = add(image, delta);
    const auto g = grad(params, x, target.sample.question, spec);
    pgd_step(delta, g.grad.image, adv.alpha, adv.epsilon, adv.norm);
  }
  return add(image, delta);
}

bool is_adversarial_batch(long index, double ratio) {
  return std::floor(static_cast<double>(index + 1) * ratio) > std::floor(static_cast<double>(index) * ratio);
}

namespace {

SftResult train_loop(const ParamSet& init, std::span<const Sample> train, const SftConfig& config,
                     std::uint64_t seed, const SftAdvConfig* adv) {
  validate(config);
  SftResult result{init, {}};
  if (config.epochs == 0 || train.empty()) return result;

  const auto targets = make_targets(train, init.config);
  const std::size_t n = targets.size();
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  const long batches_per_epoch = static_cast<long>((n + bs - 1) / bs);
  const long total = batches_per_epoch * config.epochs;
  const Rng root(seed);

  std::vector<std::size_t> order(n);
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = root.substream(1, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle.engine());

    for (std::size_t start = 0; start < n; start += bs, ++step) {
      const std::size_t end = std::min(n, start + bs);
      std::vector<SftTarget> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) batch.push_back(targets[order[i]]);

      SftLogRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.adversarial = adv != nullptr && is_adversarial_batch(step, adv->ratio);
      if (rec.adversarial) {
        rec.clean_loss = sft_loss(result.params, batch);
        for (auto& t : batch) t.sample.image = pgd_maximize_sft(result.params, t, *adv);
      }

      const auto g = sft_gradient(result.params, batch);
      rec.loss = g.value;
      if (!rec.adversarial) rec.clean_loss = rec.loss;
      if (!std::isfinite(rec.loss)) {
        throw TrainingDiverged("sft loss became non-finite at step " + std::to_string(step));
      }
      rec.lr = cosine_lr(config.learning_rate, step, total);
      rec.grad_norm = apply_update(result.params, g.grad.params, rec.lr, config.clip_norm, config.optimizer, -1.0);
      result.log.push_back(rec);
    }
  }
  return result;
}

}  // namespace

SftResult train_sft(const ParamSet& params, std::span<const Sample> train, const SftConfig& config,
                    std::uint64_t seed) {
  return train_loop(params, train, config, seed, nullptr);
}

SftResult train_at_sft(const ParamSet& params, std::span<const Sample> train, const SftConfig& config,
                       std::uint64_t seed) {
  if (!config.adv) throw ConfigError("adversarial SFT needs an adversarial config");
  SftConfig effective = config;
  if (config.adv->epochs) effective.epochs = *config.adv->epochs;
  return train_loop(params, train, effective, seed, &*config.adv);
}

}  // namespace advgrpo
