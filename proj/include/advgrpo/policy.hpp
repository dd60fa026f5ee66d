#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "advgrpo/core.hpp"
#include "advgrpo/rng.hpp"

namespace advgrpo {

enum class PolicyMode { kFactored, kAutoregressive };

std::string_view mode_name(PolicyMode mode);
PolicyMode parse_mode(std::string_view name);

struct PolicyConfig {
  int d = 16;
  int choices = 4;
  int vocab = 32;
  int trace_len = 6;
  int questions = 4;
  int hidden = 64;
  PolicyMode mode = PolicyMode::kFactored;
  double temperature = 0.7;

  int input_dim() const { return d + questions; }
  friend bool operator==(const PolicyConfig&, const PolicyConfig&) = default;
};

void validate(const PolicyConfig& config);

// All policy parameters. `input_shift`/`input_scale` are a fixed feature
// standardization (z = (x - shift) * scale) fitted once from training data;
// they are not trained and carry zero gradient.
struct ParamSet {
  PolicyConfig config;
  std::vector<double> input_weights;    // hidden x (d + questions)
  std::vector<double> hidden_bias;      // hidden
  std::vector<double> answer_head;      // choices x hidden
  std::vector<double> trace_heads;      // trace_len x vocab x hidden
  std::vector<double> token_embedding;  // hidden x vocab, autoregressive only
  std::vector<double> input_shift;      // d
  std::vector<double> input_scale;      // d

  template <typename T>
  struct Array {
    std::string_view name;
    std::span<T> values;
    bool trainable;
  };

  std::vector<Array<double>> arrays();
  std::vector<Array<const double>> arrays() const;

  friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

// Zero weights, identity normalization.
ParamSet zero_params(const PolicyConfig& config);

// Trainable arrays ~ N(0, scale^2), one substream per array.
ParamSet init_params(const PolicyConfig& config, std::uint64_t seed, double scale);

// Sets the input standardization from the per-feature mean and standard
// deviation of `samples` (features with zero spread keep scale 1).
void fit_input_normalization(ParamSet& params, std::span<const Sample> samples);

// Checks shapes against the config and that every entry is finite.
void validate(const ParamSet& params);

// y += a * x over trainable arrays.
void axpy(double a, const ParamSet& x, ParamSet& y);
double squared_norm(const ParamSet& params);
void scale_trainable(ParamSet& params, double factor);

struct GradientSet {
  ParamSet params;
  std::vector<double> image;
};

GradientSet zero_gradient(const PolicyConfig& config);

// Everything the backward pass needs. In autoregressive mode trace position
// t > 0 is conditioned on `conditioning[t - 1]`.
struct Forward {
  std::vector<double> input;          // standardized image ++ onehot(question)
  std::vector<double> hidden;         // tanh(W input + b)
  std::vector<double> answer_logits;  // choices
  std::vector<double> trace_logits;   // trace_len x vocab
  std::vector<double> trace_hidden;   // trace_len x hidden; position 0 equals `hidden`
  std::vector<TokenId> conditioning;  // autoregressive feedback tokens
};

// Full forward pass. Autoregressive mode conditions on `conditioning` and
// falls back to greedy tokens where it runs out.
Forward forward(const ParamSet& params, std::span<const double> image, int question,
                std::span<const TokenId> conditioning = {});

struct Logits {
  std::vector<double> answer;
  std::vector<double> trace;
};

// Answer and trace logits (greedy conditioning in autoregressive mode).
Logits forward(const ParamSet& params, const Sample& sample);

std::vector<double> log_softmax(std::span<const double> logits);

// log pi(y | image, question). A trace shorter than trace_len is scored on
// its prefix positions (the marginal probability of that prefix).
double total_logprob(const ParamSet& params, std::span<const double> image, int question,
                     const StructuredOutput& y);
double total_logprob(const ParamSet& params, const Sample& sample, const StructuredOutput& y);

struct SampledOutput {
  StructuredOutput output;
  double logprob = 0.0;  // under the untempered policy
};

// Ancestral sampling from softmax(logits / temperature): trace positions in
// order, then the answer.
SampledOutput sample_output(const ParamSet& params, std::span<const double> image, int question, Rng& rng,
                            double temperature);

// Argmax decoding; ties go to the lowest id.
StructuredOutput greedy_decode(const ParamSet& params, std::span<const double> image, int question);
AnswerId greedy_answer(const ParamSet& params, std::span<const double> image, int question);

// ---- Differentiable losses -------------------------------------------------

// weight * log pi(output | s)
struct LogLikTerm {
  StructuredOutput output;
  double weight = 1.0;
};

// weight * -log pi(anchor | s), the answer marginal.
struct AnswerNllTerm {
  AnswerId anchor = 0;
  double weight = 1.0;
};

// <answer, z_answer> + <trace, z_trace>: a linear functional of the logits.
// Losses defined directly on logits (margins, closed-form KL) pass their
// logit gradient through this term. `trace` may be empty; a non-empty trace
// part is only differentiable in factored mode.
struct LogitLinearTerm {
  std::vector<double> answer;
  std::vector<double> trace;
};

using LossTerm = std::variant<LogLikTerm, AnswerNllTerm, LogitLinearTerm>;

struct LossSpec {
  std::vector<LossTerm> terms;
};

double loss_value(const ParamSet& params, std::span<const double> image, int question, const LossSpec& loss);

struct LossGradient {
  double value = 0.0;
  GradientSet grad;
};

// Exact gradient of the loss with respect to every trainable array and the
// image. Throws UnsupportedLoss for terms the current mode cannot handle.
LossGradient grad(const ParamSet& params, std::span<const double> image, int question, const LossSpec& loss);
LossGradient grad(const ParamSet& params, const Sample& sample, const LossSpec& loss);

// Central-difference gradient of an arbitrary scalar function of the
// trainable parameters and of the image.
GradientSet numeric_gradient(const ParamSet& params, std::span<const double> image,
                             const std::function<double(const ParamSet&, std::span<const double>)>& f,
                             double step);

// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline constexpr double kFdErrorFloor = 1e-4;

struct FdReport {
  double max_rel_error = 0.0;
  std::string worst_coordinate;
  std::size_t coordinates = 0;
  bool passed = true;
};

FdReport compare_gradients(const GradientSet& analytic, const GradientSet& numeric, double tolerance);

// Compares `analytic` (or grad() when null) against central differences.
FdReport finite_difference_check(const ParamSet& params, const Sample& sample, const LossSpec& loss, double step,
                                 double tolerance, const GradientSet* analytic = nullptr);

// ---- Checkpoints -----------------------------------------------------------

struct CheckpointManifest {
  std::string stage;
  std::uint64_t seed = 0;
  std::string task_hash;
  std::string config_hash;
};

// JSON manifest + named arrays; doubles use shortest round-trip decimals.
void write_checkpoint(const std::filesystem::path& path, const ParamSet& params, const CheckpointManifest& manifest);

struct Checkpoint {
  ParamSet params;
  CheckpointManifest manifest;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);

// Digest of the parameter values and config.
std::string params_digest(const ParamSet& params);

}  // namespace advgrpo
