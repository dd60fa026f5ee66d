#pragma once

#include <filesystem>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "advgrpo/perturb.hpp"
#include "advgrpo/policy.hpp"

namespace advgrpo {

enum class AttackKind { kFgsm, kPgd, kCw };

std::string_view attack_name(AttackKind kind);
AttackKind parse_attack(std::string_view name);

struct CwConfig {
  double c = 1.0;
  double kappa = 0.0;
  double lr = 0.01;
  int steps = 100;
  int search_rounds = 0;  // > 0: binary search over c, keeping the best success
};

struct AttackConfig {
  AttackKind kind = AttackKind::kPgd;
  double epsilon = 0.01;
  double alpha = 0.0025;
  int steps = 10;
  Norm norm = Norm::kLinf;
  CwConfig cw;
};

void validate(const AttackConfig& config);

struct AttackOutcome {
  std::vector<double> delta;
  bool success = false;  // attacked answer differs from the model's own clean answer
  AnswerId clean_answer = 0;
  AnswerId attacked_answer = 0;
  double delta_l2 = 0.0;
  double delta_linf = 0.0;
};

// -log pi(anchor | image, question), the answer marginal; gradient w.r.t. the image.
LossGradient untargeted_loss(const ParamSet& params, std::span<const double> image, int question, AnswerId anchor);

AttackOutcome fgsm(const ParamSet& params, const Sample& sample, double epsilon);
AttackOutcome pgd_attack(const ParamSet& params, const Sample& sample, const AttackConfig& config);

// max(z_anchor - max_{a != anchor} z_a, -kappa) over answer logits, and its
// image gradient.
LossGradient cw_margin(const ParamSet& params, std::span<const double> image, int question, AnswerId anchor,
                       double kappa);
AttackOutcome cw_attack(const ParamSet& params, const Sample& sample, const AttackConfig& config);

AttackOutcome run_attack(const ParamSet& params, const Sample& sample, const AttackConfig& config);

// Trapezoidal area under (epsilon, accuracy), normalized by the epsilon range.
double aua(std::span<const std::pair<double, double>> curve);

struct AttackRow {
  std::size_t sample = 0;
  AttackKind kind = AttackKind::kPgd;
  Norm norm = Norm::kLinf;
  double epsilon = 0.0;
  bool success = false;
  bool correct = false;  // attacked answer equals the ground truth
  AnswerId clean_answer = 0;
  AnswerId attacked_answer = 0;
  double delta_l2 = 0.0;
  double delta_linf = 0.0;
};

// Every config against every sample; rows ordered by (config, sample)
// regardless of `threads`.
std::vector<AttackRow> attack_sweep(const ParamSet& params, std::span<const Sample> samples,
                                    std::span<const AttackConfig> configs, int threads = 1);

void write_attack_table(const std::filesystem::path& path, std::span<const AttackRow> rows);
std::vector<AttackRow> read_attack_table(const std::filesystem::path& path);

}  // namespace advgrpo
