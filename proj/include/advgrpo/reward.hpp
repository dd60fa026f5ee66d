#pragma once

#include <span>
#include <string_view>

#include "advgrpo/core.hpp"

namespace advgrpo {

// Programmatic trace scorer standing in for a learned reward model. Output is
// always clamped to [0, 1].
struct RewardConfig {
  double w_fmt = 0.3;
  double w_cov = 0.7;
  double w_len = 0.2;
  int length_budget = 6;
  int trace_len = 6;
  double w_ans = 0.0;
};

void validate(const RewardConfig& config);

// clamp(w_fmt + w_cov * coverage - w_len * overrun, 0, 1) where coverage is
// the fraction of the sample's evidence tokens present in the trace and
// overrun = max(0, |trace| - budget) / trace_len.
double score_trace(std::span<const TokenId> trace, const Sample& sample, const RewardConfig& config);

// Reward of a raw response. Unparseable text, and answers outside the
// sample's choice set, score 0.
double reward(std::string_view text, const Sample& sample, const RewardConfig& config, const Vocabulary& vocab,
              const AnswerSet& answers);

}  // namespace advgrpo
