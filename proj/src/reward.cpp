#include "advgrpo/reward.hpp"

#include <algorithm>

#include "advgrpo/errors.hpp"

namespace advgrpo {

void validate(const RewardConfig& c) {
  if (c.w_fmt < 0 || c.w_cov < 0 || c.w_len < 0 || c.w_ans < 0) throw ConfigError("reward weights must be >= 0");
  if (c.trace_len < 1) throw ConfigError("reward trace length must be >= 1");
  if (c.length_budget < 0 || c.length_budget > c.trace_len) {
    throw ConfigError("reward length budget must be in [0, trace length]");
  }
}

double score_trace(std::span<const TokenId> trace, const Sample& sample, const RewardConfig& c) {
  double coverage = 0.0;
  if (!sample.evidence.empty()) {
    int hits = 0;
    for (TokenId e : sample.evidence) {
      if (std::find(trace.begin(), trace.end(), e) != trace.end()) ++hits;
    }
    coverage = static_cast<double>(hits) / static_cast<double>(sample.evidence.size());
  }
  const double overrun =
      std::max(0.0, static_cast<double>(static_cast<int>(trace.size()) - c.length_budget) / c.trace_len);
  return std::clamp(c.w_fmt + c.w_cov * coverage - c.w_len * overrun, 0.0, 1.0);
}

double reward(std::string_view text, const Sample& sample, const RewardConfig& c, const Vocabulary& vocab,
              const AnswerSet& answers) {
  const auto y = try_parse_output(text, vocab, answers);
  if (!y || y->answer >= sample.choices) return 0.0;
  const double bonus = y->answer == sample.truth ? c.w_ans : 0.0;
  return std::clamp(score_trace(y->trace, sample, c) + bonus, 0.0, 1.0);
}

}  // namespace advgrpo
