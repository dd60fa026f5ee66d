#pragma once

#include <string_view>

#include "advgrpo/policy.hpp"

namespace advgrpo {

// Plain clipped gradient steps, or per-array RMS-normalized steps (no
// momentum, no state).
enum class Optimizer { kSgd, kRms };

std::string_view optimizer_name(Optimizer opt);
Optimizer parse_optimizer(std::string_view name);

// Cosine decay from `base` to 0 over `total` steps; constant when total <= 1.
double cosine_lr(double base, long step, long total);

// Applies params += direction * lr * step(g), where step(g) is g rescaled to
// global norm <= clip (clip <= 0 disables), optionally RMS-normalized per
// array. direction is -1 for descent, +1 for ascent. Returns the pre-clip
// gradient norm.
double apply_update(ParamSet& params, const ParamSet& g, double lr, double clip, Optimizer opt, double direction);

}  // namespace advgrpo
