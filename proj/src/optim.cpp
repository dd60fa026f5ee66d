#include "advgrpo/optim.hpp"

#include <cmath>
#include <numbers>

#include "advgrpo/errors.hpp"

namespace advgrpo {

std::string_view optimizer_name(Optimizer opt) { return opt == Optimizer::kSgd ? "sgd" : "rms"; }

Optimizer parse_optimizer(std::string_view name) {
  if (name == "sgd") return Optimizer::kSgd;
  if (name == "rms") return Optimizer::kRms;
  throw ConfigError("unknown optimizer '" + std::string(name) + "'");
}

double cosine_lr(double base, long step, long total) {
  if (total <= 1) return base;
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * frac));
}

double apply_update(ParamSet& params, const ParamSet& g, double lr, double clip, Optimizer opt, double direction) {
  const double norm = std::sqrt(squared_norm(g));
  if (!std::isfinite(norm)) throw TrainingDiverged("non-finite gradient");
  const double scale = (clip > 0 && norm > clip) ? clip / norm : 1.0;
  auto dst = params.arrays();
  const auto src = g.arrays();
  for (std::size_t a = 0; a < dst.size(); ++a) {
    if (!dst[a].trainable || dst[a].values.empty()) continue;
    double f = direction * lr * scale;
    if (opt == Optimizer::kRms) {
      double ss = 0.0;
      for (double v : src[a].values) ss += v * v;
      const double rms = std::sqrt(ss / static_cast<double>(src[a].values.size())) * scale;
      f = direction * lr * scale / (rms + 1e-8);
    }
    for (std::size_t i = 0; i < dst[a].values.size(); ++i) dst[a].values[i] += f * src[a].values[i];
  }
  return norm;
}

}  // namespace advgrpo
