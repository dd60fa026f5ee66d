#include "advgrpo/perturb.hpp"

#include <algorithm>
#include <cmath>

#include "advgrpo/errors.hpp"

namespace advgrpo {

std::string_view norm_name(Norm norm) { return norm == Norm::kLinf ? "linf" : "l2"; }

Norm parse_norm(std::string_view name) {
  if (name == "linf" || name == "Linf" || name == "inf") return Norm::kLinf;
  if (name == "l2" || name == "L2") return Norm::kL2;
  throw ConfigError("unknown norm '" + std::string(name) + "'");
}

double linf_norm(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double norm_of(std::span<const double> v, Norm norm) { return norm == Norm::kLinf ? linf_norm(v) : l2_norm(v); }

void project(std::span<double> delta, double eps, Norm norm) {
  if (norm == Norm::kLinf) {
    for (double& x : delta) x = std::clamp(x, -eps, eps);
    return;
  }
  const double n = l2_norm(delta);
  if (n > eps) {
    const double f = eps / n;
    for (double& x : delta) x *= f;
  }
}

void pgd_step(std::span<double> delta, std::span<const double> g, double alpha, double eps, Norm norm) {
  if (norm == Norm::kLinf) {
    for (std::size_t j = 0; j < delta.size(); ++j) delta[j] += alpha * sign(g[j]);
  } else {
    const double n = l2_norm(g);
    if (n > 0) {
      for (std::size_t j = 0; j < delta.size(); ++j) delta[j] += alpha * g[j] / n;
    }
  }
  project(delta, eps, norm);
}

std::vector<double> add(std::span<const double> a, std::span<const double> b) {
  std::vector<double> out(a.size());
  for (std::size_t j = 0; j < a.size(); ++j) out[j] = a[j] + b[j];
  return out;
}

}  // namespace advgrpo
