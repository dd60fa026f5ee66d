#pragma once

#include <span>
#include <string_view>
#include <vector>

namespace advgrpo {

// Threat-set geometry shared by training-time and evaluation-time PGD.
enum class Norm { kLinf, kL2 };

std::string_view norm_name(Norm norm);
Norm parse_norm(std::string_view name);

// sign(0) = 0.
inline double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

double linf_norm(std::span<const double> v);
double l2_norm(std::span<const double> v);
double norm_of(std::span<const double> v, Norm norm);

// Euclidean projection onto {||delta|| <= eps}, in place. Identity inside
// the ball; L-inf clamps per coordinate, L2 rescales radially.
void project(std::span<double> delta, double eps, Norm norm);

// One ascent step: delta += alpha * sign(g) (L-inf) or alpha * g / ||g||_2
// (L2, no move when g = 0), followed by projection.
void pgd_step(std::span<double> delta, std::span<const double> g, double alpha, double eps, Norm norm);

std::vector<double> add(std::span<const double> a, std::span<const double> b);

}  // namespace advgrpo
