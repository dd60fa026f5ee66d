#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "advgrpo/policy.hpp"

namespace advgrpo {

struct SmoothingConfig {
  double sigma = 0.25;
  int n_pred = 100;
  int n_cert = 1000;
  double alpha = 0.001;
};

void validate(const SmoothingConfig& config);

// Votes for answers outside the sample's choice set land here; it can never
// be certified.
inline constexpr int kInvalidVote = -1;

using VoteMap = std::map<int, long>;

// Greedy answers of pi(. | image + eta, question) for n draws eta ~ N(0, sigma^2 I).
VoteMap noisy_votes(const ParamSet& params, const Sample& sample, double sigma, int n, Rng& rng);

// Most-voted valid answer, ties to the lowest id; nullopt when no vote is valid.
std::optional<AnswerId> top_vote(const VoteMap& votes);

double normal_cdf(double x);

// Rational initial guess refined by Halley steps against normal_cdf.
double inverse_normal_cdf(double p);

// P(Bin(n, p) >= k).
double binomial_survival(long k, long n, double p);

// One-sided exact lower bound: the p with P(Bin(n, p) >= k) = alpha, by
// bisection to 1e-10.
double clopper_pearson_lower(long k, long n, double alpha);

struct Certificate {
  std::optional<AnswerId> prediction;  // nullopt = abstain
  AnswerId candidate = 0;              // stage-1 winner, even when abstaining
  VoteMap votes;                       // stage-2 tally
  long count = 0;                      // stage-2 votes for the candidate
  double p_lower = 0.0;
  double radius = 0.0;
};

// sigma * Phi^-1(p_lower) when p_lower > 0.5, else 0.
double certified_radius(double sigma, double p_lower);

// Stage 1 picks the candidate from n_pred draws, stage 2 counts n_cert fresh
// draws; both use their own substream of `rng`.
Certificate certify(const ParamSet& params, const Sample& sample, const SmoothingConfig& config, Rng& rng);

// (sigma / 2) (Phi^-1(p_a) - Phi^-1(p_b)).
double radius_two_sided(double sigma, double p_a, double p_b);

// 2 exp(-2 n eps^2).
double hoeffding_bound(long n, double eps);

// Certificates for every sample; sample i draws from Rng(derive_seed(seed, i))
// so results do not depend on `threads`.
std::vector<Certificate> certify_all(const ParamSet& params, std::span<const Sample> samples,
                                     const SmoothingConfig& config, std::uint64_t seed, int threads = 1);

// Majority vote of n fresh noisy draws at `image`; ties to the lowest id.
std::optional<AnswerId> smoothed_predict(const ParamSet& params, std::span<const double> image, const Sample& sample,
                                         double sigma, int n, Rng& rng);

struct SmoothedAttackConfig {
  int steps = 20;
  int noise_samples = 16;  // Monte-Carlo draws per gradient estimate
};

// L2 PGD of radius `epsilon` on E_eta[-log pi(target | image + delta + eta)],
// the expected NLL of the smoothed prediction. Returns the perturbation.
std::vector<double> smoothed_l2_attack(const ParamSet& params, const Sample& sample, AnswerId target, double epsilon,
                                       double sigma, const SmoothedAttackConfig& config, Rng& rng);

// One row per sample: prediction, p_lower, radius, abstain flag.
void write_certificate_table(const std::filesystem::path& path, std::span<const Certificate> certs,
                             std::span<const Sample> samples);

// Fraction of samples whose certified prediction is correct with radius >= r,
// for each r.
std::vector<std::pair<double, double>> certified_accuracy_curve(std::span<const Certificate> certs,
                                                                std::span<const Sample> samples,
                                                                std::span<const double> radii);

}  // namespace advgrpo
