#include "advgrpo/smoothing.hpp"

#include <cmath>
#include <exception>
#include <fstream>
#include <numbers>
#include <thread>

#include "advgrpo/errors.hpp"
#include "advgrpo/perturb.hpp"

namespace advgrpo {

void validate(const SmoothingConfig& c) {
  if (!(c.sigma > 0)) throw ConfigError("smoothing sigma must be > 0");
  if (c.n_pred < 1 || c.n_cert < 1) throw ConfigError("smoothing sample counts must be >= 1");
  if (!(c.alpha > 0 && c.alpha < 1)) throw ConfigError("smoothing alpha must lie in (0, 1)");
}

VoteMap noisy_votes(const ParamSet& params, const Sample& sample, double sigma, int n, Rng& rng) {
  if (n < 1) throw ConfigError("noisy_votes needs n >= 1");
  VoteMap votes;
  std::vector<double> x(sample.image.size());
  for (int i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = sample.image[j] + sigma * rng.normal();
    const AnswerId a = greedy_answer(params, x, sample.question);
    ++votes[a >= 0 && a < sample.choices ? a : kInvalidVote];
  }
  return votes;
}

std::optional<AnswerId> top_vote(const VoteMap& votes) {
  std::optional<AnswerId> best;
  long best_count = 0;
  for (const auto& [a, count] : votes) {  // ascending ids, so strict > keeps the lowest on ties
    if (a == kInvalidVote) continue;
    if (count > best_count) {
      best = a;
      best_count = count;
    }
  }
  return best;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double inverse_normal_cdf(double p) {
  if (!(p > 0 && p < 1)) throw DomainError("inverse normal CDF needs p in (0, 1)");
  // Acklam's rational approximation (relative error ~1e-9).
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double lo = 0.02425;
  double x;
  if (p < lo) {
    const double q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p <= 1 - lo) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  } else {
    const double q = std::sqrt(-2 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  // Halley refinement. Work with the nearer tail so the residual keeps its
  // precision for p close to 1.
  for (int it = 0; it < 2; ++it) {
    const double e = p <= 0.5 ? normal_cdf(x) - p : (1 - p) - normal_cdf(-x);
    const double u = e * std::sqrt(2 * std::numbers::pi) * std::exp(0.5 * x * x);
    x -= u / (1 + 0.5 * x * u);
  }
  return x;
}

double binomial_survival(long k, long n, double p) {
  if (n < 0 || k < 0 || k > n + 1) throw DomainError("binomial survival needs 0 <= k <= n");
  if (k == 0) return 1.0;
  if (k > n) return 0.0;
  if (p <= 0) return 0.0;
  if (p >= 1) return 1.0;
  const double lp = std::log(p), lq = std::log1p(-p);
  const double lg_n = std::lgamma(static_cast<double>(n) + 1);
  double total = 0.0;
  for (long i = k; i <= n; ++i) {
    const double lt = lg_n - std::lgamma(static_cast<double>(i) + 1) - std::lgamma(static_cast<double>(n - i) + 1) +
                      static_cast<double>(i) * lp + static_cast<double>(n - i) * lq;
    total += std::exp(lt);
  }
  return std::min(total, 1.0);
}

double clopper_pearson_lower(long k, long n, double alpha) {
  if (n < 1 || k < 0 || k > n) throw DomainError("Clopper-Pearson needs 0 <= k <= n, n >= 1");
  if (!(alpha > 0 && alpha < 1)) throw DomainError("Clopper-Pearson needs alpha in (0, 1)");
  if (k == 0) return 0.0;
  // The survival function is increasing in p.
  double lo = 0.0, hi = 1.0;
  while (hi - lo > 1e-12) {
    const double mid = 0.5 * (lo + hi);
    (binomial_survival(k, n, mid) < alpha ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

double certified_radius(double sigma, double p_lower) {
  return p_lower > 0.5 ? sigma * inverse_normal_cdf(p_lower) : 0.0;
}

Certificate certify(const ParamSet& params, const Sample& sample, const SmoothingConfig& config, Rng& rng) {
  validate(config);
  Certificate cert;
  Rng stage1 = rng.substream(1);
  Rng stage2 = rng.substream(2);
  rng.next_u64();
  const auto winner = top_vote(noisy_votes(params, sample, config.sigma, config.n_pred, stage1));
  cert.votes = noisy_votes(params, sample, config.sigma, config.n_cert, stage2);
  if (!winner) return cert;
  cert.candidate = *winner;
  const auto it = cert.votes.find(*winner);
  cert.count = it == cert.votes.end() ? 0 : it->second;
  cert.p_lower = clopper_pearson_lower(cert.count, config.n_cert, config.alpha);
  if (cert.p_lower > 0.5) {
    cert.prediction = *winner;
    cert.radius = certified_radius(config.sigma, cert.p_lower);
  }
  return cert;
}

double radius_two_sided(double sigma, double p_a, double p_b) {
  if (!(sigma > 0)) throw DomainError("radius needs sigma > 0");
  if (!(p_b > 0 && p_a < 1)) throw DomainError("radius needs 0 < p_b <= p_a < 1");
  if (p_a < p_b) throw DomainError("radius needs p_a >= p_b");
  return 0.5 * sigma * (inverse_normal_cdf(p_a) - inverse_normal_cdf(p_b));
}

double hoeffding_bound(long n, double eps) {
  if (n < 1 || !(eps > 0)) throw DomainError("Hoeffding bound needs n >= 1 and eps > 0");
  return 2.0 * std::exp(-2.0 * static_cast<double>(n) * eps * eps);
}

std::vector<Certificate> certify_all(const ParamSet& params, std::span<const Sample> samples,
                                     const SmoothingConfig& config, std::uint64_t seed, int threads) {
  validate(config);
  std::vector<Certificate> out(samples.size());
  auto work = [&](std::size_t i) {
    Rng rng(derive_seed(seed, i));
    out[i] = certify(params, samples[i], config, rng);
  };
  const std::size_t workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1) {
    for (std::size_t i = 0; i < samples.size(); ++i) work(i);
    return out;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < samples.size(); i += workers) work(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

std::optional<AnswerId> smoothed_predict(const ParamSet& params, std::span<const double> image, const Sample& sample,
                                         double sigma, int n, Rng& rng) {
  Sample s = sample;
  s.image.assign(image.begin(), image.end());
  return top_vote(noisy_votes(params, s, sigma, n, rng));
}

std::vector<double> smoothed_l2_attack(const ParamSet& params, const Sample& sample, AnswerId target, double epsilon,
                                       double sigma, const SmoothedAttackConfig& config, Rng& rng) {
  if (!(epsilon >= 0) || config.steps < 1 || config.noise_samples < 1) {
    throw ConfigError("smoothed attack needs epsilon >= 0, steps >= 1, noise_samples >= 1");
  }
  const std::size_t d = sample.image.size();
  std::vector<double> delta(d, 0.0);
  if (epsilon == 0) return delta;
  const double alpha = 2.0 * epsilon / config.steps;
  LossSpec spec;
  spec.terms.push_back(AnswerNllTerm{target, 1.0 / config.noise_samples});
  std::vector<double> x(d);
  for (int step = 0; step < config.steps; ++step) {
    std::vector<double> g(d, 0.0);
    for (int m = 0; m < config.noise_samples; ++m) {
      for (std::size_t j = 0; j < d; ++j) x[j] = sample.image[j] + delta[j] + sigma * rng.normal();
      const auto gi = grad(params, x, sample.question, spec).grad.image;
      for (std::size_t j = 0; j < d; ++j) g[j] += gi[j];
    }
    pgd_step(delta, g, alpha, epsilon, Norm::kL2);
  }
  return delta;
}

void write_certificate_table(const std::filesystem::path& path, std::span<const Certificate> certs,
                             std::span<const Sample> samples) {
  if (certs.size() != samples.size()) throw ConfigError("certificate table needs one certificate per sample");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "sample\tmodality\ttruth\tprediction\tcount\tp_lower\tradius\tabstain\n";
  for (std::size_t i = 0; i < certs.size(); ++i) {
    const auto& c = certs[i];
    out << i << '\t' << samples[i].modality << '\t' << samples[i].truth << '\t'
        << (c.prediction ? std::to_string(*c.prediction) : std::string("-")) << '\t' << c.count << '\t'
        << format_double(c.p_lower) << '\t' << format_double(c.radius) << '\t' << int(!c.prediction) << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<std::pair<double, double>> certified_accuracy_curve(std::span<const Certificate> certs,
                                                                std::span<const Sample> samples,
                                                                std::span<const double> radii) {
  if (certs.size() != samples.size()) throw ConfigError("curve needs one certificate per sample");
  std::vector<std::pair<double, double>> curve;
  for (double r : radii) {
    long ok = 0;
    for (std::size_t i = 0; i < certs.size(); ++i) {
      const auto& c = certs[i];
      ok += c.prediction && *c.prediction == samples[i].truth && c.radius >= r;
    }
    curve.emplace_back(r, certs.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(certs.size()));
  }
  return curve;
}

}  // namespace advgrpo
