#include "advgrpo/synthenv.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "advgrpo/errors.hpp"
#include "advgrpo/rng.hpp"

namespace advgrpo {

namespace {

// Unit vectors; orthonormal when count <= dim (Gram-Schmidt on Gaussians).
std::vector<std::vector<double>> class_directions(int count, int dim, Rng& rng) {
  std::vector<std::vector<double>> dirs;
  for (int i = 0; i < count; ++i) {
    std::vector<double> v(static_cast<std::size_t>(dim));
    for (int attempt = 0;; ++attempt) {
      rng.fill_normal(v, 1.0);
      if (i < dim) {
        for (const auto& u : dirs) {
          const double p = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
          for (int j = 0; j < dim; ++j) v[j] -= p * u[j];
        }
      }
      const double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
      if (n > 1e-6 || attempt > 100) {
        for (double& x : v) x /= (n > 0 ? n : 1.0);
        break;
      }
    }
    dirs.push_back(v);
  }
  return dirs;
}

// Sign codes in {-1,+1}^dim, distinct when 2^dim allows it. Uses Walsh rows
// when dim is a power of two and enough non-constant rows exist.
std::vector<std::vector<double>> class_codes(int count, int dim, Rng& rng) {
  std::vector<std::vector<double>> codes;
  if (dim == 0) return std::vector<std::vector<double>>(static_cast<std::size_t>(count));
  const bool pow2 = (dim & (dim - 1)) == 0;
  if (pow2 && count <= dim - 1) {
    std::vector<int> rows(static_cast<std::size_t>(dim - 1));
    std::iota(rows.begin(), rows.end(), 1);
    std::shuffle(rows.begin(), rows.end(), rng.engine());
    for (int i = 0; i < count; ++i) {
      std::vector<double> c(static_cast<std::size_t>(dim));
      for (int j = 0; j < dim; ++j) c[j] = (std::popcount(static_cast<unsigned>(rows[i] & j)) % 2) ? -1.0 : 1.0;
      codes.push_back(std::move(c));
    }
    return codes;
  }
  const bool can_be_distinct = dim >= 31 || count <= (1 << dim);
  for (int i = 0; i < count; ++i) {
    std::vector<double> c(static_cast<std::size_t>(dim));
    for (int attempt = 0; attempt < 1000; ++attempt) {
      for (double& x : c) x = rng.uniform() < 0.5 ? -1.0 : 1.0;
      if (!can_be_distinct || std::find(codes.begin(), codes.end(), c) == codes.end()) break;
    }
    codes.push_back(c);
  }
  return codes;
}

double score(const PlantedRule& rule, std::span<const double> image, int q, int m, int a) {
  const auto& w = rule.weights[static_cast<std::size_t>(m)];
  double s = rule.biases[static_cast<std::size_t>(m)][static_cast<std::size_t>(q * rule.choices + a)];
  for (int j = 0; j < rule.d; ++j) s += w[static_cast<std::size_t>(a * rule.d + j)] * image[static_cast<std::size_t>(j)];
  return s;
}

nlohmann::json vec_of_vec(const std::vector<std::vector<double>>& v) { return v; }

nlohmann::ordered_json rule_json(const PlantedRule& rule) {
  nlohmann::ordered_json j;
  j["d"] = rule.d;
  j["k"] = rule.choices;
  j["modalities"] = rule.modalities;
  j["questions"] = rule.questions;
  j["weights"] = vec_of_vec(rule.weights);
  j["biases"] = vec_of_vec(rule.biases);
  j["class_means"] = vec_of_vec(rule.class_means);
  j["evidence"] = rule.evidence;
  return j;
}

}  // namespace

void validate(const TaskSpec& s) {
  if (s.d < 1 || s.choices < 1 || s.vocab < 1 || s.modalities < 1 || s.questions < 1) {
    throw ConfigError("task dimensions d, k, vocab, modalities, questions must be >= 1");
  }
  if (s.choices > 26) throw ConfigError("at most 26 answer choices are supported");
  if (s.trace_len < 0) throw ConfigError("trace length must be >= 0");
  if (s.margin < 0 || s.noise_sigma < 0 || s.fragile_sigma < 0 || s.fragile_amplitude < 0) {
    throw ConfigError("margin and noise levels must be >= 0");
  }
  if (!(s.split_ratio > 0 && s.split_ratio < 1)) throw ConfigError("split ratio must be in (0, 1)");
  if (s.fragile_dims < 0 || s.fragile_dims > s.d) throw ConfigError("fragile dims must be in [0, d]");
  if (s.evidence_size < 1 || s.evidence_size > s.vocab) throw ConfigError("evidence size must be in [1, vocab]");
  if (static_cast<int>(s.counts.size()) != s.modalities) {
    throw ConfigError("need one sample count per modality");
  }
  for (int c : s.counts) {
    if (c < 1) throw ConfigError("every modality needs at least one sample");
  }
}

std::string canonical_text(const TaskSpec& s) {
  nlohmann::ordered_json j;
  j["d"] = s.d;
  j["k"] = s.choices;
  j["vocab"] = s.vocab;
  j["trace_len"] = s.trace_len;
  j["modalities"] = s.modalities;
  j["questions"] = s.questions;
  j["margin"] = s.margin;
  j["noise_sigma"] = s.noise_sigma;
  j["counts"] = s.counts;
  j["split_ratio"] = s.split_ratio;
  j["fragile_dims"] = s.fragile_dims;
  j["fragile_amplitude"] = s.fragile_amplitude;
  j["fragile_sigma"] = s.fragile_sigma;
  j["class_radius"] = s.class_radius;
  j["modality_spread"] = s.modality_spread;
  j["robust_weight"] = s.robust_weight;
  j["bias_scale"] = s.bias_scale;
  j["evidence_size"] = s.evidence_size;
  return j.dump();
}

const std::vector<TokenId>& PlantedRule::evidence_for(int modality, int question, AnswerId answer) const {
  return evidence[static_cast<std::size_t>((modality * questions + question) * choices + answer)];
}

std::span<const double> PlantedRule::mean(int modality, AnswerId answer) const {
  return std::span<const double>(class_means[static_cast<std::size_t>(modality)])
      .subspan(static_cast<std::size_t>(answer * d), static_cast<std::size_t>(d));
}

PlantedRule make_rule(const TaskSpec& spec, std::uint64_t seed) {
  validate(spec);
  const int d = spec.d;
  const int k = spec.choices;
  const int fragile = spec.fragile_dims;
  const int robust = d - fragile;

  PlantedRule rule;
  rule.d = d;
  rule.choices = k;
  rule.modalities = spec.modalities;
  rule.questions = spec.questions;

  Rng rng(derive_seed(seed, 0x52554c45));  // "RULE"
  const double robust_w = fragile == 0 ? 1.0 : spec.robust_weight;
  const double fragile_w = spec.fragile_amplitude > 0 ? 1.0 / spec.fragile_amplitude : 1.0;

  for (int m = 0; m < spec.modalities; ++m) {
    std::vector<double> offset(static_cast<std::size_t>(robust));
    rng.fill_normal(offset, spec.modality_spread);
    const auto dirs = class_directions(k, robust, rng);
    const auto codes = class_codes(k, fragile, rng);

    std::vector<double> w(static_cast<std::size_t>(k * d));
    std::vector<double> mu(static_cast<std::size_t>(k * d));
    for (int a = 0; a < k; ++a) {
      for (int j = 0; j < robust; ++j) {
        w[a * d + j] = robust_w * dirs[a][j];
        mu[a * d + j] = offset[j] + spec.class_radius * dirs[a][j];
      }
      for (int j = 0; j < fragile; ++j) {
        w[a * d + robust + j] = fragile_w * codes[a][j];
        mu[a * d + robust + j] = spec.fragile_amplitude * codes[a][j];
      }
    }
    rule.weights.push_back(std::move(w));
    rule.class_means.push_back(std::move(mu));

    std::vector<double> b(static_cast<std::size_t>(spec.questions * k));
    rng.fill_normal(b, spec.bias_scale);
    rule.biases.push_back(std::move(b));
  }

  std::vector<TokenId> pool(static_cast<std::size_t>(spec.vocab));
  std::iota(pool.begin(), pool.end(), 0);
  for (int i = 0; i < spec.modalities * spec.questions * k; ++i) {
    std::shuffle(pool.begin(), pool.end(), rng.engine());
    std::vector<TokenId> e(pool.begin(), pool.begin() + spec.evidence_size);
    std::sort(e.begin(), e.end());
    rule.evidence.push_back(std::move(e));
  }

  if (spec.margin > 0 && k > 1) {
    double min_gap = std::numeric_limits<double>::infinity();
    for (int m = 0; m < spec.modalities; ++m) {
      for (int q = 0; q < spec.questions; ++q) {
        for (int a = 0; a < k; ++a) min_gap = std::min(min_gap, oracle_margin(rule, rule.mean(m, a), q, m, a));
      }
    }
    if (!(min_gap > 0)) {
      throw ConfigError("class means are not separable for d=" + std::to_string(d) + ", k=" + std::to_string(k) +
                        "; margin " + std::to_string(spec.margin) + " unachievable");
    }
    if (min_gap < spec.margin) {
      // Uniform rescaling changes gaps, not decisions. The small factor keeps
      // rounding from landing just under the requested margin.
      const double scale = spec.margin / min_gap * (1.0 + 1e-9);
      for (auto& w : rule.weights) {
        for (double& x : w) x *= scale;
      }
      for (auto& b : rule.biases) {
        for (double& x : b) x *= scale;
      }
    }
  }
  return rule;
}

AnswerId oracle_answer(const PlantedRule& rule, std::span<const double> image, int question, int modality) {
  if (static_cast<int>(image.size()) != rule.d) throw ConfigError("image dimension does not match rule");
  AnswerId best = 0;
  double best_score = score(rule, image, question, modality, 0);
  for (int a = 1; a < rule.choices; ++a) {
    const double s = score(rule, image, question, modality, a);
    if (s > best_score) {
      best = a;
      best_score = s;
    }
  }
  return best;
}

double oracle_margin(const PlantedRule& rule, std::span<const double> image, int question, int modality,
                     AnswerId answer) {
  const double own = score(rule, image, question, modality, answer);
  double other = -std::numeric_limits<double>::infinity();
  for (int a = 0; a < rule.choices; ++a) {
    if (a != answer) other = std::max(other, score(rule, image, question, modality, a));
  }
  return own - other;
}

SplitDatasets gen_dataset(const PlantedRule& rule, const TaskSpec& spec, std::uint64_t seed) {
  validate(spec);
  if (rule.d != spec.d || rule.choices != spec.choices || rule.modalities != spec.modalities ||
      rule.questions != spec.questions) {
    throw ConfigError("rule shape does not match task spec");
  }
  const int robust = spec.d - spec.fragile_dims;
  const std::string hash =
      hex64(fnv1a64(canonical_text(spec) + "#" + std::to_string(seed) + "#" + rule_json(rule).dump()));

  SplitDatasets out;
  out.train.split = Split::kTrain;
  out.test.split = Split::kTest;
  out.train.spec_hash = hash;
  out.test.spec_hash = hash;

  for (int m = 0; m < spec.modalities; ++m) {
    Rng rng(derive_seed(seed, 0x44415441, static_cast<std::uint64_t>(m)));  // "DATA"
    const int n = spec.counts[static_cast<std::size_t>(m)];
    const int n_train = static_cast<int>(std::llround(n * spec.split_ratio));
    for (int i = 0; i < n; ++i) {
      const int cls = static_cast<int>(rng.below(static_cast<std::size_t>(spec.choices)));
      Sample s;
      s.question = static_cast<int>(rng.below(static_cast<std::size_t>(spec.questions)));
      s.choices = spec.choices;
      s.modality = m;
      const auto mu = rule.mean(m, cls);
      s.image.assign(mu.begin(), mu.end());
      for (int j = 0; j < spec.d; ++j) {
        s.image[j] += (j < robust ? spec.noise_sigma : spec.fragile_sigma) * rng.normal();
      }
      s.truth = oracle_answer(rule, s.image, s.question, m);
      s.evidence = rule.evidence_for(m, s.question, s.truth);
      validate_sample(s, spec.shape());
      (i < n_train ? out.train : out.test).samples.push_back(std::move(s));
    }
  }
  return out;
}

void write_rule(const std::filesystem::path& path, const PlantedRule& rule) {
  const auto j = rule_json(rule);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(1) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

PlantedRule read_rule(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    PlantedRule r;
    r.d = j.at("d").get<int>();
    r.choices = j.at("k").get<int>();
    r.modalities = j.at("modalities").get<int>();
    r.questions = j.at("questions").get<int>();
    r.weights = j.at("weights").get<std::vector<std::vector<double>>>();
    r.biases = j.at("biases").get<std::vector<std::vector<double>>>();
    r.class_means = j.at("class_means").get<std::vector<std::vector<double>>>();
    r.evidence = j.at("evidence").get<std::vector<std::vector<int>>>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace advgrpo
