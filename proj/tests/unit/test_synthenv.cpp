#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "advgrpo/errors.hpp"
#include "advgrpo/synthenv.hpp"

using namespace advgrpo;

namespace {

TaskSpec small_spec() {
  TaskSpec s;
  s.counts = std::vector<int>(8, 50);
  return s;
}

}  // namespace

TEST_CASE("make_rule is deterministic") {
  const auto spec = small_spec();
  const auto a = make_rule(spec, 7);
  const auto b = make_rule(spec, 7);
  CHECK(a.weights == b.weights);
  CHECK(a.biases == b.biases);
  CHECK(a.evidence == b.evidence);
  CHECK(a.class_means == b.class_means);
  const auto c = make_rule(spec, 8);
  CHECK(a.weights != c.weights);
}

TEST_CASE("noiseless class means clear the requested margin") {
  auto spec = small_spec();
  for (double margin : {0.5, 1.0, 25.0}) {
    spec.margin = margin;
    const auto rule = make_rule(spec, 3);
    for (int m = 0; m < spec.modalities; ++m) {
      for (int q = 0; q < spec.questions; ++q) {
        for (int a = 0; a < spec.choices; ++a) {
          CHECK(oracle_answer(rule, rule.mean(m, a), q, m) == a);
          CHECK(oracle_margin(rule, rule.mean(m, a), q, m, a) >= margin);
        }
      }
    }
  }
}

TEST_CASE("margin zero accepts any weights; inseparable means are rejected") {
  auto spec = small_spec();
  spec.margin = 0.0;
  CHECK_NOTHROW(make_rule(spec, 1));

  // No fragile code and a single robust coordinate cannot separate 4 classes
  // placed on +-1.
  spec.margin = 1.0;
  spec.d = 1;
  spec.fragile_dims = 0;
  spec.modality_spread = 0.0;
  CHECK_THROWS_AS(make_rule(spec, 1), ConfigError);
}

TEST_CASE("single-class tasks label everything 0") {
  auto spec = small_spec();
  spec.choices = 1;
  const auto rule = make_rule(spec, 5);
  const auto data = gen_dataset(rule, spec, 5);
  for (const auto& s : data.train.samples) CHECK(s.truth == 0);
  for (const auto& s : data.test.samples) CHECK(s.truth == 0);
}

TEST_CASE("oracle picks a dominant row, bias argmax, and lowest id on ties") {
  PlantedRule rule;
  rule.d = 2;
  rule.choices = 3;
  rule.modalities = 1;
  rule.questions = 1;
  rule.weights = {{1.0, 0.0, 0.0, 1.0, 1.0, 1.0}};
  rule.biases = {{0.0, 0.0, 0.0}};
  const std::vector<double> big{0.0, 100.0};
  // Row 1 = (0,1) scaled; row 2 = (1,1) scores 100 as well -> tie -> lowest id.
  CHECK(oracle_answer(rule, big, 0, 0) == 1);
  const std::vector<double> zero{0.0, 0.0};
  rule.biases = {{0.1, 0.3, 0.2}};
  CHECK(oracle_answer(rule, zero, 0, 0) == 1);
  rule.biases = {{0.0, 0.0, 0.0}};
  CHECK(oracle_answer(rule, zero, 0, 0) == 0);

  const auto spec = small_spec();
  const auto real = make_rule(spec, 11);
  for (int a = 0; a < spec.choices; ++a) {
    std::vector<double> img(real.weights[2].begin() + a * spec.d, real.weights[2].begin() + (a + 1) * spec.d);
    for (double& v : img) v *= 1e3;
    CHECK(oracle_answer(real, img, 1, 2) == a);
  }
}

TEST_CASE("gen_dataset splits each modality 80:20 and is deterministic") {
  auto spec = small_spec();
  spec.modalities = 1;
  spec.counts = {100};
  const auto rule = make_rule(spec, 2);
  const auto data = gen_dataset(rule, spec, 9);
  CHECK(data.train.samples.size() == 80);
  CHECK(data.test.samples.size() == 20);
  const auto again = gen_dataset(rule, spec, 9);
  CHECK(again.train.samples == data.train.samples);
  CHECK(again.test.samples == data.test.samples);
  CHECK(data.train.spec_hash == data.test.spec_hash);

  const auto full = small_spec();
  const auto rule8 = make_rule(full, 2);
  const auto d8 = gen_dataset(rule8, full, 9);
  std::vector<int> train_per(8, 0), test_per(8, 0);
  for (const auto& s : d8.train.samples) ++train_per[s.modality];
  for (const auto& s : d8.test.samples) ++test_per[s.modality];
  for (int m = 0; m < 8; ++m) {
    CHECK(train_per[m] == 40);
    CHECK(test_per[m] == 10);
  }
}

TEST_CASE("train and test images are disjoint") {
  const auto spec = small_spec();
  const auto rule = make_rule(spec, 4);
  const auto data = gen_dataset(rule, spec, 4);
  std::set<std::vector<double>> train;
  for (const auto& s : data.train.samples) train.insert(s.image);
  for (const auto& s : data.test.samples) CHECK(train.count(s.image) == 0);
}

TEST_CASE("samples carry oracle truth and the evidence of that truth") {
  const auto spec = small_spec();
  const auto rule = make_rule(spec, 6);
  const auto data = gen_dataset(rule, spec, 6);
  for (const auto& s : data.train.samples) {
    CHECK(s.truth == oracle_answer(rule, s.image, s.question, s.modality));
    CHECK(s.evidence == rule.evidence_for(s.modality, s.question, s.truth));
    CHECK_FALSE(s.evidence.empty());
    CHECK_NOTHROW(validate_sample(s, spec.shape()));
  }
}

TEST_CASE("noiseless samples sit on class means with the full margin") {
  auto spec = small_spec();
  spec.noise_sigma = 0.0;
  spec.fragile_sigma = 0.0;
  const auto rule = make_rule(spec, 10);
  const auto data = gen_dataset(rule, spec, 10);
  for (const auto& s : data.train.samples) {
    CHECK(oracle_margin(rule, s.image, s.question, s.modality, s.truth) >= spec.margin);
    const auto mu = rule.mean(s.modality, s.truth);
    CHECK(std::equal(mu.begin(), mu.end(), s.image.begin()));
  }
}

TEST_CASE("label distribution per modality is near uniform over a seed sweep") {
  const TaskSpec spec;  // defaults, 400 per modality
  std::vector<std::vector<int>> counts(8, std::vector<int>(4, 0));
  std::vector<int> totals(8, 0);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto rule = make_rule(spec, seed);
    const auto data = gen_dataset(rule, spec, seed + 100);
    for (const auto* ds : {&data.train, &data.test}) {
      for (const auto& s : ds->samples) {
        ++counts[s.modality][s.truth];
        ++totals[s.modality];
      }
    }
  }
  for (int m = 0; m < 8; ++m) {
    for (int a = 0; a < 4; ++a) {
      const double frac = static_cast<double>(counts[m][a]) / totals[m];
      CHECK(std::abs(frac - 0.25) <= 0.05);
    }
  }
}

TEST_CASE("invalid specs are config errors") {
  auto spec = small_spec();
  spec.counts[3] = 0;
  CHECK_THROWS_AS(make_rule(spec, 1), ConfigError);
  spec = small_spec();
  spec.counts.pop_back();
  CHECK_THROWS_AS(validate(spec), ConfigError);
  spec = small_spec();
  spec.split_ratio = 1.0;
  CHECK_THROWS_AS(validate(spec), ConfigError);
}

TEST_CASE("rule sidecar round-trips") {
  const auto spec = small_spec();
  const auto rule = make_rule(spec, 12);
  const auto path = std::filesystem::temp_directory_path() / "advgrpo_rule.json";
  write_rule(path, rule);
  const auto back = read_rule(path);
  CHECK(back.weights == rule.weights);
  CHECK(back.biases == rule.biases);
  CHECK(back.class_means == rule.class_means);
  CHECK(back.evidence == rule.evidence);
  std::filesystem::remove(path);
}

TEST_CASE("default task is learnable by a direct logistic fit") {
  // The rule is linear within a modality, so fit one softmax regression on
  // (standardized image, question one-hot) per modality.
  TaskSpec spec;
  const auto rule = make_rule(spec, 42);
  const auto data = gen_dataset(rule, spec, 42);
  const int d = spec.d, k = spec.choices, f = spec.d + spec.questions + 1;

  int correct = 0, total = 0;
  for (int m = 0; m < spec.modalities; ++m) {
    std::vector<const Sample*> train, test;
    for (const auto& s : data.train.samples) if (s.modality == m) train.push_back(&s);
    for (const auto& s : data.test.samples) if (s.modality == m) test.push_back(&s);
    const double n = static_cast<double>(train.size());
    std::vector<double> mu(d, 0.0), sd(d, 0.0);
    for (const auto* s : train)
      for (int j = 0; j < d; ++j) mu[j] += s->image[j] / n;
    for (const auto* s : train)
      for (int j = 0; j < d; ++j) sd[j] += (s->image[j] - mu[j]) * (s->image[j] - mu[j]) / n;
    auto features = [&](const Sample& s) {
      std::vector<double> x(f, 0.0);
      for (int j = 0; j < d; ++j) x[j] = (s.image[j] - mu[j]) / std::sqrt(sd[j]);
      x[d + s.question] = 1.0;
      x[f - 1] = 1.0;
      return x;
    };
    auto scores = [&](const std::vector<double>& w, const std::vector<double>& x) {
      std::vector<double> z(k, 0.0);
      for (int a = 0; a < k; ++a)
        for (int j = 0; j < f; ++j) z[a] += w[a * f + j] * x[j];
      return z;
    };

    // Full-batch gradient descent on the cross-entropy.
    std::vector<double> w(static_cast<std::size_t>(k * f), 0.0);
    for (int epoch = 0; epoch < 300; ++epoch) {
      std::vector<double> g(w.size(), 0.0);
      for (const auto* s : train) {
        const auto x = features(*s);
        auto z = scores(w, x);
        const double top = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (double& v : z) sum += (v = std::exp(v - top));
        for (int a = 0; a < k; ++a) {
          const double r = z[a] / sum - (a == s->truth ? 1.0 : 0.0);
          for (int j = 0; j < f; ++j) g[a * f + j] += r * x[j] / n;
        }
      }
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 1.0 * g[i];
    }
    for (const auto* s : test) {
      const auto z = scores(w, features(*s));
      correct += std::max_element(z.begin(), z.end()) - z.begin() == s->truth;
      ++total;
    }
  }
  CHECK(static_cast<double>(correct) / total >= 0.95);
}
