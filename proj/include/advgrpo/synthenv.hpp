#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "advgrpo/core.hpp"

namespace advgrpo {

// Planted-rule task family. The image is split into `d - fragile_dims`
// robust coordinates (class means `class_radius` apart, noise `noise_sigma`)
// and `fragile_dims` trailing coordinates that carry a low-amplitude class
// code with small noise. The fragile code is almost perfectly predictive but
// can be rewritten by an L-infinity perturbation larger than
// `fragile_amplitude`; the robust coordinates cannot.
struct TaskSpec {
  int d = 16;
  int choices = 4;
  int vocab = 32;
  int trace_len = 6;
  int modalities = 8;
  int questions = 4;
  double margin = 1.0;
  double noise_sigma = 0.3;
  std::vector<int> counts = std::vector<int>(8, 400);
  double split_ratio = 0.8;

  int fragile_dims = 8;
  double fragile_amplitude = 0.006;
  double fragile_sigma = 0.002;
  double class_radius = 1.4;
  double modality_spread = 1.0;
  double robust_weight = 0.25;
  double bias_scale = 0.1;
  int evidence_size = 6;

  SampleShape shape() const { return {d, choices, vocab, modalities, questions}; }
};

// Throws ConfigError on an invalid spec.
void validate(const TaskSpec& spec);

// Canonical text form used for hashing and provenance.
std::string canonical_text(const TaskSpec& spec);

struct PlantedRule {
  int d = 0;
  int choices = 0;
  int modalities = 0;
  int questions = 0;
  // [modality][answer * d + j]
  std::vector<std::vector<double>> weights;
  // [modality][question * choices + answer]
  std::vector<std::vector<double>> biases;
  // [modality][answer * d + j]; noiseless class-conditional image
  std::vector<std::vector<double>> class_means;
  // [(modality * questions + question) * choices + answer] -> sorted token set
  std::vector<std::vector<TokenId>> evidence;

  const std::vector<TokenId>& evidence_for(int modality, int question, AnswerId answer) const;
  std::span<const double> mean(int modality, AnswerId answer) const;
};

// Deterministic in (spec, seed). Rescales the rule so every noiseless class
// mean scores its own answer at least `spec.margin` above any other; throws
// ConfigError when the class means are not separable by the construction.
PlantedRule make_rule(const TaskSpec& spec, std::uint64_t seed);

// argmax_a W_m[a] . image + b[m, q, a]; ties go to the lowest id.
AnswerId oracle_answer(const PlantedRule& rule, std::span<const double> image, int question, int modality);

// Score gap of `answer` over the best competitor (infinity when choices == 1).
double oracle_margin(const PlantedRule& rule, std::span<const double> image, int question, int modality,
                     AnswerId answer);

struct SplitDatasets {
  Dataset train;
  Dataset test;
};

// Stratified per-modality split; the first round(n * split_ratio) samples of
// each modality go to train.
SplitDatasets gen_dataset(const PlantedRule& rule, const TaskSpec& spec, std::uint64_t seed);

void write_rule(const std::filesystem::path& path, const PlantedRule& rule);
PlantedRule read_rule(const std::filesystem::path& path);

}  // namespace advgrpo
