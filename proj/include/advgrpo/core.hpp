#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace advgrpo {

using TokenId = int;
using AnswerId = int;

// A sampled or target response: reasoning trace plus final answer.
struct StructuredOutput {
  std::vector<TokenId> trace;
  AnswerId answer = 0;

  friend bool operator==(const StructuredOutput&, const StructuredOutput&) = default;
};

// One VQA instance. `evidence` is kept sorted and duplicate-free.
struct Sample {
  std::vector<double> image;
  int question = 0;
  int choices = 1;
  AnswerId truth = 0;
  int modality = 0;
  std::vector<TokenId> evidence;

  friend bool operator==(const Sample&, const Sample&) = default;
};

enum class Split { kTrain, kTest };

std::string_view split_name(Split split);

struct Dataset {
  std::vector<Sample> samples;
  Split split = Split::kTrain;
  std::string spec_hash;
};

// Shape limits a sample must respect; taken from the task or policy config.
struct SampleShape {
  int dim = 0;
  int choices = 0;
  int vocab = 0;
  int modalities = 0;
  int questions = 0;
};

// Throws RangeError/ConfigError describing the first violated invariant.
void validate_sample(const Sample& sample, const SampleShape& shape);

// Every sample must satisfy `shape`; all share image dimension and choice count.
void validate_dataset(const Dataset& dataset, const SampleShape& shape);

// Closed token vocabulary. Words contain no whitespace or angle brackets.
class Vocabulary {
 public:
  explicit Vocabulary(std::vector<std::string> words);

  // A deterministic vocabulary of `size` words: a fixed list of clinical
  // findings, then "tok<N>" once that list is exhausted.
  static Vocabulary standard(int size);

  int size() const { return static_cast<int>(words_.size()); }
  const std::string& word(TokenId id) const;
  std::optional<TokenId> find(std::string_view word) const;

 private:
  std::vector<std::string> words_;
};

// Answer words "A", "B", ... for `choices` <= 26 answers.
class AnswerSet {
 public:
  explicit AnswerSet(int choices);

  int size() const { return choices_; }
  std::string word(AnswerId id) const;
  std::optional<AnswerId> find(std::string_view word) const;

 private:
  int choices_;
};

// "<think>w1 w2 ...</think><answer>X</answer>"
std::string serialize_output(const StructuredOutput& y, const Vocabulary& vocab, const AnswerSet& answers);

// Inverse of serialize_output. Throws FormatError on anything that is not
// exactly one think segment followed by one answer segment.
StructuredOutput parse_output(std::string_view text, const Vocabulary& vocab, const AnswerSet& answers);

// Same grammar; returns nullopt instead of throwing.
std::optional<StructuredOutput> try_parse_output(std::string_view text, const Vocabulary& vocab,
                                                 const AnswerSet& answers);

// Line-delimited JSON, one sample per line, fields
// image/question/k/truth/modality/evidence.
void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& path, Split split);

// FNV-1a over a byte string; used for config, data and checkpoint digests.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

// Shortest decimal that parses back to the same double.
std::string format_double(double value);

// Digest of the dataset contents (independent of split label).
std::string dataset_digest(std::span<const Sample> samples);

}  // namespace advgrpo
