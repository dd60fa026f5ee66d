#include "advgrpo/core.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "advgrpo/errors.hpp"

namespace advgrpo {

namespace {

constexpr std::string_view kThinkOpen = "<think>";
constexpr std::string_view kThinkClose = "</think>";
constexpr std::string_view kAnswerOpen = "<answer>";
constexpr std::string_view kAnswerClose = "</answer>";

constexpr std::array<std::string_view, 32> kFindings = {
    "lesion",   "irregular", "mass",      "opacity",  "nodule",     "calcified", "margin",   "edema",
    "effusion", "atrophy",   "fracture",  "cyst",     "enhancing",  "diffuse",   "focal",    "benign",
    "malignant", "vascular", "hypodense", "hyperdense", "pigmented", "drusen",   "thickened", "fluid",
    "stenosis", "infiltrate", "necrosis", "symmetric", "asymmetric", "normal",   "border",   "texture"};

bool valid_word(std::string_view w) {
  if (w.empty()) return false;
  return std::none_of(w.begin(), w.end(), [](char c) {
    return c == '<' || c == '>' || c == ' ' || c == '\t' || c == '\n' || c == '\r';
  });
}

}  // namespace

std::string_view split_name(Split split) { return split == Split::kTrain ? "train" : "test"; }

void validate_sample(const Sample& s, const SampleShape& shape) {
  if (static_cast<int>(s.image.size()) != shape.dim) {
    throw ConfigError("sample image has dimension " + std::to_string(s.image.size()) + ", expected " +
                      std::to_string(shape.dim));
  }
  for (double v : s.image) {
    if (!std::isfinite(v)) throw RangeError("sample image has a non-finite entry");
  }
  if (s.choices < 1 || s.choices > shape.choices) {
    throw RangeError("sample choice count " + std::to_string(s.choices) + " outside [1, " +
                     std::to_string(shape.choices) + "]");
  }
  if (s.truth < 0 || s.truth >= s.choices) throw RangeError("sample truth outside [0, k)");
  if (s.question < 0 || s.question >= shape.questions) throw RangeError("sample question id out of range");
  if (s.modality < 0 || s.modality >= shape.modalities) throw RangeError("sample modality id out of range");
  for (TokenId t : s.evidence) {
    if (t < 0 || t >= shape.vocab) throw RangeError("evidence token " + std::to_string(t) + " out of range");
  }
}

void validate_dataset(const Dataset& dataset, const SampleShape& shape) {
  for (const Sample& s : dataset.samples) validate_sample(s, shape);
  if (!dataset.samples.empty()) {
    const int k = dataset.samples.front().choices;
    for (const Sample& s : dataset.samples) {
      if (s.choices != k) throw ConfigError("dataset samples disagree on the number of choices");
    }
  }
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  std::vector<std::string> sorted = words_;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ConfigError("vocabulary words must be unique");
  }
  for (const auto& w : words_) {
    if (!valid_word(w)) throw ConfigError("invalid vocabulary word '" + w + "'");
  }
}

Vocabulary Vocabulary::standard(int size) {
  if (size < 1) throw ConfigError("vocabulary size must be >= 1");
  std::vector<std::string> words;
  words.reserve(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) {
    if (i < static_cast<int>(kFindings.size())) {
      words.emplace_back(kFindings[static_cast<std::size_t>(i)]);
    } else {
      words.push_back("tok" + std::to_string(i));
    }
  }
  return Vocabulary(std::move(words));
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id < 0 || id >= size()) throw RangeError("token id " + std::to_string(id) + " out of vocabulary range");
  return words_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view word) const {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (words_[i] == word) return static_cast<TokenId>(i);
  }
  return std::nullopt;
}

AnswerSet::AnswerSet(int choices) : choices_(choices) {
  if (choices < 1 || choices > 26) throw ConfigError("answer count must be in [1, 26]");
}

std::string AnswerSet::word(AnswerId id) const {
  if (id < 0 || id >= choices_) throw RangeError("answer id " + std::to_string(id) + " out of range");
  return std::string(1, static_cast<char>('A' + id));
}

std::optional<AnswerId> AnswerSet::find(std::string_view word) const {
  if (word.size() != 1) return std::nullopt;
  const int id = word[0] - 'A';
  if (id < 0 || id >= choices_) return std::nullopt;
  return id;
}

std::string serialize_output(const StructuredOutput& y, const Vocabulary& vocab, const AnswerSet& answers) {
  std::string out(kThinkOpen);
  for (std::size_t i = 0; i < y.trace.size(); ++i) {
    if (i > 0) out += ' ';
    out += vocab.word(y.trace[i]);
  }
  out += kThinkClose;
  out += kAnswerOpen;
  out += answers.word(y.answer);
  out += kAnswerClose;
  return out;
}

std::optional<StructuredOutput> try_parse_output(std::string_view text, const Vocabulary& vocab,
                                                 const AnswerSet& answers) {
  if (!text.starts_with(kThinkOpen)) return std::nullopt;
  text.remove_prefix(kThinkOpen.size());

  const auto think_end = text.find(kThinkClose);
  if (think_end == std::string_view::npos) return std::nullopt;
  const std::string_view body = text.substr(0, think_end);
  text.remove_prefix(think_end + kThinkClose.size());

  if (!text.starts_with(kAnswerOpen)) return std::nullopt;
  text.remove_prefix(kAnswerOpen.size());
  const auto answer_end = text.find(kAnswerClose);
  if (answer_end == std::string_view::npos) return std::nullopt;
  const std::string_view answer_word = text.substr(0, answer_end);
  if (!text.substr(answer_end + kAnswerClose.size()).empty()) return std::nullopt;

  StructuredOutput y;
  if (!body.empty()) {
    std::size_t pos = 0;
    while (true) {
      const auto next = body.find(' ', pos);
      const std::string_view word = body.substr(pos, next == std::string_view::npos ? next : next - pos);
      auto id = vocab.find(word);
      if (!id) return std::nullopt;
      y.trace.push_back(*id);
      if (next == std::string_view::npos) break;
      pos = next + 1;
    }
  }
  auto answer = answers.find(answer_word);
  if (!answer) return std::nullopt;
  y.answer = *answer;
  return y;
}

StructuredOutput parse_output(std::string_view text, const Vocabulary& vocab, const AnswerSet& answers) {
  auto parsed = try_parse_output(text, vocab, answers);
  if (!parsed) throw FormatError("output does not match <think>...</think><answer>...</answer>");
  return *std::move(parsed);
}

void write_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const Sample& s : dataset.samples) {
    nlohmann::ordered_json rec;
    rec["image"] = s.image;
    rec["question"] = s.question;
    rec["k"] = s.choices;
    rec["truth"] = s.truth;
    rec["modality"] = s.modality;
    rec["evidence"] = s.evidence;
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path, Split split) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Dataset ds;
  ds.split = split;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto rec = nlohmann::json::parse(line);
      Sample s;
      s.image = rec.at("image").get<std::vector<double>>();
      s.question = rec.at("question").get<int>();
      s.choices = rec.at("k").get<int>();
      s.truth = rec.at("truth").get<int>();
      s.modality = rec.at("modality").get<int>();
      s.evidence = rec.at("evidence").get<std::vector<int>>();
      std::sort(s.evidence.begin(), s.evidence.end());
      s.evidence.erase(std::unique(s.evidence.begin(), s.evidence.end()), s.evidence.end());
      ds.samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  ds.spec_hash = dataset_digest(ds.samples);
  return ds;
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  std::array<char, 17> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + 16, value, 16);
  std::string s(buf.data(), ptr);
  return std::string(16 - s.size(), '0') + s;
}

std::string format_double(double value) {
  std::array<char, 32> buf{};
  auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  return std::string(buf.data(), p);
}

std::string dataset_digest(std::span<const Sample> samples) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::array<char, 32> buf{};
  auto feed = [&](std::string_view s) { h = fnv1a64(s, h); };
  for (const Sample& s : samples) {
    for (double v : s.image) {
      auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
      feed(std::string_view(buf.data(), static_cast<std::size_t>(p - buf.data())));
      feed(",");
    }
    feed(std::to_string(s.question) + "|" + std::to_string(s.choices) + "|" + std::to_string(s.truth) + "|" +
         std::to_string(s.modality) + "|");
    for (TokenId t : s.evidence) feed(std::to_string(t) + ",");
    feed(";");
  }
  return hex64(h);
}

}  // namespace advgrpo
