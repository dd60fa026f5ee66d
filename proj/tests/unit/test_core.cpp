#include <doctest.h>

#include <filesystem>
#include <limits>
#include <fstream>

#include "advgrpo/core.hpp"
#include "advgrpo/errors.hpp"
#include "advgrpo/rng.hpp"

using namespace advgrpo;

namespace {

Vocabulary test_vocab() { return Vocabulary({"lesion", "irregular", "abc", "mass"}); }

}  // namespace

TEST_CASE("serialize joins trace words inside think tags") {
  const auto vocab = test_vocab();
  const AnswerSet answers(4);
  CHECK(serialize_output({{0, 1}, 1}, vocab, answers) == "<think>lesion irregular</think><answer>B</answer>");
  CHECK(serialize_output({{}, 0}, vocab, answers) == "<think></think><answer>A</answer>");
}

TEST_CASE("serialize rejects ids outside the vocabulary or answer set") {
  const auto vocab = test_vocab();
  const AnswerSet answers(2);
  CHECK_THROWS_AS(serialize_output({{7}, 0}, vocab, answers), RangeError);
  CHECK_THROWS_AS(serialize_output({{0}, 2}, vocab, answers), RangeError);
  CHECK_THROWS_AS(serialize_output({{-1}, 0}, vocab, answers), RangeError);
}

TEST_CASE("parse accepts the exact grammar") {
  const auto vocab = test_vocab();
  const AnswerSet answers(4);
  const auto y = parse_output("<think>abc</think><answer>B</answer>", vocab, answers);
  CHECK(y.trace == std::vector<TokenId>{2});
  CHECK(y.answer == 1);
  const auto empty = parse_output("<think></think><answer>A</answer>", vocab, answers);
  CHECK(empty.trace.empty());
  CHECK(empty.answer == 0);
}

TEST_CASE("parse rejects malformed text") {
  const auto vocab = test_vocab();
  const AnswerSet answers(4);
  const char* bad[] = {
      "<think>abc<answer>B</answer>",
      "<think>abc</think>",
      "<answer>B</answer><think>abc</think>",
      "<think>abc</think><answer>B</answer><answer>B</answer>",
      "<think>abc</think><answer>B</answer> ",
      " <think>abc</think><answer>B</answer>",
      "<think>abc</think><answer>E</answer>",
      "<think>abc</think><answer></answer>",
      "<think>unknown</think><answer>A</answer>",
      "<think>abc  mass</think><answer>A</answer>",
      "<think> abc</think><answer>A</answer>",
      "<think>abc</think> <answer>A</answer>",
      "",
  };
  for (const char* text : bad) {
    INFO(text);
    CHECK_THROWS_AS(parse_output(text, vocab, answers), FormatError);
    CHECK_FALSE(try_parse_output(text, vocab, answers).has_value());
  }
}

TEST_CASE("parse inverts serialize on random outputs") {
  const auto vocab = Vocabulary::standard(32);
  const AnswerSet answers(4);
  Rng rng(2024);
  for (int i = 0; i < 1000; ++i) {
    StructuredOutput y;
    const auto len = rng.below(7);
    for (std::size_t t = 0; t < len; ++t) y.trace.push_back(static_cast<TokenId>(rng.below(32)));
    y.answer = static_cast<AnswerId>(rng.below(4));
    CHECK(parse_output(serialize_output(y, vocab, answers), vocab, answers) == y);
  }
}

TEST_CASE("standard vocabulary is deterministic and extends past the word list") {
  const auto v = Vocabulary::standard(40);
  CHECK(v.size() == 40);
  CHECK(v.word(0) == "lesion");
  CHECK(v.word(35) == "tok35");
  CHECK(v.find("tok35") == 35);
  CHECK_THROWS_AS(Vocabulary({"a", "a"}), ConfigError);
  CHECK_THROWS_AS(Vocabulary({"a b"}), ConfigError);
}

TEST_CASE("answer words are letters truncated to k") {
  const AnswerSet answers(3);
  CHECK(answers.word(2) == "C");
  CHECK_FALSE(answers.find("D").has_value());
  CHECK_THROWS_AS(AnswerSet(27), ConfigError);
}

TEST_CASE("sample validation") {
  const SampleShape shape{3, 4, 8, 2, 2};
  Sample s{{0.1, 0.2, 0.3}, 1, 4, 2, 1, {0, 7}};
  CHECK_NOTHROW(validate_sample(s, shape));
  auto bad = s;
  bad.truth = 4;
  CHECK_THROWS_AS(validate_sample(bad, shape), RangeError);
  bad = s;
  bad.evidence = {8};
  CHECK_THROWS_AS(validate_sample(bad, shape), RangeError);
  bad = s;
  bad.image[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(validate_sample(bad, shape), RangeError);
  bad = s;
  bad.image.pop_back();
  CHECK_THROWS_AS(validate_sample(bad, shape), ConfigError);
}

TEST_CASE("dataset files round-trip through line-delimited JSON") {
  Dataset ds;
  ds.samples.push_back({{0.1, -2.5e-7, 3.0}, 1, 4, 2, 0, {1, 5}});
  ds.samples.push_back({{1.0 / 3.0, 0.0, -0.0}, 0, 4, 0, 1, {}});
  const auto path = std::filesystem::temp_directory_path() / "advgrpo_core_ds.jsonl";
  write_dataset(path, ds);
  const auto back = read_dataset(path, Split::kTest);
  REQUIRE(back.samples.size() == 2);
  CHECK(back.samples[0] == ds.samples[0]);
  CHECK(back.samples[1].image[0] == ds.samples[1].image[0]);
  CHECK(back.split == Split::kTest);
  CHECK(back.spec_hash == dataset_digest(ds.samples));
  std::filesystem::remove(path);
}

TEST_CASE("dataset reader reports missing fields as config errors") {
  const auto path = std::filesystem::temp_directory_path() / "advgrpo_core_bad.jsonl";
  {
    std::ofstream out(path);
    out << R"({"image":[1.0],"question":0,"k":2,"truth":0,"modality":0})" << '\n';
  }
  CHECK_THROWS_AS(read_dataset(path, Split::kTrain), ConfigError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_dataset(path, Split::kTrain), IoError);
}

TEST_CASE("hex64 pads to sixteen digits") {
  CHECK(hex64(0x1f) == "000000000000001f");
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
}
