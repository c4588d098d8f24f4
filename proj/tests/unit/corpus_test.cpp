#include <gtest/gtest.h>

#include "advcl/corpus.hpp"
#include "test_util.hpp"

namespace advcl {
namespace {

using testing::make_world;

TEST(SplitWords, PunctuationIsItsOwnWord) {
  const auto w = split_words("Hello, world!  it's");
  const std::vector<std::string> expected = {"Hello", ",", "world", "!", "it", "'", "s"};
  EXPECT_EQ(w, expected);
}

TEST(Tokenize, SpansCoverSubwordsContiguously) {
  auto w = make_world();
  for (const auto& ex : w.corpus.examples) {
    ASSERT_EQ(ex.spans.size(), ex.words.size());
    int pos = 0;
    for (std::size_t i = 0; i < ex.spans.size(); ++i) {
      EXPECT_EQ(ex.spans[i].begin, pos);
      EXPECT_GT(ex.spans[i].size(), 0);
      const auto pieces = w.subwords->encode_word(ex.words[i]);
      EXPECT_EQ(std::vector<int>(ex.subwords.begin() + ex.spans[i].begin, ex.subwords.begin() + ex.spans[i].end),
                pieces);
      pos = ex.spans[i].end;
    }
    EXPECT_EQ(pos, ex.num_subwords());
    EXPECT_NO_THROW(validate_example(ex));
  }
}

TEST(Tokenize, OverlongInputDropsWholeWords) {
  auto w = make_world();
  std::vector<std::string> words(50, "qzxv");
  const auto ex = tokenize_words(*w.subwords, "long", words, 0, 20);
  EXPECT_LE(ex.num_subwords(), 20);
  EXPECT_LT(ex.num_words(), 50);
  EXPECT_NO_THROW(validate_example(ex));
}

TEST(ReplaceWord, RealignsLaterSpans) {
  auto w = make_world();
  const auto& ex = w.corpus.examples[0];
  const auto out = replace_word(ex, *w.subwords, 1, "zzqqxxyyww", 64);
  EXPECT_EQ(out.words[1], "zzqqxxyyww");
  EXPECT_EQ(out.num_words(), ex.num_words());
  EXPECT_NO_THROW(validate_example(out));
  // Words other than the replaced one keep their pieces.
  for (int i = 0; i < ex.num_words(); ++i) {
    if (i == 1) continue;
    const auto& a = ex.spans[static_cast<std::size_t>(i)];
    const auto& b = out.spans[static_cast<std::size_t>(i)];
    EXPECT_EQ(std::vector<int>(ex.subwords.begin() + a.begin, ex.subwords.begin() + a.end),
              std::vector<int>(out.subwords.begin() + b.begin, out.subwords.begin() + b.end));
  }
}

TEST(ValidateExample, RejectsBrokenSpans) {
  auto w = make_world();
  auto ex = w.corpus.examples[0];
  ex.spans[0].end += 1;
  EXPECT_THROW(validate_example(ex), ContractError);
}

TEST(AlignGradients, MeanOverSpanRows) {
  TokenizedExample ex;
  ex.words = {"a", "bc", "d"};
  ex.subwords = {10, 11, 12, 13};
  ex.spans = {{0, 1}, {1, 3}, {3, 4}};
  Mat g(4, 2);
  g << 1, 2, 3, 4, 5, 8, 7, 9;
  const Mat out = align_gradients(ex, g);
  ASSERT_EQ(out.rows(), 3);
  EXPECT_DOUBLE_EQ(out(0, 0), 1);
  EXPECT_DOUBLE_EQ(out(1, 0), 4);
  EXPECT_DOUBLE_EQ(out(1, 1), 6);
  EXPECT_DOUBLE_EQ(out(2, 1), 9);
}

TEST(CorpusSerialization, RoundTrip) {
  auto w = make_world();
  const std::string text = serialize_corpus(w.corpus);
  const Corpus back = deserialize_corpus(text);
  EXPECT_EQ(back.dataset_id, w.corpus.dataset_id);
  EXPECT_EQ(back.num_classes, w.corpus.num_classes);
  ASSERT_EQ(back.size(), w.corpus.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back.examples[i].words, w.corpus.examples[i].words);
    EXPECT_EQ(back.examples[i].subwords, w.corpus.examples[i].subwords);
    EXPECT_EQ(back.examples[i].label, w.corpus.examples[i].label);
  }
  EXPECT_EQ(serialize_corpus(back), text);
}

TEST(CorpusLoad, TsvRequiresClassHeader) {
  const auto dir = testing::scratch_dir("tsv");
  const auto path = (dir / "bad.tsv").string();
  write_file(path, "0\thello world\n");
  EXPECT_THROW(load_corpus(path, "tsv"), LoadError);
  write_file(path, "#classes=2\n0\thello world\n1\tgood bye\n");
  const Corpus c = load_corpus(path, "tsv");
  EXPECT_EQ(c.size(), 2u);
  EXPECT_EQ(c.num_classes, 2);
  EXPECT_EQ(c.dataset_id, "bad");
}

TEST(Synth, DeterministicAndBalanced) {
  auto a = make_world(40, 9);
  auto b = make_world(40, 9);
  EXPECT_EQ(serialize_corpus(a.corpus), serialize_corpus(b.corpus));
  int ones = 0;
  for (const auto& ex : a.corpus.examples) ones += *ex.label;
  EXPECT_EQ(ones, 20);
}

}  // namespace
}  // namespace advcl
