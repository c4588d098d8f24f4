#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "advcl/common.hpp"
#include "advcl/subword.hpp"

namespace advcl {

// Half-open range of subword positions belonging to one word.
struct Span {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
  bool operator==(const Span&) const = default;
};

// One text instance: words, their subword ids and the word -> subword alignment.
// Subword positions exclude the [CLS] marker the encoder prepends.
struct TokenizedExample {
  std::string id;
  std::vector<std::string> words;
  std::vector<int> subwords;
  std::vector<Span> spans;
  std::optional<int> label;

  int num_words() const { return static_cast<int>(words.size()); }
  int num_subwords() const { return static_cast<int>(subwords.size()); }
};

enum class Split { kTrain, kTest };
std::string_view split_name(Split s);
Split parse_split(std::string_view s);

struct Corpus {
  std::string dataset_id;
  Split split = Split::kTrain;
  int num_classes = 0;
  std::shared_ptr<const SubwordModel> subwords;
  std::vector<TokenizedExample> examples;

  std::size_t size() const { return examples.size(); }
};

// Whitespace + punctuation word splitting; each ASCII punctuation character is
// its own word.
std::vector<std::string> split_words(std::string_view text);

// Tokenizes `words` into subwords. Trailing words that would push the subword
// count past `max_subwords` are dropped whole so spans stay aligned.
TokenizedExample tokenize_words(const SubwordModel& model, std::string id,
                                std::vector<std::string> words, std::optional<int> label,
                                int max_subwords);

// Returns a copy of `example` with word `index` replaced and spans realigned.
TokenizedExample replace_word(const TokenizedExample& example, const SubwordModel& model,
                              int index, const std::string& word, int max_subwords);

// Checks the span invariants; throws ContractError on violation.
void validate_example(const TokenizedExample& example);

// Trains a subword model on the words of one or more corpora.
// `extra_words` are counted as if they occurred `extra_count` times each.
std::shared_ptr<const SubwordModel> train_subwords(std::span<const Corpus* const> corpora,
                                                   int vocab_limit,
                                                   const std::vector<std::string>& extra_words = {},
                                                   int extra_count = 3);

// Re-tokenizes every example with `model`.
void retokenize(Corpus& corpus, std::shared_ptr<const SubwordModel> model, int max_subwords);

struct LoadOptions {
  std::shared_ptr<const SubwordModel> subwords;  // trained on the file when null
  int vocab_limit = 1000;
  int max_len = 128;      // encoder positions, including [CLS]
  std::size_t limit = 0;  // 0 = no limit
  std::string dataset_id;  // defaults to the file stem
  Split split = Split::kTrain;
};

// Formats: "tsv" (`#classes=N` header, then `label<TAB>text` per line) and
// "jsonl" (the serialized corpus format below).
Corpus load_corpus(const std::string& path, std::string_view format, const LoadOptions& opts = {});

// Versioned line-JSON: a header object, then one object per example.
std::string serialize_corpus(const Corpus& corpus);
Corpus deserialize_corpus(std::string_view text, const std::string& origin = "<memory>");

// Writes the tsv format (text = words joined by single spaces).
std::string to_tsv(const Corpus& corpus);

// Mean of the subword gradient rows over each word's span.
// `subword_grads` has one row per subword (no [CLS] row).
Mat align_gradients(const TokenizedExample& example, const Mat& subword_grads);

}  // namespace advcl
