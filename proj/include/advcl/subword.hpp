#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace advcl {

// Byte-pair subword model with WordPiece-style "##" continuation pieces.
// Trained on the corpus it tokenizes; case-insensitive.
class SubwordModel {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kMask = 4;
  static constexpr int kNumSpecial = 5;
  static constexpr int kMaxVocab = 8000;

  // `word_counts` maps (any-case) words to frequencies. Merges stop when the
  // vocabulary reaches `vocab_limit` or no pair occurs at least twice.
  static SubwordModel train(const std::map<std::string, std::int64_t>& word_counts,
                            int vocab_limit = 1000);

  std::vector<int> encode_word(std::string_view word) const;

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::optional<int> id_of(std::string_view token) const;
  // True for pieces that can start a word (no "##" prefix) and are not special.
  bool is_word_initial(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  // Stable identifier derived from the vocabulary and merge table.
  std::uint64_t fingerprint() const { return fingerprint_; }

  nlohmann::json to_json() const;
  static SubwordModel from_json(const nlohmann::json& j);

 private:
  SubwordModel() = default;
  void finalize();
  std::vector<int> encode_uncached(const std::string& lowered) const;

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::string, int> merge_rank_;
  std::unordered_map<std::string, std::vector<int>> cache_;
  std::uint64_t fingerprint_ = 0;
};

}  // namespace advcl
