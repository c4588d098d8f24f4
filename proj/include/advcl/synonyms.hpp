#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "advcl/common.hpp"

namespace advcl {

// Word vectors in the counter-fitted text format (`word v1 ... vdim`), stored
// unit-normalized and keyed by the case-folded word.
class SynonymEmbeddingTable {
 public:
  SynonymEmbeddingTable() = default;

  static SynonymEmbeddingTable load(const std::string& path);
  static SynonymEmbeddingTable parse(std::string_view text, const std::string& origin = "<memory>");
  static SynonymEmbeddingTable from_entries(
      const std::vector<std::pair<std::string, std::vector<double>>>& entries);

  // Text form; vectors are written already normalized.
  std::string serialize() const;

  bool contains(std::string_view word) const;
  // Unit row for `word` or nullopt.
  std::optional<Eigen::Ref<const RowVec>> vector(std::string_view word) const;
  std::optional<double> cosine(std::string_view a, std::string_view b) const;

  // Up to `k` table words ordered by descending cosine to `word` (ties by
  // word), excluding `word` itself. Empty when `word` is not in the table.
  std::vector<std::pair<std::string, double>> nearest(std::string_view word, int k) const;

  int dim() const { return static_cast<int>(vectors_.cols()); }
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::optional<int> index_of(std::string_view word) const;

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
  Mat vectors_;
};

}  // namespace advcl
