#include "advcl/synonyms.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace advcl {

SynonymEmbeddingTable SynonymEmbeddingTable::load(const std::string& path) {
  return parse(read_file(path), path);
}

SynonymEmbeddingTable SynonymEmbeddingTable::parse(std::string_view text, const std::string& origin) {
  std::vector<std::pair<std::string, std::vector<double>>> entries;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  int dim = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string word;
    fields >> word;
    std::vector<double> v;
    std::string tok;
    while (fields >> tok) {
      try {
        std::size_t used = 0;
        v.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw LoadError(origin, lineno, "bad vector component '" + tok + "'");
      }
    }
    if (v.empty()) throw LoadError(origin, lineno, "word without vector");
    if (dim < 0) dim = static_cast<int>(v.size());
    if (static_cast<int>(v.size()) != dim) {
      throw LoadError(origin, lineno, "dimension " + std::to_string(v.size()) + " != " + std::to_string(dim));
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    if (!(norm > 0.0) || !std::isfinite(norm)) throw LoadError(origin, lineno, "zero or non-finite vector");
    entries.emplace_back(std::move(word), std::move(v));
  }
  return from_entries(entries);
}

SynonymEmbeddingTable SynonymEmbeddingTable::from_entries(
    const std::vector<std::pair<std::string, std::vector<double>>>& entries) {
  SynonymEmbeddingTable t;
  const int dim = entries.empty() ? 0 : static_cast<int>(entries.front().second.size());
  std::vector<const std::vector<double>*> kept;
  for (const auto& [word, v] : entries) {
    if (static_cast<int>(v.size()) != dim) throw ContractError("synonym table: inconsistent dimension");
    std::string key = to_lower(word);
    if (t.index_.contains(key)) continue;  // first occurrence wins
    t.index_.emplace(key, static_cast<int>(t.words_.size()));
    t.words_.push_back(std::move(key));
    kept.push_back(&v);
  }
  t.vectors_.resize(static_cast<Eigen::Index>(kept.size()), dim);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    for (int d = 0; d < dim; ++d) t.vectors_(static_cast<Eigen::Index>(i), d) = (*kept[i])[static_cast<std::size_t>(d)];
    const double n = t.vectors_.row(static_cast<Eigen::Index>(i)).norm();
    if (!(n > 0.0)) throw ContractError("synonym table: zero vector for " + t.words_[i]);
    t.vectors_.row(static_cast<Eigen::Index>(i)) /= n;
  }
  return t;
}

std::string SynonymEmbeddingTable::serialize() const {
  std::ostringstream out;
  out << std::setprecision(17);
  for (std::size_t i = 0; i < words_.size(); ++i) {
    out << words_[i];
    for (int d = 0; d < dim(); ++d) out << ' ' << vectors_(static_cast<Eigen::Index>(i), d);
    out << '\n';
  }
  return out.str();
}

std::optional<int> SynonymEmbeddingTable::index_of(std::string_view word) const {
  auto it = index_.find(to_lower(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

bool SynonymEmbeddingTable::contains(std::string_view word) const { return index_of(word).has_value(); }

std::optional<Eigen::Ref<const RowVec>> SynonymEmbeddingTable::vector(std::string_view word) const {
  auto i = index_of(word);
  if (!i) return std::nullopt;
  return Eigen::Ref<const RowVec>(vectors_.row(*i));
}

std::optional<double> SynonymEmbeddingTable::cosine(std::string_view a, std::string_view b) const {
  auto ia = index_of(a);
  auto ib = index_of(b);
  if (!ia || !ib) return std::nullopt;
  return vectors_.row(*ia).dot(vectors_.row(*ib));
}

std::vector<std::pair<std::string, double>> SynonymEmbeddingTable::nearest(std::string_view word,
                                                                           int k) const {
  std::vector<std::pair<std::string, double>> out;
  auto i = index_of(word);
  if (!i || k <= 0) return out;
  const Vec sims = vectors_ * vectors_.row(*i).transpose();
  std::vector<int> order;
  order.reserve(words_.size());
  for (int j = 0; j < size(); ++j) {
    if (j != *i) order.push_back(j);
  }
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(k), order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    [&](int a, int b) {
                      if (sims(a) != sims(b)) return sims(a) > sims(b);
                      return words_[static_cast<std::size_t>(a)] < words_[static_cast<std::size_t>(b)];
                    });
  for (std::size_t n = 0; n < take; ++n) {
    out.emplace_back(words_[static_cast<std::size_t>(order[n])], sims(order[n]));
  }
  return out;
}

}  // namespace advcl
