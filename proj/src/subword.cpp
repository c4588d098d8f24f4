#include "advcl/subword.hpp"

#include <algorithm>
#include <limits>
#include <set>

#include "advcl/common.hpp"

namespace advcl {
namespace {

constexpr const char* kSpecials[] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

std::string pair_key(const std::string& a, const std::string& b) {
  std::string k = a;
  k.push_back('\x1f');
  k += b;
  return k;
}

std::string merged(const std::string& left, const std::string& right) {
  return left + right.substr(2);  // right is always a "##" continuation
}

std::vector<std::string> initial_symbols(const std::string& word) {
  std::vector<std::string> out;
  out.reserve(word.size());
  for (std::size_t i = 0; i < word.size(); ++i) {
    out.push_back(i == 0 ? std::string(1, word[i]) : "##" + std::string(1, word[i]));
  }
  return out;
}

}  // namespace

SubwordModel SubwordModel::train(const std::map<std::string, std::int64_t>& word_counts,
                                 int vocab_limit) {
  if (vocab_limit <= kNumSpecial || vocab_limit > kMaxVocab) {
    throw ConfigError("subword vocab limit must be in (" + std::to_string(kNumSpecial) + ", " +
                      std::to_string(kMaxVocab) + "]");
  }
  std::map<std::string, std::int64_t> lowered;
  for (const auto& [w, c] : word_counts) {
    if (!w.empty()) lowered[to_lower(w)] += c;
  }

  SubwordModel model;
  for (const char* s : kSpecials) model.tokens_.emplace_back(s);
  std::set<std::string> base;
  std::vector<std::pair<std::vector<std::string>, std::int64_t>> words;
  words.reserve(lowered.size());
  for (const auto& [w, c] : lowered) {
    auto syms = initial_symbols(w);
    base.insert(syms.begin(), syms.end());
    words.emplace_back(std::move(syms), c);
  }
  model.tokens_.insert(model.tokens_.end(), base.begin(), base.end());

  while (static_cast<int>(model.tokens_.size()) < vocab_limit) {
    std::map<std::pair<std::string, std::string>, std::int64_t> counts;
    for (const auto& [syms, c] : words) {
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) counts[{syms[i], syms[i + 1]}] += c;
    }
    // std::map iteration order makes the lexicographically smallest pair win ties.
    const std::pair<std::string, std::string>* best = nullptr;
    std::int64_t best_count = 1;
    for (const auto& [p, c] : counts) {
      if (c > best_count) {
        best = &p;
        best_count = c;
      }
    }
    if (best == nullptr) break;
    const auto [left, right] = *best;
    const std::string joined = merged(left, right);
    model.merges_.emplace_back(left, right);
    if (std::find(model.tokens_.begin(), model.tokens_.end(), joined) == model.tokens_.end()) {
      model.tokens_.push_back(joined);
    }
    for (auto& [syms, c] : words) {
      std::vector<std::string> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
          next.push_back(joined);
          ++i;
        } else {
          next.push_back(syms[i]);
        }
      }
      syms = std::move(next);
    }
  }
  model.finalize();
  for (const auto& [w, c] : lowered) model.cache_[w] = model.encode_uncached(w);
  return model;
}

void SubwordModel::finalize() {
  index_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
  merge_rank_.clear();
  std::string canon;
  for (std::size_t i = 0; i < merges_.size(); ++i) {
    merge_rank_.emplace(pair_key(merges_[i].first, merges_[i].second), static_cast<int>(i));
    canon += merges_[i].first + '\x1f' + merges_[i].second + '\x1e';
  }
  for (const auto& t : tokens_) canon += t + '\x1d';
  fingerprint_ = fnv1a64(canon);
}

std::vector<int> SubwordModel::encode_uncached(const std::string& lowered) const {
  auto syms = initial_symbols(lowered);
  for (const auto& s : syms) {
    if (!index_.contains(s)) return {kUnk};
  }
  while (syms.size() > 1) {
    int best_rank = std::numeric_limits<int>::max();
    std::size_t best_at = 0;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      auto it = merge_rank_.find(pair_key(syms[i], syms[i + 1]));
      if (it != merge_rank_.end() && it->second < best_rank) {
        best_rank = it->second;
        best_at = i;
      }
    }
    if (best_rank == std::numeric_limits<int>::max()) break;
    syms[best_at] = merged(syms[best_at], syms[best_at + 1]);
    syms.erase(syms.begin() + static_cast<std::ptrdiff_t>(best_at) + 1);
  }
  std::vector<int> ids;
  ids.reserve(syms.size());
  for (const auto& s : syms) ids.push_back(index_.at(s));
  return ids;
}

std::vector<int> SubwordModel::encode_word(std::string_view word) const {
  if (word.empty()) throw ContractError("cannot encode an empty word");
  const std::string lowered = to_lower(word);
  if (auto it = cache_.find(lowered); it != cache_.end()) return it->second;
  return encode_uncached(lowered);
}

std::optional<int> SubwordModel::id_of(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

bool SubwordModel::is_word_initial(int id) const {
  if (id < kNumSpecial || id >= size()) return false;
  return tokens_[static_cast<std::size_t>(id)].rfind("##", 0) != 0;
}

nlohmann::json SubwordModel::to_json() const {
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& [a, b] : merges_) merges.push_back({a, b});
  return {{"kind", "bpe"},
          {"version", 1},
          {"tokens", tokens_},
          {"merges", merges},
          {"fingerprint", hex64(fingerprint_)}};
}

SubwordModel SubwordModel::from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != "bpe" || j.value("version", 0) != 1) {
    throw ConfigError("unsupported subword model (expected bpe v1)");
  }
  SubwordModel model;
  model.tokens_ = j.at("tokens").get<std::vector<std::string>>();
  for (const auto& m : j.at("merges")) {
    model.merges_.emplace_back(m.at(0).get<std::string>(), m.at(1).get<std::string>());
  }
  model.finalize();
  if (j.contains("fingerprint") && j.at("fingerprint").get<std::string>() != hex64(model.fingerprint_)) {
    throw ConfigError("subword model fingerprint mismatch");
  }
  return model;
}

}  // namespace advcl
