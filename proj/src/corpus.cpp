#include "advcl/corpus.hpp"

#include <cctype>
#include <charconv>
#include <filesystem>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace advcl {

using nlohmann::json;

std::string_view split_name(Split s) { return s == Split::kTrain ? "train" : "test"; }

Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      words.emplace_back(1, ch);
    } else {
      cur.push_back(ch);
    }
  }
  flush();
  return words;
}

TokenizedExample tokenize_words(const SubwordModel& model, std::string id,
                                std::vector<std::string> words, std::optional<int> label,
                                int max_subwords) {
  TokenizedExample ex;
  ex.id = std::move(id);
  ex.label = label;
  for (auto& w : words) {
    auto pieces = model.encode_word(w);
    if (max_subwords > 0 &&
        ex.num_subwords() + static_cast<int>(pieces.size()) > max_subwords) {
      break;
    }
    const int begin = ex.num_subwords();
    ex.subwords.insert(ex.subwords.end(), pieces.begin(), pieces.end());
    ex.spans.push_back({begin, ex.num_subwords()});
    ex.words.push_back(std::move(w));
  }
  return ex;
}

TokenizedExample replace_word(const TokenizedExample& example, const SubwordModel& model,
                              int index, const std::string& word, int max_subwords) {
  if (index < 0 || index >= example.num_words()) {
    throw ContractError("replace_word: index " + std::to_string(index) + " out of range");
  }
  const Span old = example.spans[static_cast<std::size_t>(index)];
  const auto pieces = model.encode_word(word);
  const int delta = static_cast<int>(pieces.size()) - old.size();

  TokenizedExample out;
  out.id = example.id;
  out.label = example.label;
  out.words = example.words;
  out.words[static_cast<std::size_t>(index)] = word;
  out.subwords.reserve(example.subwords.size() + pieces.size());
  out.subwords.insert(out.subwords.end(), example.subwords.begin(),
                      example.subwords.begin() + old.begin);
  out.subwords.insert(out.subwords.end(), pieces.begin(), pieces.end());
  out.subwords.insert(out.subwords.end(), example.subwords.begin() + old.end,
                      example.subwords.end());
  out.spans = example.spans;
  out.spans[static_cast<std::size_t>(index)].end = old.begin + static_cast<int>(pieces.size());
  for (std::size_t k = static_cast<std::size_t>(index) + 1; k < out.spans.size(); ++k) {
    out.spans[k].begin += delta;
    out.spans[k].end += delta;
  }
  if (max_subwords > 0 && out.num_subwords() > max_subwords) {
    while (!out.spans.empty() && out.spans.back().end > max_subwords) {
      out.spans.pop_back();
      out.words.pop_back();
    }
    out.subwords.resize(out.spans.empty() ? 0 : static_cast<std::size_t>(out.spans.back().end));
  }
  return out;
}

void validate_example(const TokenizedExample& ex) {
  if (ex.words.empty()) throw ContractError("example " + ex.id + " has no words");
  if (ex.words.size() != ex.spans.size()) {
    throw ContractError("example " + ex.id + ": words/spans size mismatch");
  }
  int expect = 0;
  for (const auto& s : ex.spans) {
    if (s.begin != expect || s.end <= s.begin) {
      throw ContractError("example " + ex.id + ": spans not contiguous/non-empty");
    }
    expect = s.end;
  }
  if (expect != ex.num_subwords()) {
    throw ContractError("example " + ex.id + ": spans do not cover all subwords");
  }
}

std::shared_ptr<const SubwordModel> train_subwords(std::span<const Corpus* const> corpora,
                                                   int vocab_limit, const std::vector<std::string>& extra_words,
                                                   int extra_count) {
  std::map<std::string, std::int64_t> counts;
  for (const Corpus* c : corpora) {
    for (const auto& ex : c->examples) {
      for (const auto& w : ex.words) ++counts[w];
    }
  }
  for (const auto& w : extra_words) counts[w] += extra_count;
  return std::make_shared<const SubwordModel>(SubwordModel::train(counts, vocab_limit));
}

void retokenize(Corpus& corpus, std::shared_ptr<const SubwordModel> model, int max_subwords) {
  for (auto& ex : corpus.examples) {
    ex = tokenize_words(*model, ex.id, ex.words, ex.label, max_subwords);
  }
  corpus.subwords = std::move(model);
}

namespace {

int parse_int(std::string_view s, const std::string& path, std::size_t line, const char* what) {
  int v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw LoadError(path, line, std::string("malformed ") + what + " '" + std::string(s) + "'");
  }
  return v;
}

void finish_corpus(Corpus& corpus, const LoadOptions& opts) {
  if (opts.limit > 0 && corpus.examples.size() > opts.limit) corpus.examples.resize(opts.limit);
  auto model = opts.subwords;
  if (!model) {
    const Corpus* one[] = {&corpus};
    model = train_subwords(one, opts.vocab_limit);
  }
  retokenize(corpus, std::move(model), opts.max_len - 1);
}

Corpus load_tsv(const std::string& path, const LoadOptions& opts) {
  std::istringstream in(read_file(path));
  Corpus corpus;
  corpus.split = opts.split;
  corpus.dataset_id =
      opts.dataset_id.empty() ? std::filesystem::path(path).stem().string() : opts.dataset_id;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!have_header) {
      constexpr std::string_view kPrefix = "#classes=";
      if (line.rfind(kPrefix, 0) != 0) throw LoadError(path, lineno, "missing '#classes=N' header");
      corpus.num_classes =
          parse_int(std::string_view(line).substr(kPrefix.size()), path, lineno, "class count");
      if (corpus.num_classes < 1) throw LoadError(path, lineno, "class count must be positive");
      have_header = true;
      continue;
    }
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw LoadError(path, lineno, "expected label<TAB>text");
    const int label = parse_int(std::string_view(line).substr(0, tab), path, lineno, "label");
    if (label < 0 || label >= corpus.num_classes) {
      throw LoadError(path, lineno, "label " + std::to_string(label) + " outside [0, " +
                                        std::to_string(corpus.num_classes) + ")");
    }
    auto words = split_words(std::string_view(line).substr(tab + 1));
    if (words.empty()) throw LoadError(path, lineno, "record has no words");
    TokenizedExample ex;
    ex.id = corpus.dataset_id + ":" + std::to_string(corpus.examples.size());
    ex.words = std::move(words);
    ex.label = label;
    corpus.examples.push_back(std::move(ex));
  }
  if (!have_header) throw LoadError(path, 1, "missing '#classes=N' header");
  finish_corpus(corpus, opts);
  return corpus;
}

}  // namespace

Corpus load_corpus(const std::string& path, std::string_view format, const LoadOptions& opts) {
  if (format == "tsv") return load_tsv(path, opts);
  if (format == "jsonl") {
    Corpus c = deserialize_corpus(read_file(path), path);
    if (opts.limit > 0 && c.examples.size() > opts.limit) c.examples.resize(opts.limit);
    retokenize(c, opts.subwords ? opts.subwords : c.subwords, opts.max_len - 1);
    return c;
  }
  throw ConfigError("unknown corpus format '" + std::string(format) + "' (expected tsv|jsonl)");
}

std::string serialize_corpus(const Corpus& corpus) {
  std::string out;
  json header = {{"format", "advcl-corpus"},
                 {"version", 1},
                 {"dataset_id", corpus.dataset_id},
                 {"split", split_name(corpus.split)},
                 {"num_classes", corpus.num_classes},
                 {"count", corpus.examples.size()},
                 {"subwords", corpus.subwords ? corpus.subwords->to_json() : json(nullptr)}};
  out += header.dump();
  out.push_back('\n');
  for (const auto& ex : corpus.examples) {
    json j = {{"id", ex.id},
              {"label", ex.label ? json(*ex.label) : json(nullptr)},
              {"words", ex.words}};
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

Corpus deserialize_corpus(std::string_view text, const std::string& origin) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  Corpus corpus;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw LoadError(origin, lineno, std::string("invalid JSON: ") + e.what());
    }
    try {
      if (!have_header) {
        if (j.value("format", "") != "advcl-corpus") throw LoadError(origin, lineno, "not an advcl corpus");
        if (j.value("version", 0) != 1) throw LoadError(origin, lineno, "unsupported corpus version");
        corpus.dataset_id = j.at("dataset_id").get<std::string>();
        corpus.split = parse_split(j.at("split").get<std::string>());
        corpus.num_classes = j.at("num_classes").get<int>();
        if (!j.at("subwords").is_null()) {
          corpus.subwords =
              std::make_shared<const SubwordModel>(SubwordModel::from_json(j.at("subwords")));
        }
        have_header = true;
        continue;
      }
      TokenizedExample ex;
      ex.id = j.at("id").get<std::string>();
      ex.words = j.at("words").get<std::vector<std::string>>();
      if (!j.at("label").is_null()) {
        const int label = j.at("label").get<int>();
        if (label < 0 || label >= corpus.num_classes) throw LoadError(origin, lineno, "label out of range");
        ex.label = label;
      }
      if (ex.words.empty()) throw LoadError(origin, lineno, "record has no words");
      corpus.examples.push_back(std::move(ex));
    } catch (const json::exception& e) {
      throw LoadError(origin, lineno, std::string("malformed record: ") + e.what());
    }
  }
  if (!have_header) throw LoadError(origin, 1, "missing corpus header");
  if (!corpus.subwords) {
    const Corpus* one[] = {&corpus};
    corpus.subwords = train_subwords(one, 1000);
  }
  retokenize(corpus, corpus.subwords, 0);
  return corpus;
}

std::string to_tsv(const Corpus& corpus) {
  std::string out = "#classes=" + std::to_string(corpus.num_classes) + "\n";
  for (const auto& ex : corpus.examples) {
    out += std::to_string(ex.label.value_or(0));
    out.push_back('\t');
    for (std::size_t i = 0; i < ex.words.size(); ++i) {
      if (i) out.push_back(' ');
      out += ex.words[i];
    }
    out.push_back('\n');
  }
  return out;
}

Mat align_gradients(const TokenizedExample& example, const Mat& subword_grads) {
  if (subword_grads.rows() != example.num_subwords()) {
    throw ContractError("align_gradients: " + std::to_string(subword_grads.rows()) +
                        " gradient rows for " + std::to_string(example.num_subwords()) +
                        " subwords in example " + example.id);
  }
  Mat out(example.num_words(), subword_grads.cols());
  for (int k = 0; k < example.num_words(); ++k) {
    const Span s = example.spans[static_cast<std::size_t>(k)];
    out.row(k) = subword_grads.middleRows(s.begin, s.size()).colwise().sum() / s.size();
  }
  return out;
}

}  // namespace advcl
