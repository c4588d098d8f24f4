#include "advcl/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace advcl {
namespace {

constexpr const char* kFunctionWords[] = {"the", "a",  "of",  "to",   "and", "in", "is", "it",
                                          "that", "on", "was", "for", "with", "as", "at", "by"};

std::string make_word(std::mt19937_64& rng) {
  static constexpr std::string_view kOnset = "bdfgklmnprstvz";
  static constexpr std::string_view kVowel = "aeiou";
  static constexpr std::string_view kCoda = "lnrs";
  std::uniform_int_distribution<int> syllables(2, 3);
  std::uniform_int_distribution<std::size_t> onset(0, kOnset.size() - 1);
  std::uniform_int_distribution<std::size_t> vowel(0, kVowel.size() - 1);
  std::uniform_int_distribution<std::size_t> coda(0, kCoda.size() - 1);
  std::bernoulli_distribution closed(0.3);
  std::string w;
  const int n = syllables(rng);
  for (int i = 0; i < n; ++i) {
    w.push_back(kOnset[onset(rng)]);
    w.push_back(kVowel[vowel(rng)]);
    if (closed(rng)) w.push_back(kCoda[coda(rng)]);
  }
  return w;
}

Vec random_unit(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vec v(dim);
  for (int i = 0; i < dim; ++i) v(i) = g(rng);
  return v / v.norm();
}

}  // namespace

SynthLexicon::SynthLexicon(const SynthOptions& opts, int num_classes) : num_classes_(num_classes) {
  if (num_classes < 2) throw ContractError("synth lexicon needs at least 2 classes");
  if (opts.seen_marker_forms < 1 || opts.seen_marker_forms > opts.marker_forms ||
      opts.seen_neutral_forms < 1 || opts.seen_neutral_forms > opts.neutral_forms) {
    throw ConfigError("synth: seen form counts must be in [1, forms]");
  }
  std::mt19937_64 rng(mix_seed(opts.lexicon_seed, "lexicon"));
  std::set<std::string> used(std::begin(kFunctionWords), std::end(kFunctionWords));
  auto fresh_word = [&] {
    for (;;) {
      std::string w = make_word(rng);
      if (used.insert(w).second) return w;
    }
  };
  auto make_concept = [&](int forms, int seen) {
    SynthConcept c;
    c.seen_forms = seen;
    for (int i = 0; i < forms; ++i) c.forms.push_back(fresh_word());
    return c;
  };

  for (const char* fw : kFunctionWords) {
    SynthConcept c;
    c.forms.emplace_back(fw);
    concepts_.push_back(std::move(c));
    function_words_.emplace_back(fw);
    function_set_.insert(fw);
  }
  std::uniform_int_distribution<int> any_class(0, num_classes - 1);
  for (int i = 0; i < opts.neutral_concepts; ++i) {
    SynthConcept c = make_concept(opts.neutral_forms, opts.seen_neutral_forms);
    for (int f = 0; f < opts.neutral_forms; ++f) c.lean.push_back(any_class(rng));
    concepts_.push_back(std::move(c));
  }
  for (int d = 0; d < opts.num_domains; ++d) {
    for (int cls = 0; cls < num_classes; ++cls) {
      for (int m = 0; m < opts.markers_per_class; ++m) {
        SynthConcept c = make_concept(opts.marker_forms, opts.seen_marker_forms);
        c.marker_class = cls;
        c.domain = d;
        for (const auto& f : c.forms) marker_words_.insert(f);
        concepts_.push_back(std::move(c));
      }
    }
  }

  // Concept directions are kept mutually far apart so only same-concept forms
  // clear the usual 0.5 cosine filter.
  std::vector<Vec> bases;
  std::vector<std::pair<std::string, std::vector<double>>> entries;
  std::normal_distribution<double> noise(0.0, opts.synonym_noise / std::sqrt(opts.embedding_dim));
  for (const auto& c : concepts_) {
    Vec base;
    for (int attempt = 0;; ++attempt) {
      base = random_unit(rng, opts.embedding_dim);
      bool ok = true;
      for (const auto& b : bases) {
        if (std::abs(b.dot(base)) > 0.3) {
          ok = false;
          break;
        }
      }
      if (ok || attempt > 200) break;
    }
    bases.push_back(base);
    for (const auto& form : c.forms) {
      std::vector<double> v(static_cast<std::size_t>(opts.embedding_dim));
      for (int i = 0; i < opts.embedding_dim; ++i) {
        v[static_cast<std::size_t>(i)] = base(i) + (c.forms.size() > 1 ? noise(rng) : 0.0);
      }
      entries.emplace_back(form, std::move(v));
    }
  }
  table_ = SynonymEmbeddingTable::from_entries(entries);
}

bool SynthLexicon::is_marker(std::string_view word) const {
  return marker_words_.contains(to_lower(word));
}

bool SynthLexicon::is_function_word(std::string_view word) const {
  return function_set_.contains(to_lower(word));
}

std::vector<const SynthConcept*> SynthLexicon::markers(int domain, int cls) const {
  std::vector<const SynthConcept*> out;
  for (const auto& c : concepts_) {
    if (c.marker_class == cls && c.domain == domain) out.push_back(&c);
  }
  return out;
}

std::vector<const SynthConcept*> SynthLexicon::neutrals() const {
  std::vector<const SynthConcept*> out;
  for (const auto& c : concepts_) {
    if (c.marker_class < 0 && !c.lean.empty()) out.push_back(&c);
  }
  return out;
}

Corpus synth_corpus(std::uint64_t seed, int n, int num_classes, std::pair<int, int> length_range,
                    const SynthOptions& opts) {
  const auto [min_len, max_len] = length_range;
  if (num_classes < 2 || n < num_classes) throw ContractError("synth_corpus: need n >= num_classes >= 2");
  if (min_len < 3 || max_len < min_len) throw ContractError("synth_corpus: need 3 <= min <= max length");
  if (opts.domain < 0 || opts.domain >= opts.num_domains) throw ConfigError("synth_corpus: bad domain");

  const SynthLexicon lex(opts, num_classes);
  std::mt19937_64 rng(mix_seed(seed, "synth-sample"));

  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % num_classes;
  std::shuffle(labels.begin(), labels.end(), rng);

  const auto neutrals = lex.neutrals();
  std::uniform_int_distribution<int> len_dist(min_len, max_len);
  std::uniform_int_distribution<int> marker_count(opts.min_markers, opts.max_markers);
  std::bernoulli_distribution function_word(opts.function_word_rate);
  std::uniform_int_distribution<std::size_t> pick_fw(0, lex.function_words().size() - 1);
  std::uniform_int_distribution<std::size_t> pick_neutral(0, neutrals.size() - 1);

  auto sample_form = [&](const SynthConcept& c, int cls) -> const std::string& {
    std::vector<double> w(static_cast<std::size_t>(c.seen_forms));
    for (int f = 0; f < c.seen_forms; ++f) {
      double weight = 1.0 / (f + 1);
      if (!c.lean.empty() && c.lean[static_cast<std::size_t>(f)] == cls) weight *= 1.0 + opts.spurious_bias;
      w[static_cast<std::size_t>(f)] = weight;
    }
    std::discrete_distribution<int> d(w.begin(), w.end());
    return c.forms[static_cast<std::size_t>(d(rng))];
  };

  Corpus corpus;
  corpus.dataset_id = "synth-d" + std::to_string(opts.domain) + "-s" + std::to_string(seed);
  corpus.split = Split::kTrain;
  corpus.num_classes = num_classes;
  for (int i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    const auto markers = lex.markers(opts.domain, y);
    const int len = len_dist(rng);
    const int k = std::min(marker_count(rng), len);
    std::vector<int> slots(static_cast<std::size_t>(len));
    for (int s = 0; s < len; ++s) slots[static_cast<std::size_t>(s)] = s;
    std::shuffle(slots.begin(), slots.end(), rng);
    std::vector<bool> is_marker_slot(static_cast<std::size_t>(len), false);
    for (int s = 0; s < k; ++s) is_marker_slot[static_cast<std::size_t>(slots[static_cast<std::size_t>(s)])] = true;
    std::uniform_int_distribution<std::size_t> pick_marker(0, markers.size() - 1);

    TokenizedExample ex;
    ex.id = corpus.dataset_id + ":" + std::to_string(i);
    ex.label = y;
    for (int s = 0; s < len; ++s) {
      if (is_marker_slot[static_cast<std::size_t>(s)]) {
        ex.words.push_back(sample_form(*markers[pick_marker(rng)], y));
      } else if (function_word(rng)) {
        ex.words.push_back(lex.function_words()[pick_fw(rng)]);
      } else {
        ex.words.push_back(sample_form(*neutrals[pick_neutral(rng)], y));
      }
    }
    corpus.examples.push_back(std::move(ex));
  }

  auto model = opts.subwords;
  if (!model) {
    const Corpus* one[] = {&corpus};
    model = train_subwords(one, opts.vocab_limit);
  }
  retokenize(corpus, std::move(model), opts.max_len - 1);
  return corpus;
}

}  // namespace advcl
