#pragma once

#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "advcl/corpus.hpp"
#include "advcl/synonyms.hpp"

namespace advcl {

// Knobs of the synthetic desk-scale world. Every concept is a group of
// surface forms that are synonyms in the generated embedding table. Only the
// first `seen_*_forms` forms of a concept ever occur in sampled text; the rest
// exist only in the table, so they reach a model solely through attacks or
// augmentation.
struct SynthOptions {
  std::uint64_t lexicon_seed = 20231;
  int num_domains = 2;
  int domain = 0;  // which domain's class-marker vocabulary to sample from
  int markers_per_class = 6;
  int marker_forms = 5;
  int seen_marker_forms = 2;
  int neutral_concepts = 60;
  int neutral_forms = 4;
  int seen_neutral_forms = 3;
  int min_markers = 2;
  int max_markers = 3;
  double function_word_rate = 0.25;
  // Neutral forms lean towards one class; leaning forms get this extra weight
  // in sentences of that class.
  double spurious_bias = 2.0;
  int embedding_dim = 48;
  double synonym_noise = 0.45;
  int max_len = 128;
  int vocab_limit = 1000;
  // Tokenizer to use; trained on the sampled corpus when null.
  std::shared_ptr<const SubwordModel> subwords;
};

struct SynthConcept {
  std::vector<std::string> forms;
  int seen_forms = 1;
  int marker_class = -1;  // -1 for neutral/function concepts
  int domain = -1;
  std::vector<int> lean;  // per form, neutral concepts only
};

class SynthLexicon {
 public:
  SynthLexicon(const SynthOptions& opts, int num_classes);

  const SynonymEmbeddingTable& table() const { return table_; }
  bool is_marker(std::string_view word) const;
  bool is_function_word(std::string_view word) const;
  const std::vector<SynthConcept>& concepts() const { return concepts_; }
  int num_classes() const { return num_classes_; }

  // Marker concepts of `cls` in `domain`, neutral concepts, function words.
  std::vector<const SynthConcept*> markers(int domain, int cls) const;
  std::vector<const SynthConcept*> neutrals() const;
  const std::vector<std::string>& function_words() const { return function_words_; }

 private:
  int num_classes_;
  std::vector<SynthConcept> concepts_;
  std::vector<std::string> function_words_;
  std::set<std::string> marker_words_;
  std::set<std::string> function_set_;
  SynonymEmbeddingTable table_;
};

// Deterministic class-separable corpus: each sentence carries 2-3 forms of
// its class's marker concepts among neutral and function words.
Corpus synth_corpus(std::uint64_t seed, int n, int num_classes, std::pair<int, int> length_range,
                    const SynthOptions& opts = {});

}  // namespace advcl
