#pragma once

#include <filesystem>
#include <memory>
#include <random>
#include <string>

#include "advcl/corpus.hpp"
#include "advcl/encoder.hpp"
#include "advcl/synonyms.hpp"
#include "advcl/synth.hpp"

namespace advcl::testing {

// Small synthetic world shared by the unit tests.
struct TinyWorld {
  SynthOptions opts;
  std::unique_ptr<SynthLexicon> lexicon;
  Corpus corpus;
  std::shared_ptr<const SubwordModel> subwords;

  const SynonymEmbeddingTable& table() const { return lexicon->table(); }
};

inline TinyWorld make_world(int n = 24, std::uint64_t seed = 3) {
  TinyWorld w;
  w.opts.domain = 1;
  w.opts.max_len = 32;
  w.opts.vocab_limit = 400;
  w.lexicon = std::make_unique<SynthLexicon>(w.opts, 2);
  w.corpus = synth_corpus(seed, n, 2, {6, 10}, w.opts);
  w.subwords = w.corpus.subwords;
  return w;
}

inline EncoderConfig tiny_config(const SubwordModel& sub) {
  EncoderConfig c;
  c.vocab_size = sub.size();
  c.max_len = 32;
  c.hidden = 16;
  c.layers = 1;
  c.heads = 2;
  c.ffn = 32;
  c.proj_hidden = 16;
  c.proj_dim = 8;
  c.num_classes = 2;
  c.subword_model_id = sub.fingerprint();
  return c;
}

inline Mat random_mat(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = nd(rng);
  return m;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("advcl_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace advcl::testing
