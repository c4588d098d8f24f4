#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "advcl/checkpoint.hpp"
#include "advcl/pipelines.hpp"
#include "test_util.hpp"

namespace advcl {
namespace {

using testing::make_world;
using testing::tiny_config;

TrainingConfig small_training() {
  TrainingConfig t;
  t.seed = 17;
  t.contrastive.steps = 10;
  t.contrastive.batch_size = 4;
  t.contrastive.queue_size = 16;
  t.contrastive.learning_rate = 1e-3;
  t.contrastive.momentum = 0.9;
  t.finetuning.epochs = 2;
  t.finetuning.batch_size = 8;
  t.pretrain_attack.max_iters = 2;
  t.pretrain_attack.candidate_limit = 5;
  t.adv_attack.candidate_limit = 5;
  return t;
}

BackTranslationOptions bt_options(const testing::TinyWorld& w) {
  BackTranslationOptions o;
  o.swap_rate = 0.3;
  o.function_words = w.lexicon->function_words();
  const SynthLexicon* lex = w.lexicon.get();
  o.is_protected = [lex](std::string_view word) { return lex->is_marker(word); };
  return o;
}

// True when `out` equals `in` up to synonym swaps and at most one adjacent
// transposition.
bool explained_by_swaps(const std::vector<std::string>& in, std::vector<std::string> out,
                        const SynonymEmbeddingTable& table, double threshold) {
  auto ok = [&](const std::vector<std::string>& o) {
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (in[i] == o[i]) continue;
      const auto c = table.cosine(in[i], o[i]);
      if (!c || *c < threshold) return false;
    }
    return true;
  };
  if (ok(out)) return true;
  for (std::size_t i = 0; i + 1 < out.size(); ++i) {
    std::swap(out[i], out[i + 1]);
    if (ok(out)) return true;
    std::swap(out[i], out[i + 1]);
  }
  return false;
}

TEST(BackTranslation, PreservesLengthLabelAndProtectedWords) {
  auto w = make_world(30);
  const auto opts = bt_options(w);
  int changed = 0;
  for (const auto& ex : w.corpus.examples) {
    const auto out = back_translation_standin(ex, 5, *w.subwords, w.table(), opts, 64);
    ASSERT_EQ(out.num_words(), ex.num_words());
    EXPECT_EQ(out.label, ex.label);
    EXPECT_NO_THROW(validate_example(out));
    for (int i = 0; i < ex.num_words(); ++i) {
      if (w.lexicon->is_marker(ex.words[static_cast<std::size_t>(i)])) {
        EXPECT_EQ(out.words[static_cast<std::size_t>(i)], ex.words[static_cast<std::size_t>(i)]);
      }
    }
    EXPECT_TRUE(explained_by_swaps(ex.words, out.words, w.table(), opts.cosine_threshold));
    changed += out.words != ex.words;
  }
  EXPECT_GT(changed, 20);
}

TEST(BackTranslation, DeterministicPerSeed) {
  auto w = make_world(10);
  const auto opts = bt_options(w);
  int differs = 0;
  for (const auto& ex : w.corpus.examples) {
    const auto a = back_translation_standin(ex, 5, *w.subwords, w.table(), opts, 64);
    const auto b = back_translation_standin(ex, 5, *w.subwords, w.table(), opts, 64);
    const auto c = back_translation_standin(ex, 6, *w.subwords, w.table(), opts, 64);
    EXPECT_EQ(a.words, b.words);
    differs += a.words != c.words;
  }
  EXPECT_GT(differs, 0);
}

TEST(Pretrainer, ResumeIsBitExact) {
  auto w = make_world(40);
  const auto t = small_training();
  const EncoderBundle init(tiny_config(*w.subwords), 3);
  const IdentityTransform transform;

  ContrastivePretrainer straight(t, w.corpus, transform, init);
  straight.run(10);

  ContrastivePretrainer first(t, w.corpus, transform, init);
  first.run(5);
  const Checkpoint state = decode_checkpoint(encode_checkpoint(first.save_state(w.subwords)));
  ContrastivePretrainer second = ContrastivePretrainer::resume(t, w.corpus, transform, state);
  EXPECT_EQ(second.steps_done(), 5);
  second.run(5);

  EXPECT_EQ(parameter_checksum(straight.pair().query), parameter_checksum(second.pair().query));
  EXPECT_EQ(parameter_checksum(straight.pair().key), parameter_checksum(second.pair().key));
  EXPECT_EQ(straight.queue().raw(), second.queue().raw());
  EXPECT_EQ(straight.queue().cursor(), second.queue().cursor());
}

TEST(Pretrainer, ResumeIsBitExactWithGeometryTransform) {
  auto w = make_world(24);
  auto t = small_training();
  t.contrastive.steps = 6;
  const EncoderBundle init(tiny_config(*w.subwords), 3);
  const SynonymTableProvider provider(w.table());
  const GeometryTransform transform(t.pretrain_attack, w.subwords, provider, w.table());

  ContrastivePretrainer straight(t, w.corpus, transform, init);
  straight.run(6);
  ContrastivePretrainer first(t, w.corpus, transform, init);
  first.run(3);
  ContrastivePretrainer second =
      ContrastivePretrainer::resume(t, w.corpus, transform, decode_checkpoint(encode_checkpoint(first.save_state(w.subwords))));
  second.run(3);
  EXPECT_EQ(parameter_checksum(straight.pair().query), parameter_checksum(second.pair().query));
}

TEST(Pretrainer, IgnoresLabels) {
  auto w = make_world(40);
  const auto t = small_training();
  const EncoderBundle init(tiny_config(*w.subwords), 3);
  const IdentityTransform transform;
  Corpus shuffled = w.corpus;
  std::vector<int> labels;
  for (const auto& ex : shuffled.examples) labels.push_back(*ex.label);
  std::mt19937 rng(1);
  std::shuffle(labels.begin(), labels.end(), rng);
  for (std::size_t i = 0; i < labels.size(); ++i) shuffled.examples[i].label = 1 - labels[i];
  Corpus unlabeled = w.corpus;
  for (auto& ex : unlabeled.examples) ex.label.reset();

  const auto a = pretrain_contrastive(t, w.corpus, transform, init);
  const auto b = pretrain_contrastive(t, shuffled, transform, init);
  const auto c = pretrain_contrastive(t, unlabeled, transform, init);
  EXPECT_EQ(parameter_checksum(a.model), parameter_checksum(b.model));
  EXPECT_EQ(parameter_checksum(a.model), parameter_checksum(c.model));
  EXPECT_NE(parameter_checksum(a.model), parameter_checksum(init));
}

TEST(Pretrainer, NoneSchemeReturnsInit) {
  auto w = make_world(20);
  auto t = small_training();
  t.pretrain = PretrainScheme::kNone;
  const EncoderBundle init(tiny_config(*w.subwords), 3);
  const auto r = pretrain_contrastive(t, w.corpus, IdentityTransform{}, init);
  EXPECT_EQ(parameter_checksum(r.model), parameter_checksum(init));
}

TEST(Pretrainer, LossIsFiniteAndRecorded) {
  auto w = make_world(40);
  const auto t = small_training();
  const EncoderBundle init(tiny_config(*w.subwords), 3);
  const auto r = pretrain_contrastive(t, w.corpus, IdentityTransform{}, init);
  ASSERT_EQ(r.history.size(), 10u);
  for (const auto& s : r.history) EXPECT_TRUE(std::isfinite(s.loss));
}

TEST(TrainingConfig, QueueMustHoldABatch) {
  auto t = small_training();
  t.contrastive.queue_size = 2;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(Finetune, ZeroBudgetAdversarialEqualsClean) {
  auto w = make_world(32);
  auto t = small_training();
  t.adv_attack.budget_fraction = 0.0;
  const EncoderBundle init(tiny_config(*w.subwords), 3);
  const SynonymTableProvider provider(w.table());
  const auto clean = finetune_clean(init, w.corpus, t);
  const auto adv = finetune_adversarial(init, w.corpus, t, *w.subwords, provider, w.table());
  EXPECT_EQ(parameter_checksum(clean.model), parameter_checksum(adv.model));
  for (const auto& e : adv.history) EXPECT_EQ(e.adversarial_rows, 0);
}

TEST(Finetune, AdversarialAddsRowsAfterFirstEpoch) {
  auto w = make_world(32);
  auto t = small_training();
  t.adv_attack.budget_fraction = 0.4;
  const EncoderBundle init(tiny_config(*w.subwords), 3);
  const SynonymTableProvider provider(w.table());
  const auto adv = finetune_adversarial(init, w.corpus, t, *w.subwords, provider, w.table());
  ASSERT_EQ(adv.history.size(), 2u);
  EXPECT_EQ(adv.history[0].adversarial_rows, 0);
  EXPECT_GT(adv.history[1].adversarial_rows, 0);
}

TEST(Finetune, CleanTrainingFitsSeparableData) {
  auto w = make_world(64);
  auto t = small_training();
  t.finetuning.epochs = 6;
  t.finetuning.learning_rate = 3e-3;
  const EncoderBundle init(tiny_config(*w.subwords), 3);
  const auto r = finetune_clean(init, w.corpus, t);
  EXPECT_GT(r.history.back().accuracy, 0.9);
  EXPECT_LT(r.history.back().loss, r.history.front().loss);
}

TEST(Pregenerate, DoublesTheDataset) {
  auto w = make_world(12);
  const auto t = small_training();
  const EncoderBundle model(tiny_config(*w.subwords), 3);
  const SynonymTableProvider provider(w.table());
  const Corpus aug = pregenerate_adversarial_dataset(model, w.corpus, t.adv_attack, provider, w.table(), 4);
  ASSERT_EQ(aug.size(), 2 * w.corpus.size());
  for (std::size_t i = 0; i < w.corpus.size(); ++i) {
    EXPECT_EQ(aug.examples[i].id, w.corpus.examples[i].id);
    EXPECT_EQ(aug.examples[w.corpus.size() + i].id, w.corpus.examples[i].id + ":adv");
    EXPECT_EQ(aug.examples[w.corpus.size() + i].label, w.corpus.examples[i].label);
  }
}

TEST(MaskedLm, HeadFitLowersLossAndKeepsSentenceOutputs) {
  auto w = make_world(40);
  EncoderBundle model(tiny_config(*w.subwords), 3);
  const std::vector<TokenizedExample> probe(w.corpus.examples.begin(), w.corpus.examples.begin() + 3);
  const SentenceOutputs before = encode(model, probe);
  MaskedLmOptions o;
  o.steps = 1;
  EncoderBundle one = model;
  const double first = fit_masked_lm_head(one, w.corpus, o);
  o.steps = 150;
  const double last = fit_masked_lm_head(model, w.corpus, o);
  EXPECT_LT(last, first);
  const SentenceOutputs after = encode(model, probe);
  EXPECT_EQ(before.h, after.h);
  EXPECT_EQ(before.logits, after.logits);
}

}  // namespace
}  // namespace advcl
