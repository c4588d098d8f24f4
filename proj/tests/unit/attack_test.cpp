#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <limits>

#include "advcl/attack.hpp"
#include "test_util.hpp"

namespace advcl {
namespace {

using testing::make_world;
using testing::random_mat;
using testing::tiny_config;

SynonymEmbeddingTable abc_table() {
  return SynonymEmbeddingTable::from_entries({{"a", {1, 0}}, {"b", {0.8, 0.6}}, {"c", {0, 1}}});
}

TEST(FilterCandidates, KeepsOnlyCloseTableWords) {
  const auto table = abc_table();
  const auto f = filter_candidates("a", {"c", "b", "zz", "a"}, table, 0.5);
  EXPECT_EQ(f.words, std::vector<std::string>{"b"});
  EXPECT_FALSE(f.original_missing);
}

TEST(FilterCandidates, ThresholdIsInclusive) {
  const auto table = abc_table();
  EXPECT_EQ(filter_candidates("a", {"b"}, table, 0.8).words.size(), 1u);
  EXPECT_TRUE(filter_candidates("a", {"b"}, table, 0.8000001).words.empty());
}

TEST(FilterCandidates, MissingOriginalYieldsNothing) {
  const auto table = abc_table();
  const auto f = filter_candidates("q", {"a", "b"}, table, 0.1);
  EXPECT_TRUE(f.words.empty());
  EXPECT_TRUE(f.original_missing);
}

TEST(FilterCandidates, EpsilonMustBeInOpenUnitInterval) {
  const auto table = abc_table();
  EXPECT_THROW(filter_candidates("a", {"b"}, table, 0.0), ContractError);
  EXPECT_THROW(filter_candidates("a", {"b"}, table, 1.0), ContractError);
}

TEST(ProjectionScore, HandComputed) {
  RowVec r(2), v(2);
  r << 1, 2;
  v << 3, 4;
  EXPECT_DOUBLE_EQ(projection_score(r, v), 2.2);
  EXPECT_THROW(projection_score(r, RowVec::Zero(2)), ContractError);
}

TEST(Budget, MinOfCapAndFraction) {
  AttackConfig c;
  c.budget_fraction = 0.2;
  c.budget_cap = 10;
  EXPECT_EQ(c.budget_for(30), 6);
  EXPECT_EQ(c.budget_for(100), 10);
  EXPECT_EQ(c.budget_for(4), 0);
  c.budget_fraction = 0.0;
  EXPECT_EQ(c.budget_for(30), 0);
}

TEST(AttackConfig, JsonRoundTripAndValidation) {
  AttackConfig c;
  c.cosine_threshold = 0.7;
  c.projection = ProjectionRule::kAbsolute;
  c.loss_kind = LossKind::kClassification;
  const AttackConfig back = AttackConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  c.cosine_threshold = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(SelectTargetWord, BruteForceArgmaxOfNorms) {
  const Mat g = random_mat(9, 5, 4);
  for (const std::set<int>& forbidden : {std::set<int>{}, std::set<int>{2, 5}, std::set<int>{0, 1, 3}}) {
    int best = -1;
    double best_norm = -1;
    for (int i = 0; i < g.rows(); ++i) {
      if (forbidden.count(i)) continue;
      if (g.row(i).norm() > best_norm) best = i, best_norm = g.row(i).norm();
    }
    EXPECT_EQ(select_target_word(g, forbidden), best);
  }
  Mat tie = Mat::Ones(3, 2);
  EXPECT_EQ(select_target_word(tie, {}), 0);
  EXPECT_FALSE(select_target_word(tie, {0, 1, 2}).has_value());
}

TEST(MaskWord, SingleMaskPosition) {
  auto w = make_world();
  const auto& ex = w.corpus.examples[0];
  const auto m = mask_word(ex, 2);
  EXPECT_EQ(m.num_words(), ex.num_words());
  EXPECT_EQ(m.spans[2].size(), 1);
  EXPECT_EQ(m.subwords[static_cast<std::size_t>(m.spans[2].begin)], SubwordModel::kMask);
  EXPECT_NO_THROW(validate_example(m));
}

// Re-runs every recorded step with independent probes and encodes: the target
// must be the top-norm admissible word, the scores the projections of the
// representation shifts, and the choice their argmax.
void replay(const EncoderBundle& model, const testing::TinyWorld& w, const TokenizedExample& ex,
            const AttackConfig& cfg, const AttackResult& res, const SentenceLoss& loss) {
  const SynonymTableProvider provider(w.table());
  TokenizedExample cur = ex;
  std::set<int> replaced;
  for (const AttackStep& step : res.steps) {
    const GradientProbe p = probe_gradients(model, cur, loss);
    const bool contrastive = cfg.loss_kind == LossKind::kContrastive;
    const RowVec v = contrastive ? RowVec(p.grad_z.transpose()) : RowVec(p.grad_h.transpose());
    const RowVec s0 = contrastive ? p.z : p.h;
    const Mat word_grads = align_gradients(cur, p.grad_word_embeddings);

    std::set<int> blocked = replaced;
    for (int e : step.exhausted) blocked.insert(e);
    int best = -1;
    for (int i = 0; i < word_grads.rows(); ++i) {
      if (blocked.count(i)) continue;
      if (best < 0 || word_grads.row(i).norm() > word_grads.row(best).norm()) best = i;
    }
    ASSERT_EQ(step.target, best);

    std::vector<std::string> expected;
    const auto& orig = cur.words[static_cast<std::size_t>(best)];
    for (const auto& cand : provider.propose(cur, best, cfg.candidate_limit)) {
      const auto c = w.table().cosine(orig, cand);
      if (c && *c >= cfg.cosine_threshold && cand != orig) expected.push_back(cand);
    }
    ASSERT_EQ(step.candidates, expected);

    int arg = 0;
    for (std::size_t j = 0; j < expected.size(); ++j) {
      const auto next = replace_word(cur, *w.subwords, best, expected[j], model.config().max_len - 1);
      const SentenceOutputs o = encode(model, std::span(&next, 1));
      const RowVec s = contrastive ? RowVec(o.z.row(0)) : RowVec(o.h.row(0));
      const double score = (s - s0).dot(v) / v.norm();
      EXPECT_NEAR(step.scores[j], score, 1e-9);
      if (score > step.scores[static_cast<std::size_t>(arg)]) arg = static_cast<int>(j);
    }
    ASSERT_EQ(step.chosen, arg);
    cur = replace_word(cur, *w.subwords, best, expected[static_cast<std::size_t>(arg)], model.config().max_len - 1);
    replaced.insert(best);
  }
  EXPECT_EQ(cur.words, res.perturbed.words);
  EXPECT_LE(static_cast<int>(res.replaced_indices.size()), res.budget);
  EXPECT_EQ(replaced.size(), res.replaced_indices.size());  // no repeats
}

TEST(GeometryAttack, ClassificationStepsMatchBruteForce) {
  auto w = make_world(30);
  const EncoderBundle model(tiny_config(*w.subwords), 21);
  const SynonymTableProvider provider(w.table());
  AttackConfig cfg;
  cfg.loss_kind = LossKind::kClassification;
  cfg.budget_fraction = 0.5;
  cfg.max_iters = 4;
  int replayed = 0;
  for (const auto& ex : w.corpus.examples) {
    const AttackResult res = geometry_attack(model, *w.subwords, ex, cfg, provider, w.table());
    if (res.already_misclassified) {
      EXPECT_TRUE(res.steps.empty());
      continue;
    }
    replay(model, w, ex, cfg, res, cross_entropy_loss(*ex.label));
    replayed += static_cast<int>(res.steps.size());
    // Classification mode stops at the first flip.
    if (res.success) {
      const auto& last = res.perturbed;
      EXPECT_NE(classify(model, std::span(&last, 1)).predicted[0], *ex.label);
    }
  }
  EXPECT_GT(replayed, 10);
}

TEST(GeometryAttack, ContrastiveStepsMatchBruteForce) {
  auto w = make_world(12);
  const EncoderBundle model(tiny_config(*w.subwords), 22);
  const SynonymTableProvider provider(w.table());
  const Mat negatives = random_mat(10, model.proj_dim(), 8).array().tanh();
  AttackConfig cfg;
  cfg.loss_kind = LossKind::kContrastive;
  cfg.budget_fraction = 0.4;
  const double tau = 0.1;
  for (int i = 0; i < 6; ++i) {
    const auto& ex = w.corpus.examples[static_cast<std::size_t>(i)];
    const AttackResult res = geometry_attack(model, *w.subwords, ex, cfg, provider, w.table(), {&negatives, tau});
    const RowVec anchor = encode(model, std::span(&ex, 1)).z.row(0);
    SentenceLoss loss = [&](const RowVec&, const RowVec& z, const RowVec&) {
      Mat keys(negatives.rows() + 1, negatives.cols());
      keys << negatives, anchor;
      double denom = 0;
      RowVec grad = RowVec::Zero(z.size());
      for (int k = 0; k < keys.rows(); ++k) {
        const double e = std::exp(z.dot(keys.row(k)) / tau);
        denom += e;
        grad += e * keys.row(k);
      }
      LossValue lv;
      lv.value = -z.dot(anchor) / tau + std::log(denom);
      lv.d_z = ((grad / denom - anchor) / tau).transpose();
      return lv;
    };
    ASSERT_FALSE(res.loss_trajectory.empty());
    EXPECT_NEAR(res.loss_trajectory[0], loss(RowVec(), anchor, RowVec()).value, 1e-9);
    replay(model, w, ex, cfg, res, loss);
  }
}

TEST(GeometryAttack, BatchedEqualsSequential) {
  auto w = make_world(20);
  const EncoderBundle model(tiny_config(*w.subwords), 23);
  const SynonymTableProvider provider(w.table());
  AttackConfig cfg;
  cfg.loss_kind = LossKind::kClassification;
  cfg.budget_fraction = 0.5;
  const auto batched = geometry_attack_batched(model, *w.subwords, w.corpus.examples, cfg, provider, w.table());
  ASSERT_EQ(batched.size(), w.corpus.size());
  for (std::size_t i = 0; i < batched.size(); ++i) {
    const auto seq = geometry_attack(model, *w.subwords, w.corpus.examples[i], cfg, provider, w.table());
    EXPECT_EQ(seq.perturbed.words, batched[i].perturbed.words) << i;
    EXPECT_EQ(seq.replaced_indices, batched[i].replaced_indices);
    EXPECT_EQ(seq.success, batched[i].success);
    ASSERT_EQ(seq.loss_trajectory.size(), batched[i].loss_trajectory.size());
    for (std::size_t k = 0; k < seq.loss_trajectory.size(); ++k) {
      EXPECT_NEAR(seq.loss_trajectory[k], batched[i].loss_trajectory[k], 1e-9);
    }
  }
}

TEST(GeometryAttack, ZeroBudgetLeavesTextUnchanged) {
  auto w = make_world(10);
  const EncoderBundle model(tiny_config(*w.subwords), 24);
  const SynonymTableProvider provider(w.table());
  AttackConfig cfg;
  cfg.loss_kind = LossKind::kClassification;
  cfg.budget_fraction = 0.0;
  for (const auto& ex : w.corpus.examples) {
    const auto res = geometry_attack(model, *w.subwords, ex, cfg, provider, w.table());
    EXPECT_EQ(res.perturbed.words, ex.words);
    EXPECT_TRUE(res.replaced_indices.empty());
  }
}

TEST(GeometryAttack, AbsoluteRuleMaximizesMagnitude) {
  auto w = make_world(20);
  const EncoderBundle model(tiny_config(*w.subwords), 25);
  const SynonymTableProvider provider(w.table());
  AttackConfig cfg;
  cfg.loss_kind = LossKind::kClassification;
  cfg.projection = ProjectionRule::kAbsolute;
  cfg.budget_fraction = 0.5;
  for (const auto& ex : w.corpus.examples) {
    const auto res = geometry_attack(model, *w.subwords, ex, cfg, provider, w.table());
    for (const auto& s : res.steps) {
      for (double sc : s.scores) EXPECT_LE(std::abs(sc), std::abs(s.scores[static_cast<std::size_t>(s.chosen)]));
    }
  }
}

TEST(GeometryAttack, ExhaustedWordsAreSkippedWithinTheStep) {
  // A table in which only the word "b" has a close neighbour.
  auto w = make_world(4);
  const auto& ex0 = w.corpus.examples[0];
  std::vector<std::string> vocab;
  for (const auto& word : ex0.words) {
    if (std::find(vocab.begin(), vocab.end(), word) == vocab.end()) vocab.push_back(word);
  }
  std::vector<std::pair<std::string, std::vector<double>>> entries;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    std::vector<double> v(vocab.size() + 1, 0.0);
    v[i] = 1.0;
    entries.emplace_back(vocab[i], v);
  }
  const std::string& special = ex0.words[1];
  const auto axis = static_cast<std::size_t>(std::find(vocab.begin(), vocab.end(), special) - vocab.begin());
  std::vector<double> close(vocab.size() + 1, 0.0);
  close[axis] = 0.9;
  close.back() = std::sqrt(1 - 0.81);
  entries.emplace_back("zzsyn", close);
  const auto table = SynonymEmbeddingTable::from_entries(entries);
  const SynonymTableProvider provider(table);
  const EncoderBundle model(tiny_config(*w.subwords), 26);
  AttackConfig cfg;
  cfg.loss_kind = LossKind::kContrastive;
  cfg.budget_fraction = 1.0;
  const Mat negatives = random_mat(4, model.proj_dim(), 1).array().tanh();
  const auto res = geometry_attack(model, *w.subwords, ex0, cfg, provider, table, {&negatives, 0.07});
  ASSERT_GE(res.steps.size(), 1u);
  for (std::size_t k = 0; k < res.steps.size(); ++k) {
    const auto& step = res.steps[k];
    EXPECT_EQ(ex0.words[static_cast<std::size_t>(step.target)], special);
    EXPECT_EQ(step.candidates, std::vector<std::string>{"zzsyn"});
    for (int e : step.exhausted) EXPECT_NE(ex0.words[static_cast<std::size_t>(e)], special);
    EXPECT_EQ(res.perturbed.words[static_cast<std::size_t>(step.target)], "zzsyn");
  }
}

TEST(RandomSynonymAttack, RespectsBudgetAndFilter) {
  auto w = make_world(20);
  const EncoderBundle model(tiny_config(*w.subwords), 27);
  AttackConfig cfg;
  cfg.loss_kind = LossKind::kClassification;
  cfg.budget_fraction = 0.3;
  for (const auto& ex : w.corpus.examples) {
    const auto res = baseline_random_synonym_attack(model, *w.subwords, ex, cfg, w.table(), 5);
    EXPECT_LE(static_cast<int>(res.replaced_indices.size()), res.budget);
    for (std::size_t k = 0; k < res.replaced_indices.size(); ++k) {
      const int i = res.replaced_indices[k];
      const auto c = w.table().cosine(res.original_words[k], res.perturbed.words[static_cast<std::size_t>(i)]);
      ASSERT_TRUE(c.has_value());
      EXPECT_GE(*c, cfg.cosine_threshold);
    }
  }
}

TEST(AttackExport, OneJsonObjectPerLine) {
  auto w = make_world(6);
  const EncoderBundle model(tiny_config(*w.subwords), 28);
  const SynonymTableProvider provider(w.table());
  AttackConfig cfg;
  cfg.loss_kind = LossKind::kClassification;
  const auto results = geometry_attack_batched(model, *w.subwords, w.corpus.examples, cfg, provider, w.table());
  const std::string text = export_attack_results(w.corpus.examples, results);
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("id"), w.corpus.examples[static_cast<std::size_t>(n)].id);
    ++n;
  }
  EXPECT_EQ(n, 6);
}

}  // namespace
}  // namespace advcl
