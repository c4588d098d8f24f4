#include <gtest/gtest.h>

#include <cmath>

#include "advcl/evalsuite.hpp"
#include "advcl/experiment.hpp"
#include "test_util.hpp"

namespace advcl {
namespace {

using testing::make_world;
using testing::tiny_config;

ExampleOutcome outcome(bool correct, bool success, int words, int replaced) {
  ExampleOutcome o;
  o.correct = correct;
  o.success = success;
  o.num_words = words;
  o.replaced = replaced;
  return o;
}

TEST(Report, SuccessRateCountsOnlyCorrectlyClassified) {
  RobustnessReport r;
  r.per_example = {outcome(true, true, 10, 2), outcome(true, false, 8, 1), outcome(false, false, 5, 0),
                   outcome(false, false, 6, 0)};
  summarize(r);
  EXPECT_EQ(r.num_correct, 2);
  EXPECT_DOUBLE_EQ(r.clean_accuracy, 0.5);
  ASSERT_TRUE(r.success_rate);
  EXPECT_DOUBLE_EQ(*r.success_rate, 0.5);
  ASSERT_TRUE(r.replacement_rate);
  EXPECT_DOUBLE_EQ(*r.replacement_rate, 0.2);  // 2 / 10 over the one successful attack
  r.averaging = ReplacementAveraging::kAllAttacked;
  summarize(r);
  EXPECT_DOUBLE_EQ(*r.replacement_rate, (0.2 + 0.125) / 2);
}

TEST(Report, UndefinedWhenNothingIsCorrect) {
  RobustnessReport r;
  r.per_example = {outcome(false, false, 5, 0)};
  summarize(r);
  EXPECT_FALSE(r.success_rate.has_value());
  EXPECT_FALSE(r.replacement_rate.has_value());
  const auto j = r.to_json();
  EXPECT_TRUE(j.at("success_rate").is_null());
  EXPECT_EQ(RobustnessReport::from_json(j).to_json(), j);
}

TEST(Report, JsonRoundTrip) {
  RobustnessReport r;
  r.dataset_id = "d";
  r.setting = "np+ftc";
  r.attack = "geometry";
  r.budget = {0.2, 20};
  r.per_example = {outcome(true, true, 10, 3), outcome(true, false, 8, 1)};
  summarize(r);
  const auto back = RobustnessReport::from_json(r.to_json());
  EXPECT_EQ(back.to_json(), r.to_json());
}

RobustnessReport stub_report(const std::string& setting, Budget b, const std::string& dataset, double success) {
  RobustnessReport r;
  r.dataset_id = dataset;
  r.setting = setting;
  r.attack = "geometry";
  r.budget = b;
  const int n = 10;
  for (int i = 0; i < n; ++i) r.per_example.push_back(outcome(true, i < success * n, 10, 1));
  summarize(r);
  return r;
}

TEST(Compare, RefusesMixedBudgetsAndDatasets) {
  const auto a = stub_report("np+ftc", {0.2, 20}, "d", 0.5);
  EXPECT_THROW(compare_reports({a, stub_report("adcl+ftc", {0.4, 20}, "d", 0.3)}), ConfigError);
  EXPECT_THROW(compare_reports({a, stub_report("adcl+ftc", {0.2, 10}, "d", 0.3)}), ConfigError);
  EXPECT_THROW(compare_reports({a, stub_report("adcl+ftc", {0.2, 20}, "e", 0.3)}), ConfigError);
  EXPECT_NO_THROW(compare_reports({a, stub_report("adcl+ftc", {0.2, 20}, "d", 0.3)}));
}

TEST(Compare, MeanAndSampleSdPerSetting) {
  const Budget b{0.2, 20};
  const auto c = compare_reports({stub_report("np+ftc", b, "d", 0.5), stub_report("np+ftc", b, "d", 0.7),
                                  stub_report("adcl+ftc", b, "d", 0.2)});
  ASSERT_EQ(c.rows.size(), 2u);
  const auto& np = c.rows[0].setting == "np+ftc" ? c.rows[0] : c.rows[1];
  EXPECT_EQ(np.runs, 2);
  EXPECT_NEAR(np.success_mean, 0.6, 1e-12);
  EXPECT_NEAR(np.success_sd, std::sqrt(0.02), 1e-12);
  // The lowest success rate is the best and is bolded.
  EXPECT_NE(c.text().find("**20.00**"), std::string::npos) << c.text();
}

TEST(Distance, HandComputedAtTwoExamples) {
  Mat v(2, 2), va(2, 2);
  v << 0, 0, 3, 4;
  va << 0, 1, 3, 3;
  const DistanceReport r = distance_report(v, va);
  EXPECT_DOUBLE_EQ(r.d_pos, 1.0);
  EXPECT_NEAR(r.d_neg, 2.5 + 1.5 * std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(r.delta, r.d_neg - 1.0, 1e-15);
  EXPECT_THROW(distance_report(v.topRows(1), va.topRows(1)), ContractError);
}

TEST(Embeddings, CsvRoundTripIsExact) {
  auto w = make_world(6);
  const EncoderBundle model(tiny_config(*w.subwords), 2);
  const std::vector<std::string> tags(6, "clean");
  const std::vector<int> pairs = {0, 1, 2, 3, 4, 5};
  const auto rows = parse_embeddings(export_embeddings(model, w.corpus.examples, tags, pairs));
  const Mat h = encode(model, w.corpus.examples).h;
  ASSERT_EQ(rows.size(), 6u);
  for (int i = 0; i < 6; ++i) {
    EXPECT_EQ(rows[static_cast<std::size_t>(i)].id, w.corpus.examples[static_cast<std::size_t>(i)].id);
    EXPECT_EQ(rows[static_cast<std::size_t>(i)].pair_id, i);
    for (int d = 0; d < model.hidden(); ++d) EXPECT_EQ(rows[static_cast<std::size_t>(i)].values[d], h(i, d));
  }
}

TEST(Evaluate, DeterministicAndSelfTransferMatchesDirect) {
  auto w = make_world(30);
  w.corpus.split = Split::kTest;
  const EncoderBundle model(tiny_config(*w.subwords), 31);
  const SynonymTableProvider provider(w.table());
  AttackConfig cfg;
  cfg.loss_kind = LossKind::kClassification;
  cfg.budget_fraction = 0.4;
  const GeometryAttack attack(cfg, w.subwords, provider, w.table(), 8);
  const auto a = evaluate_robustness(model, w.corpus, attack);
  const auto b = evaluate_robustness(model, w.corpus, attack);
  EXPECT_EQ(a.to_jsonl(), b.to_jsonl());
  const auto t = transferability_eval(model, model, w.corpus, attack);
  EXPECT_EQ(t.denominator, a.num_correct);
  EXPECT_EQ(t.successes, a.num_success);
}

TEST(Evaluate, TransferAcrossVocabulariesIsRefused) {
  auto w = make_world(10);
  const EncoderBundle a(tiny_config(*w.subwords), 1);
  EncoderConfig other = tiny_config(*w.subwords);
  other.subword_model_id += 1;
  const EncoderBundle b(other, 1);
  const SynonymTableProvider provider(w.table());
  AttackConfig cfg;
  cfg.loss_kind = LossKind::kClassification;
  const GeometryAttack attack(cfg, w.subwords, provider, w.table());
  EXPECT_THROW(transferability_eval(a, b, w.corpus, attack), ContractError);
}

TEST(Benchmark, CsvHasOneRowPerModeAndBatch) {
  auto w = make_world(8);
  const EncoderBundle model(tiny_config(*w.subwords), 1);
  const SynonymTableProvider provider(w.table());
  AttackConfig cfg;
  cfg.loss_kind = LossKind::kClassification;
  BenchmarkOptions o;
  o.batch_sizes = {1, 4};
  o.repeats = 2;
  o.include_baseline = false;
  const auto rows = speed_benchmark(model, *w.subwords, w.corpus.examples, cfg, provider, w.table(), o);
  EXPECT_GE(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_GT(r.mean_seconds_per_example, 0.0);
    EXPECT_EQ(r.repeats, 2);
  }
  const std::string csv = benchmark_csv(rows);
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), rows.size() + 1);
}

}  // namespace
}  // namespace advcl
