#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "advcl/attack.hpp"
#include "advcl/config.hpp"
#include "advcl/corpus.hpp"
#include "advcl/evalsuite.hpp"
#include "advcl/pipelines.hpp"

namespace advcl {

// Corpora, tokenizer and synonym table for one experiment.
struct World {
  Corpus train;
  Corpus test;
  std::optional<Corpus> ood;  // out-of-domain pretraining corpus
  std::shared_ptr<const SubwordModel> subwords;
  SynonymEmbeddingTable table;
  std::vector<std::string> function_words;
  std::function<bool(std::string_view)> is_protected;
  std::vector<std::string> input_files;

  const Corpus& pretrain_corpus(const DataConfig& data) const;
};

// Synthetic data is regenerated from the config; file data is read relative to
// ADVCL_DATA_DIR. With `subwords` the corpora are tokenized by that model
// (e.g. the one stored in a checkpoint); otherwise one is trained on all
// corpora of the world.
World build_world(const ExperimentConfig& cfg, std::shared_ptr<const SubwordModel> subwords = nullptr);

EncoderConfig model_config(const ExperimentConfig& cfg, const World& world);
EncoderBundle initial_model(const ExperimentConfig& cfg, const World& world);

// Stand-in for a pretrained language model's lexical knowledge: rows of the
// token embedding for pieces that spell a whole table word become a fixed
// random projection of that word's synonym vector.
void seed_token_embeddings(EncoderBundle& model, const SubwordModel& subwords, const SynonymEmbeddingTable& table,
                           std::uint64_t seed, double weight = 1.0);

// Owns whichever candidate provider the config selects.
class ProviderHandle {
 public:
  ProviderHandle(const ExperimentConfig& cfg, const World& world, const EncoderBundle& model);
  const CandidateProvider& get() const { return *provider_; }

 private:
  std::unique_ptr<EncoderBundle> mlm_model_;
  std::unique_ptr<CandidateProvider> provider_;
};

PretrainResult run_pretraining(const ExperimentConfig& cfg, const World& world, PretrainScheme scheme,
                               const EncoderBundle& init);
FinetuneResult run_finetuning(const ExperimentConfig& cfg, const World& world, FinetuneScheme scheme,
                              const EncoderBundle& init);

// Test set truncated to eval.test_limit.
Corpus evaluation_set(const ExperimentConfig& cfg, const World& world);

RobustnessReport evaluate_model(const ExperimentConfig& cfg, const World& world, const EncoderBundle& model,
                                const std::string& setting, std::vector<AttackResult>* results = nullptr);

struct Setting {
  PretrainScheme pretrain;
  FinetuneScheme finetune;
  bool ood = false;  // pretrain on the out-of-domain corpus
  std::string name() const;
  static Setting parse(const std::string& s);  // e.g. "adcl+ftc", "adcl-ood+ftc"
};

struct ComparisonRow {
  std::string setting;
  int runs = 0;
  double success_mean = 0, success_sd = 0;
  double replaced_mean = 0, replaced_sd = 0;
  double accuracy_mean = 0, accuracy_sd = 0;
};

struct Comparison {
  std::string dataset_id;
  Budget budget;
  std::vector<ComparisonRow> rows;
  std::string text() const;  // best value per column wrapped in ** **
  nlohmann::json to_json() const;
};

// Groups reports by setting (mean and sample sd over runs). Refuses reports
// with differing budgets or dataset ids.
Comparison compare_reports(const std::vector<RobustnessReport>& reports);

struct SweepRow {
  int queue_size = 0;
  RobustnessReport report;
};

// ADCL+FTC once per queue size with a shared seed.
std::vector<SweepRow> queue_size_sweep(const ExperimentConfig& cfg, const World& world, const std::vector<int>& sizes);
std::string sweep_table(const std::vector<SweepRow>& rows);

}  // namespace advcl
