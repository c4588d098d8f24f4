#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advcl/attack.hpp"
#include "advcl/encoder.hpp"
#include "advcl/evalsuite.hpp"
#include "advcl/pipelines.hpp"
#include "advcl/synth.hpp"

namespace advcl {

inline constexpr int kConfigSchemaVersion = 1;

struct SynthDataConfig {
  int train_size = 4000;
  int test_size = 1000;
  int pretrain_size = 4000;  // size of the out-of-domain pretraining corpus
  int num_classes = 2;
  int min_len = 10;
  int max_len = 20;
  int domain = 1;      // finetune / evaluation domain
  int ood_domain = 0;  // domain of the out-of-domain pretraining corpus
  SynthOptions world;  // lexicon and sampling knobs (subwords/max_len unused here)
};

struct FileDataConfig {
  std::string format = "tsv";
  std::string train;
  std::string test;
  std::string synonyms;
  std::string pretrain;  // optional out-of-domain pretraining corpus
};

struct DataConfig {
  std::string source = "synth";    // synth | files
  std::string pretrain_on = "train";  // train | ood
  int vocab_limit = 1200;
  SynthDataConfig synth;
  FileDataConfig files;
};

struct EvalConfig {
  AttackConfig attack = default_eval_attack();
  std::string provider = "table";  // table | mlm
  MaskedLmOptions masked_lm;
  int attack_batch = 64;
  int test_limit = 0;  // 0 = whole test set
  int distance_examples = 200;
  int bench_sample = 100;
  BenchmarkOptions bench;
  std::vector<int> sweep_queue_sizes = {256, 1024, 4096};
  std::vector<std::string> study_settings = {"np+ftc", "btcl+ftc", "adcl+ftc"};

  static AttackConfig default_eval_attack();
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 1;
  DataConfig data;
  EncoderConfig model;  // vocab_size / subword id / num_classes filled from data
  // "synonym-table": whole-word token embeddings start from a fixed random
  // projection of the synonym vectors (and the tokenizer also learns the
  // table's words); "random": plain Gaussian initialization.
  std::string embedding_init = "synonym-table";
  double prior_weight = 1.0;
  TrainingConfig training;
  EvalConfig eval;

  nlohmann::json to_json() const;
  // Strict: unknown keys, wrong types and schema-version mismatches are
  // ConfigErrors naming the field path. Missing keys keep their defaults.
  static ExperimentConfig from_json(const nlohmann::json& j);
  void validate() const;
};

// Applies `ADVCL__SECTION__KEY=value` overrides (path segments lower-cased;
// values parsed as JSON when possible, else taken as strings).
void apply_env_overrides(nlohmann::json& doc, const std::map<std::string, std::string>& env);
std::map<std::string, std::string> current_environment();

// Reads the file (or starts from defaults when `path` is empty), applies
// environment overrides and binds the result.
ExperimentConfig load_experiment_config(const std::string& path,
                                        const std::map<std::string, std::string>& env = current_environment());

}  // namespace advcl
