#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advcl/attack.hpp"
#include "advcl/corpus.hpp"
#include "advcl/encoder.hpp"

namespace advcl {

// Which attacks the replacement rate averages over.
enum class ReplacementAveraging { kSuccessful, kAllAttacked };

struct ExampleOutcome {
  std::string id;
  int label = 0;
  int predicted = 0;
  bool correct = false;
  bool success = false;
  int num_words = 0;
  int replaced = 0;
  int queries = 0;
  nlohmann::json to_json() const;
};

struct RobustnessReport {
  std::string dataset_id;
  std::string setting;  // free-form label, e.g. "adcl+ftc"
  std::string attack;
  Budget budget;
  ReplacementAveraging averaging = ReplacementAveraging::kSuccessful;
  int num_examples = 0;
  int num_correct = 0;
  int num_success = 0;
  double clean_accuracy = 0.0;
  // nullopt when no example was classified correctly (undefined, not NaN).
  std::optional<double> success_rate;
  // nullopt when no attack contributes.
  std::optional<double> replacement_rate;
  std::vector<ExampleOutcome> per_example;

  nlohmann::json to_json() const;
  static RobustnessReport from_json(const nlohmann::json& j);
  // Summary line followed by one line per example.
  std::string to_jsonl() const;
  std::string table() const;
};

// Attacks every correctly classified example. `results`, when given, receives
// the attack results of the attacked examples in corpus order.
RobustnessReport evaluate_robustness(const EncoderBundle& model, const Corpus& test, const Attack& attack,
                                     ReplacementAveraging averaging = ReplacementAveraging::kSuccessful,
                                     std::vector<AttackResult>* results = nullptr);

// Fills the aggregate fields from per_example (exposed for fixtures).
void summarize(RobustnessReport& report);

struct TransferReport {
  int denominator = 0;  // examples model_dst classifies correctly
  int successes = 0;
  std::optional<double> success_rate;
  nlohmann::json to_json() const;
};

// Perturbations come from attacking model_src (clean text where model_src is
// already wrong); success when model_dst misclassifies them.
TransferReport transferability_eval(const EncoderBundle& model_src, const EncoderBundle& model_dst,
                                    const Corpus& test, const Attack& attack);

struct DistanceReport {
  double d_pos = 0.0;
  double d_neg = 0.0;
  double delta = 0.0;
  int m = 0;
  nlohmann::json to_json() const;
};

// Rows of `v` and `v_adv` are paired representations.
DistanceReport distance_report(const Mat& v, const Mat& v_adv);
// Euclidean distances on the [CLS] representation h.
DistanceReport distance_study(const EncoderBundle& model, std::span<const TokenizedExample> clean,
                              std::span<const TokenizedExample> adversarial);

struct EmbeddingRow {
  std::string id;
  std::string tag;
  int pair_id = 0;
  std::vector<double> values;
};

// CSV with header `id,tag,pair_id,v0..v{d-1}`, 17 significant digits.
std::string export_embeddings(const EncoderBundle& model, std::span<const TokenizedExample> examples,
                              std::span<const std::string> tags, std::span<const int> pair_ids);
std::vector<EmbeddingRow> parse_embeddings(const std::string& csv);

struct BenchmarkRow {
  std::string attack;
  std::string mode;  // "sequential" or "batched"
  int batch_size = 1;
  int examples = 0;
  int repeats = 0;
  double mean_seconds_per_example = 0.0;
  double sd_seconds_per_example = 0.0;  // sample standard deviation over repeats
};

struct BenchmarkOptions {
  std::vector<int> batch_sizes = {1, 16, 64};
  int repeats = 3;
  bool include_baseline = true;
};

std::vector<BenchmarkRow> speed_benchmark(const EncoderBundle& model, const SubwordModel& subwords,
                                          std::span<const TokenizedExample> sample, const AttackConfig& config,
                                          const CandidateProvider& provider, const SynonymEmbeddingTable& table,
                                          const BenchmarkOptions& options = {});
std::string benchmark_csv(const std::vector<BenchmarkRow>& rows);

}  // namespace advcl
