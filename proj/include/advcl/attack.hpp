#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advcl/corpus.hpp"
#include "advcl/encoder.hpp"
#include "advcl/synonyms.hpp"

namespace advcl {

enum class LossKind { kContrastive, kClassification };
// kSigned maximizes the signed projection onto the loss gradient; kAbsolute
// maximizes its magnitude.
enum class ProjectionRule { kSigned, kAbsolute };

struct AttackConfig {
  int max_iters = 10;             // N
  int candidate_limit = 25;       // T
  double cosine_threshold = 0.5;  // epsilon
  double budget_fraction = 0.2;
  int budget_cap = 10;  // K
  bool no_repeat = true;
  LossKind loss_kind = LossKind::kContrastive;
  ProjectionRule projection = ProjectionRule::kSigned;

  void validate() const;
  // min{K, floor(fraction * L)}
  int budget_for(int num_words) const;
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
};

// One greedy step, kept for inspection and oracle checks.
struct AttackStep {
  int target = -1;
  std::vector<int> exhausted;  // words tried this step whose filtered set was empty
  std::vector<std::string> candidates;
  std::vector<double> scores;
  int chosen = -1;
  double score_gap = 0.0;  // best minus runner-up (infinity with one candidate)
};

struct AttackResult {
  TokenizedExample perturbed;
  std::vector<int> replaced_indices;
  std::vector<std::string> original_words;  // parallel to replaced_indices
  std::vector<double> loss_trajectory;
  std::vector<AttackStep> steps;
  bool success = false;
  bool already_misclassified = false;
  bool zero_gradient = false;
  bool original_missing_from_table = false;
  int budget = 0;
  int queries = 0;

  nlohmann::json to_json(const TokenizedExample& original) const;
};

class CandidateProvider {
 public:
  virtual ~CandidateProvider() = default;
  // At most `limit` proposals to replace word `index`; never the original word.
  virtual std::vector<std::string> propose(const TokenizedExample& example, int index, int limit) const = 0;
  virtual std::string name() const = 0;
};

// Nearest neighbours in the synonym table.
class SynonymTableProvider : public CandidateProvider {
 public:
  explicit SynonymTableProvider(const SynonymEmbeddingTable& table) : table_(&table) {}
  std::vector<std::string> propose(const TokenizedExample& example, int index, int limit) const override;
  std::string name() const override { return "synonym-table"; }

 private:
  const SynonymEmbeddingTable* table_;
};

// The model's own masked-LM head: masks the word with a single [MASK] and
// ranks standalone table words by the logit of their first subword.
class MaskedLmProvider : public CandidateProvider {
 public:
  MaskedLmProvider(const EncoderBundle& model, std::shared_ptr<const SubwordModel> subwords,
                   const SynonymEmbeddingTable& table);
  std::vector<std::string> propose(const TokenizedExample& example, int index, int limit) const override;
  std::string name() const override { return "masked-lm"; }

 private:
  const EncoderBundle* model_;
  std::shared_ptr<const SubwordModel> subwords_;
  std::vector<std::string> words_;
  std::vector<int> first_piece_;
};

// Replaces word `index` by a single [MASK] position.
TokenizedExample mask_word(const TokenizedExample& example, int index);

// Non-forbidden word with the largest gradient L2 norm (ties -> smallest index).
std::optional<int> select_target_word(const Mat& per_word_grads, const std::set<int>& forbidden);

struct FilteredCandidates {
  std::vector<std::string> words;
  bool original_missing = false;
};
// Keeps candidates whose cosine to `original` is >= epsilon; candidates that
// are missing from the table (or equal the original) are dropped.
FilteredCandidates filter_candidates(const std::string& original, const std::vector<std::string>& candidates,
                                     const SynonymEmbeddingTable& table, double epsilon);

// (r . v) / ||v||; ContractError when ||v|| == 0.
double projection_score(const Eigen::Ref<const RowVec>& r, const Eigen::Ref<const RowVec>& v);

// What the attack is maximizing. Contrastive mode scores against a frozen
// snapshot of the negative queue (the clean example's projection is appended
// as the positive); classification mode uses each example's label.
struct AttackContext {
  const Mat* negatives = nullptr;
  double tau = 0.07;
};

AttackResult geometry_attack(const EncoderBundle& model, const SubwordModel& subwords,
                             const TokenizedExample& example,
                             const AttackConfig& config, const CandidateProvider& provider,
                             const SynonymEmbeddingTable& table, const AttackContext& context = {});

// Same decisions as geometry_attack, with probes and candidate encodings for
// all active examples stacked into shared passes.
std::vector<AttackResult> geometry_attack_batched(const EncoderBundle& model, const SubwordModel& subwords,
                                                  std::span<const TokenizedExample> examples,
                                                  const AttackConfig& config, const CandidateProvider& provider,
                                                  const SynonymEmbeddingTable& table,
                                                  const AttackContext& context = {});

// Control attack: swaps random words for random filtered synonyms until the
// prediction flips or the budget is spent.
AttackResult baseline_random_synonym_attack(const EncoderBundle& model, const SubwordModel& subwords,
                                            const TokenizedExample& example,
                                            const AttackConfig& config, const SynonymEmbeddingTable& table,
                                            std::uint64_t seed = 0);

struct Budget {
  double fraction = 0.0;
  int cap = 0;
  bool operator==(const Budget&) const = default;
  nlohmann::json to_json() const { return {{"fraction", fraction}, {"cap", cap}}; }
};

// Pluggable classification-mode attack used by the evaluation harness.
class Attack {
 public:
  virtual ~Attack() = default;
  virtual std::string name() const = 0;
  virtual Budget budget() const = 0;
  virtual std::vector<AttackResult> run(const EncoderBundle& model,
                                        std::span<const TokenizedExample> batch) const = 0;
};

class GeometryAttack : public Attack {
 public:
  GeometryAttack(AttackConfig config, std::shared_ptr<const SubwordModel> subwords,
                 const CandidateProvider& provider, const SynonymEmbeddingTable& table, int batch_size = 64);
  std::string name() const override { return "geometry"; }
  Budget budget() const override { return {config_.budget_fraction, config_.budget_cap}; }
  std::vector<AttackResult> run(const EncoderBundle& model, std::span<const TokenizedExample> batch) const override;
  const AttackConfig& config() const { return config_; }

 private:
  AttackConfig config_;
  std::shared_ptr<const SubwordModel> subwords_;
  const CandidateProvider* provider_;
  const SynonymEmbeddingTable* table_;
  int batch_size_;
};

class RandomSynonymAttack : public Attack {
 public:
  RandomSynonymAttack(AttackConfig config, std::shared_ptr<const SubwordModel> subwords,
                      const SynonymEmbeddingTable& table, std::uint64_t seed = 0);
  std::string name() const override { return "random-synonym"; }
  Budget budget() const override { return {config_.budget_fraction, config_.budget_cap}; }
  std::vector<AttackResult> run(const EncoderBundle& model, std::span<const TokenizedExample> batch) const override;

 private:
  AttackConfig config_;
  std::shared_ptr<const SubwordModel> subwords_;
  const SynonymEmbeddingTable* table_;
  std::uint64_t seed_;
};

// Line-JSON export, one object per result.
std::string export_attack_results(std::span<const TokenizedExample> originals,
                                  std::span<const AttackResult> results);

}  // namespace advcl
