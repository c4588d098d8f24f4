#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advcl/attack.hpp"
#include "advcl/checkpoint.hpp"
#include "advcl/corpus.hpp"
#include "advcl/encoder.hpp"
#include "advcl/moco.hpp"
#include "advcl/optim.hpp"
#include "advcl/synonyms.hpp"

namespace advcl {

// NP = no contrastive pretraining, BTCL = back-translation positives,
// ADCL = geometry-attack positives.
enum class PretrainScheme { kNone, kBackTranslation, kAdversarial };
// FTC = clean finetuning, ADV = adversarial finetuning.
enum class FinetuneScheme { kClean, kAdversarial };

std::string pretrain_scheme_name(PretrainScheme s);
PretrainScheme parse_pretrain_scheme(const std::string& s);
std::string finetune_scheme_name(FinetuneScheme s);
FinetuneScheme parse_finetune_scheme(const std::string& s);

struct ContrastiveOptions {
  int steps = 2000;
  int batch_size = 32;
  double learning_rate = 5e-4;
  int warmup_steps = 0;
  double tau = 0.07;
  double momentum = 0.999;
  int queue_size = 4096;
};

struct FinetuneOptions {
  int epochs = 3;  // for ADV the first epoch is clean
  int batch_size = 32;
  double learning_rate = 2e-4;
  int warmup_steps = 0;
  // Wall-clock limit for one batch's attacks; 0 disables. A batch over the
  // limit trains on its clean rows only.
  double attack_timeout_s = 0.0;
};

struct BackTranslationOptions {
  double swap_rate = 0.15;
  double cosine_threshold = 0.5;
  int candidate_limit = 10;
  // Words that must never change or move (class markers of the synthetic corpus).
  std::function<bool(std::string_view)> is_protected;
  // Words eligible for local reordering.
  std::vector<std::string> function_words;
};

struct TrainingConfig {
  PretrainScheme pretrain = PretrainScheme::kAdversarial;
  FinetuneScheme finetune = FinetuneScheme::kClean;
  std::uint64_t seed = 1;
  ContrastiveOptions contrastive;
  FinetuneOptions finetuning;
  AttackConfig pretrain_attack = default_pretrain_attack();
  AttackConfig adv_attack = default_adv_attack();
  BackTranslationOptions back_translation;
  AdamOptions adam;

  static AttackConfig default_pretrain_attack();
  static AttackConfig default_adv_attack();
  void validate() const;
};

// Paraphrase stand-in for back-translation: seeded synonym swaps on
// `swap_rate` of the words plus one local function-word reordering.
TokenizedExample back_translation_standin(const TokenizedExample& example, std::uint64_t seed,
                                          const SubwordModel& subwords, const SynonymEmbeddingTable& table,
                                          const BackTranslationOptions& options, int max_len = 128);

struct TransformContext {
  const EncoderBundle* query = nullptr;
  const Mat* negatives = nullptr;  // queue snapshot
  double tau = 0.07;
  std::uint64_t seed = 0;
};

// Produces one positive view per example; nullopt marks a failure, which the
// trainer replaces by the example itself.
class TransformFn {
 public:
  virtual ~TransformFn() = default;
  virtual std::string name() const = 0;
  virtual std::vector<std::optional<TokenizedExample>> apply(std::span<const TokenizedExample> batch,
                                                             const TransformContext& ctx) const = 0;
};

class IdentityTransform : public TransformFn {
 public:
  std::string name() const override { return "identity"; }
  std::vector<std::optional<TokenizedExample>> apply(std::span<const TokenizedExample> batch,
                                                     const TransformContext& ctx) const override;
};

class BackTranslationTransform : public TransformFn {
 public:
  BackTranslationTransform(std::shared_ptr<const SubwordModel> subwords, const SynonymEmbeddingTable& table,
                           BackTranslationOptions options, int max_len);
  std::string name() const override { return "back-translation"; }
  std::vector<std::optional<TokenizedExample>> apply(std::span<const TokenizedExample> batch,
                                                     const TransformContext& ctx) const override;

 private:
  std::shared_ptr<const SubwordModel> subwords_;
  const SynonymEmbeddingTable* table_;
  BackTranslationOptions options_;
  int max_len_;
};

// Contrastive-mode geometry attack against the current query encoder and a
// snapshot of the queue.
class GeometryTransform : public TransformFn {
 public:
  GeometryTransform(AttackConfig config, std::shared_ptr<const SubwordModel> subwords,
                    const CandidateProvider& provider, const SynonymEmbeddingTable& table);
  std::string name() const override { return "geometry"; }
  std::vector<std::optional<TokenizedExample>> apply(std::span<const TokenizedExample> batch,
                                                     const TransformContext& ctx) const override;

 private:
  AttackConfig config_;
  std::shared_ptr<const SubwordModel> subwords_;
  const CandidateProvider* provider_;
  const SynonymEmbeddingTable* table_;
};

struct PretrainStep {
  std::int64_t step = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
  int transform_failures = 0;
  int unchanged_positives = 0;
  nlohmann::json to_json() const;
};

// MoCo-style trainer. All randomness derives from (seed, step), so a saved
// state resumes bit-exactly.
class ContrastivePretrainer {
 public:
  ContrastivePretrainer(const TrainingConfig& config, const Corpus& corpus, const TransformFn& transform,
                        const EncoderBundle& init);
  PretrainStep step();
  std::vector<PretrainStep> run(std::int64_t steps);
  std::int64_t steps_done() const { return adam_.steps(); }
  const MomentumPair& pair() const { return pair_; }
  const NegativeQueue& queue() const { return queue_; }
  // Full training state (both encoders, optimizer moments, queue, step).
  Checkpoint save_state(std::shared_ptr<const SubwordModel> subwords) const;
  static ContrastivePretrainer resume(const TrainingConfig& config, const Corpus& corpus,
                                      const TransformFn& transform, const Checkpoint& state);

 private:
  std::vector<TokenizedExample> next_batch(std::int64_t step) const;

  TrainingConfig config_;
  std::vector<TokenizedExample> examples_;  // labels stripped
  const TransformFn* transform_;
  MomentumPair pair_;
  NegativeQueue queue_;
  Adam adam_;
  LinearSchedule schedule_;
};

struct PretrainResult {
  EncoderBundle model;  // the query encoder
  std::vector<PretrainStep> history;
  int transform_failures = 0;
};

// NP returns `init` untouched.
PretrainResult pretrain_contrastive(const TrainingConfig& config, const Corpus& corpus,
                                    const TransformFn& transform, const EncoderBundle& init);

struct FinetuneEpoch {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // on the clean rows seen this epoch
  std::int64_t adversarial_rows = 0;
  int timeouts = 0;
  nlohmann::json to_json() const;
};

struct FinetuneResult {
  EncoderBundle model;
  std::vector<FinetuneEpoch> history;
};

FinetuneResult finetune_clean(const EncoderBundle& init, const Corpus& labeled, const TrainingConfig& config);

// Epoch 1 trains on clean rows; later epochs append each batch's attacked
// rows (every row the attack perturbed) to the batch.
FinetuneResult finetune_adversarial(const EncoderBundle& init, const Corpus& labeled, const TrainingConfig& config,
                                    const SubwordModel& subwords, const CandidateProvider& provider,
                                    const SynonymEmbeddingTable& table);

// Clean examples followed by one attacked copy of each (ids suffixed ":adv").
Corpus pregenerate_adversarial_dataset(const EncoderBundle& model, const Corpus& labeled, const AttackConfig& attack,
                                       const CandidateProvider& provider, const SynonymEmbeddingTable& table,
                                       int batch_size = 64);

struct MaskedLmOptions {
  int steps = 300;
  int batch_size = 32;
  double learning_rate = 3e-3;
  std::uint64_t seed = 7;
};

// Fits only the masked-LM head (the encoder and tied embeddings stay fixed, so
// sentence outputs are unchanged). Returns the final mean loss.
double fit_masked_lm_head(EncoderBundle& model, const Corpus& corpus, const MaskedLmOptions& options);

}  // namespace advcl
