#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advcl/common.hpp"
#include "advcl/corpus.hpp"

namespace advcl {

struct EncoderConfig {
  int vocab_size = 0;
  int max_len = 128;  // positions including [CLS]
  int hidden = 64;
  int layers = 2;
  int heads = 2;
  int ffn = 128;
  int proj_hidden = 64;
  int proj_dim = 128;
  int num_classes = 2;
  std::uint64_t subword_model_id = 0;
  bool truncate = true;  // clip over-length inputs (whole words) instead of failing

  bool operator==(const EncoderConfig&) const = default;
  void validate() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

// Location of one tensor inside the flat parameter buffer (row-major).
struct Slot {
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

struct LayerSlots {
  Slot ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct ParamLayout {
  Slot tok_emb, pos_emb;
  std::vector<LayerSlots> layers;
  Slot lnf_g, lnf_b;
  Slot cls_w1, cls_b1, cls_w2, cls_b2;      // classification head c
  Slot proj_w1, proj_b1, proj_w2, proj_b2;  // projection head g
  Slot mlm_w, mlm_b, mlm_bias;              // masked-LM head (tied output embeddings)
  std::vector<std::pair<std::string, Slot>> named;
  std::size_t total = 0;

  static ParamLayout build(const EncoderConfig& cfg);
};

using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

// Encoder f, classification head c and projection head g over one flat
// parameter vector. Copying a bundle deep-copies its parameters.
class EncoderBundle {
 public:
  EncoderBundle(const EncoderConfig& config, std::uint64_t seed);
  EncoderBundle(const EncoderConfig& config, std::vector<double> params);

  const EncoderConfig& config() const { return config_; }
  const ParamLayout& layout() const { return *layout_; }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  ConstMatMap view(const Slot& s) const { return {params_.data() + s.offset, s.rows, s.cols}; }
  MatMap view(const Slot& s) { return {params_.data() + s.offset, s.rows, s.cols}; }

  int hidden() const { return config_.hidden; }
  int proj_dim() const { return config_.proj_dim; }
  int num_classes() const { return config_.num_classes; }

 private:
  EncoderConfig config_;
  std::shared_ptr<const ParamLayout> layout_;
  ParamVec params_;
};

EncoderBundle clone_parameters(const EncoderBundle& src);
// SHA-256 over the architecture and raw parameter bytes.
std::string parameter_checksum(const EncoderBundle& bundle);
// Throws ConfigError unless both bundles share an architecture.
void require_same_architecture(const EncoderBundle& a, const EncoderBundle& b);

// Drops trailing words so [CLS] + subwords fits in `max_len` positions.
TokenizedExample clip_to_length(const TokenizedExample& example, int max_len);

struct SentenceOutputs {
  Mat h;       // batch x hidden, [CLS] position of the final layer
  Mat z;       // batch x proj_dim
  Mat logits;  // batch x num_classes
};

struct BackwardResult {
  Mat d_input;  // total_positions x hidden; gradient w.r.t. summed input embeddings
  Mat d_h;      // batch x hidden
};

// One stacked forward pass over a batch of variable-length sequences. With
// `keep_cache` the pass retains activations for backward().
class ForwardPass {
 public:
  ForwardPass(const EncoderBundle& bundle, std::span<const TokenizedExample> batch, bool keep_cache,
              const Mat* input_delta = nullptr);
  ~ForwardPass();
  ForwardPass(ForwardPass&&) noexcept;
  ForwardPass& operator=(ForwardPass&&) noexcept;

  const SentenceOutputs& outputs() const;
  const Mat& final_hidden() const;  // total_positions x hidden
  int batch_size() const;
  int offset(int seq) const;  // row of the sequence's [CLS] position
  int length(int seq) const;  // positions including [CLS]
  int total_positions() const;

  // Empty matrices stand for zero upstream gradients. `d_final` seeds extra
  // gradient on final-layer states (masked-LM). Parameter gradients are
  // accumulated into `grads` unless it is empty.
  BackwardResult backward(const Mat& d_logits, const Mat& d_z, const Mat* d_final,
                          std::span<double> grads) const;

 private:
  struct State;
  std::unique_ptr<State> s_;
};

SentenceOutputs encode(const EncoderBundle& bundle, std::span<const TokenizedExample> batch);

struct Classification {
  Mat logits;
  std::vector<int> predicted;
};

// Argmax with ties broken toward the smaller class id.
int argmax_class(const Eigen::Ref<const RowVec>& logits);
Classification classify(const EncoderBundle& bundle, std::span<const TokenizedExample> batch);
// Throws ConfigError when the head size disagrees with `num_classes`.
void require_class_count(const EncoderBundle& bundle, int num_classes);

// Differentiable scalar functional of one sentence's outputs. Empty gradient
// vectors mean zero.
struct LossValue {
  double value = 0.0;
  Vec d_h;
  Vec d_z;
  Vec d_logits;
};
using SentenceLoss =
    std::function<LossValue(const RowVec& h, const RowVec& z, const RowVec& logits)>;

struct GradientProbe {
  double loss = 0.0;
  RowVec h, z, logits;
  Vec grad_z;                // direct dL/dz
  Vec grad_h;                // total dL/dh through both heads
  Mat grad_word_embeddings;  // one row per subword (no [CLS])
};

GradientProbe probe_gradients(const EncoderBundle& bundle, const TokenizedExample& example,
                              const SentenceLoss& loss);
std::vector<GradientProbe> probe_gradients_batch(const EncoderBundle& bundle,
                                                 std::span<const TokenizedExample> batch,
                                                 std::span<const SentenceLoss> losses);

// Masked-LM head over rows of final-layer states: gelu(x W + b) E^T + bias,
// with E the (tied) token embeddings. Returns rows x vocab logits.
Mat masked_lm_logits(const EncoderBundle& bundle, const Mat& states);

// Mean masked-LM cross-entropy at final-state `rows` of `fp` against subword
// `targets`. Parameter gradients are accumulated into `grads` unless empty.
double masked_lm_loss(const EncoderBundle& bundle, const ForwardPass& fp, const std::vector<int>& rows,
                      const std::vector<int>& targets, std::span<double> grads);

// Stock losses.
SentenceLoss cross_entropy_loss(int label);
LossValue softmax_cross_entropy(const RowVec& logits, int label);

}  // namespace advcl
