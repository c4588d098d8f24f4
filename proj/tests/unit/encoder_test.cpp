#include <gtest/gtest.h>

#include <cmath>

#include "advcl/encoder.hpp"
#include "advcl/moco.hpp"
#include "test_util.hpp"

namespace advcl {
namespace {

using testing::make_world;
using testing::random_mat;
using testing::tiny_config;

constexpr double kStep = 1e-5;

double relative_error(double a, double b) { return std::abs(a - b) / std::max(1e-6, std::abs(a) + std::abs(b)); }

// Loss of one example with `delta` added to the input embedding of subword
// `pos` in dimension `dim`.
double loss_with_input_shift(const EncoderBundle& model, const TokenizedExample& ex, const SentenceLoss& loss,
                             int pos, int dim, double delta) {
  const std::vector<TokenizedExample> batch = {ex};
  const ForwardPass probe(model, batch, false);
  Mat shift = Mat::Zero(probe.total_positions(), model.hidden());
  shift(probe.offset(0) + 1 + pos, dim) = delta;
  const ForwardPass fp(model, batch, false, &shift);
  const auto& o = fp.outputs();
  return loss(o.h.row(0), o.z.row(0), o.logits.row(0)).value;
}

void check_input_gradients(const EncoderBundle& model, const TokenizedExample& ex, const SentenceLoss& loss) {
  const GradientProbe g = probe_gradients(model, ex, loss);
  ASSERT_EQ(g.grad_word_embeddings.rows(), ex.num_subwords());
  for (int pos = 0; pos < ex.num_subwords(); pos += 2) {
    for (int dim = 0; dim < model.hidden(); dim += 5) {
      const double fd = (loss_with_input_shift(model, ex, loss, pos, dim, kStep) -
                         loss_with_input_shift(model, ex, loss, pos, dim, -kStep)) /
                        (2 * kStep);
      EXPECT_LT(relative_error(fd, g.grad_word_embeddings(pos, dim)), 1e-5)
          << "pos " << pos << " dim " << dim << " fd " << fd << " analytic " << g.grad_word_embeddings(pos, dim);
    }
  }
}

TEST(EncoderGradients, ClassificationLossMatchesFiniteDifferences) {
  auto w = make_world();
  const EncoderBundle model(tiny_config(*w.subwords), 11);
  for (int i = 0; i < 3; ++i) {
    const auto& ex = w.corpus.examples[static_cast<std::size_t>(i)];
    check_input_gradients(model, ex, cross_entropy_loss(*ex.label));
  }
}

TEST(EncoderGradients, ContrastiveLossMatchesFiniteDifferences) {
  auto w = make_world();
  const EncoderBundle model(tiny_config(*w.subwords), 12);
  Mat keys = random_mat(6, model.proj_dim(), 5).array().tanh();
  const RowVec pos = keys.row(2);
  SentenceLoss loss = [&](const RowVec&, const RowVec& z, const RowVec&) {
    const InfoNce r = infonce(z, pos, keys, 0.07);
    LossValue lv;
    lv.value = r.loss;
    lv.d_z = r.grad_z;
    return lv;
  };
  check_input_gradients(model, w.corpus.examples[0], loss);
  check_input_gradients(model, w.corpus.examples[1], loss);
}

TEST(EncoderGradients, HiddenGradientThroughClassificationHead) {
  auto w = make_world();
  const EncoderBundle model(tiny_config(*w.subwords), 13);
  const auto& ex = w.corpus.examples[0];
  const auto& L = model.layout();
  // Independent re-implementation of the head: tanh(h W1 + b1) W2 + b2.
  auto head_loss = [&](const RowVec& h) {
    const RowVec c1 = (h * model.view(L.cls_w1) + model.view(L.cls_b1)).array().tanh().matrix();
    const RowVec logits = c1 * model.view(L.cls_w2) + model.view(L.cls_b2);
    return softmax_cross_entropy(logits, *ex.label).value;
  };
  const GradientProbe g = probe_gradients(model, ex, cross_entropy_loss(*ex.label));
  EXPECT_NEAR(head_loss(g.h), g.loss, 1e-12);
  for (int d = 0; d < model.hidden(); ++d) {
    RowVec hp = g.h, hm = g.h;
    hp(d) += kStep;
    hm(d) -= kStep;
    const double fd = (head_loss(hp) - head_loss(hm)) / (2 * kStep);
    EXPECT_LT(relative_error(fd, g.grad_h(d)), 1e-6) << d;
  }
}

TEST(EncoderGradients, ParameterGradientsMatchFiniteDifferences) {
  auto w = make_world();
  EncoderBundle model(tiny_config(*w.subwords), 14);
  const std::vector<TokenizedExample> batch(w.corpus.examples.begin(), w.corpus.examples.begin() + 3);
  auto batch_loss = [&](const EncoderBundle& m) {
    const SentenceOutputs o = encode(m, batch);
    double s = 0;
    for (int i = 0; i < 3; ++i) s += softmax_cross_entropy(o.logits.row(i), *batch[i].label).value;
    return s;
  };
  const ForwardPass fp(model, batch, true);
  Mat d_logits(3, 2);
  for (int i = 0; i < 3; ++i)
    d_logits.row(i) = softmax_cross_entropy(fp.outputs().logits.row(i), *batch[i].label).d_logits.transpose();
  std::vector<double> grads(model.params().size(), 0.0);
  fp.backward(d_logits, Mat(), nullptr, grads);

  const auto& L = model.layout();
  const std::vector<Slot> slots = {L.tok_emb, L.pos_emb, L.layers[0].wq, L.layers[0].w1, L.layers[0].ln1_g,
                                   L.lnf_b,   L.cls_w1,  L.cls_b2};
  for (const Slot& s : slots) {
    for (std::size_t k = 0; k < s.size(); k += std::max<std::size_t>(1, s.size() / 7)) {
      const std::size_t idx = s.offset + k;
      if (grads[idx] == 0.0 && s.offset == L.tok_emb.offset) continue;  // unused token rows
      const double orig = model.params()[idx];
      model.params()[idx] = orig + kStep;
      const double up = batch_loss(model);
      model.params()[idx] = orig - kStep;
      const double down = batch_loss(model);
      model.params()[idx] = orig;
      EXPECT_LT(relative_error((up - down) / (2 * kStep), grads[idx]), 1e-5) << "param " << idx;
    }
  }
}

TEST(EncoderGradients, ProjectionHeadParametersMatchFiniteDifferences) {
  auto w = make_world();
  EncoderBundle model(tiny_config(*w.subwords), 15);
  const std::vector<TokenizedExample> batch(w.corpus.examples.begin(), w.corpus.examples.begin() + 2);
  const Mat target = random_mat(2, model.proj_dim(), 3);
  auto loss = [&](const EncoderBundle& m) { return (encode(m, batch).z.array() * target.array()).sum(); };
  const ForwardPass fp(model, batch, true);
  std::vector<double> grads(model.params().size(), 0.0);
  fp.backward(Mat(), target, nullptr, grads);
  const auto& L = model.layout();
  for (const Slot& s : {L.proj_w1, L.proj_b1, L.proj_w2, L.layers[0].wv}) {
    for (std::size_t k = 0; k < s.size(); k += std::max<std::size_t>(1, s.size() / 5)) {
      const std::size_t idx = s.offset + k;
      const double orig = model.params()[idx];
      model.params()[idx] = orig + kStep;
      const double up = loss(model);
      model.params()[idx] = orig - kStep;
      const double down = loss(model);
      model.params()[idx] = orig;
      EXPECT_LT(relative_error((up - down) / (2 * kStep), grads[idx]), 1e-5) << "param " << idx;
    }
  }
}

TEST(EncoderGradients, MaskedLmHeadMatchesFiniteDifferences) {
  auto w = make_world();
  EncoderBundle model(tiny_config(*w.subwords), 16);
  const std::vector<TokenizedExample> batch(w.corpus.examples.begin(), w.corpus.examples.begin() + 2);
  const std::vector<int> rows = {1, 3};
  const std::vector<int> targets = {batch[0].subwords[0], batch[0].subwords[2]};
  auto loss = [&](const EncoderBundle& m) {
    const ForwardPass fp(m, batch, true);
    return masked_lm_loss(m, fp, rows, targets, {});
  };
  std::vector<double> grads(model.params().size(), 0.0);
  {
    const ForwardPass fp(model, batch, true);
    masked_lm_loss(model, fp, rows, targets, grads);
  }
  const auto& L = model.layout();
  for (const Slot& s : {L.mlm_w, L.mlm_b, L.mlm_bias, L.lnf_g}) {
    for (std::size_t k = 0; k < s.size(); k += std::max<std::size_t>(1, s.size() / 5)) {
      const std::size_t idx = s.offset + k;
      const double orig = model.params()[idx];
      model.params()[idx] = orig + kStep;
      const double up = loss(model);
      model.params()[idx] = orig - kStep;
      const double down = loss(model);
      model.params()[idx] = orig;
      EXPECT_LT(relative_error((up - down) / (2 * kStep), grads[idx]), 1e-5) << "param " << idx;
    }
  }
}

TEST(Encoder, StackedBatchEqualsSingleExamples) {
  auto w = make_world();
  const EncoderBundle model(tiny_config(*w.subwords), 17);
  const std::vector<TokenizedExample> batch(w.corpus.examples.begin(), w.corpus.examples.begin() + 5);
  const SentenceOutputs all = encode(model, batch);
  for (int i = 0; i < 5; ++i) {
    const SentenceOutputs one = encode(model, std::span(batch).subspan(static_cast<std::size_t>(i), 1));
    EXPECT_LT((all.h.row(i) - one.h.row(0)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((all.z.row(i) - one.z.row(0)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((all.logits.row(i) - one.logits.row(0)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Encoder, SameSeedSameParameters) {
  auto w = make_world();
  const EncoderBundle a(tiny_config(*w.subwords), 5), b(tiny_config(*w.subwords), 5), c(tiny_config(*w.subwords), 6);
  EXPECT_EQ(parameter_checksum(a), parameter_checksum(b));
  EXPECT_NE(parameter_checksum(a), parameter_checksum(c));
}

TEST(Encoder, ArgmaxTiesTowardSmallerClass) {
  RowVec v(3);
  v << 0.5, 0.7, 0.7;
  EXPECT_EQ(argmax_class(v), 1);
}

TEST(Encoder, ClassCountMismatchIsConfigError) {
  auto w = make_world();
  const EncoderBundle model(tiny_config(*w.subwords), 5);
  EXPECT_NO_THROW(require_class_count(model, 2));
  EXPECT_THROW(require_class_count(model, 3), ConfigError);
}

}  // namespace
}  // namespace advcl
