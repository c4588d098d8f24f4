#include "advcl/encoder.hpp"

#include <cmath>
#include <cstring>
#include <random>

namespace advcl {
namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

using RowMap = Eigen::Map<RowVec>;
using ConstRowMap = Eigen::Map<const RowVec>;

ConstRowMap row_view(std::span<const double> p, const Slot& s) {
  return {p.data() + s.offset, static_cast<Eigen::Index>(s.size())};
}

struct LnCache {
  Mat xhat;
  Vec rstd;
};

Mat layer_norm(const Mat& x, const ConstRowMap& gamma, const ConstRowMap& beta, LnCache* cache) {
  const Vec mean = x.rowwise().mean();
  Mat centered = x.colwise() - mean;
  const Vec var = centered.array().square().rowwise().mean();
  const Vec rstd = (var.array() + kLnEps).rsqrt();
  centered.array().colwise() *= rstd.array();
  Mat y = (centered.array().rowwise() * gamma.array()).rowwise() + beta.array();
  if (cache) {
    cache->xhat = std::move(centered);
    cache->rstd = rstd;
  }
  return y;
}

Mat layer_norm_backward(const Mat& dy, const LnCache& c, const ConstRowMap& gamma, double* dgamma,
                        double* dbeta) {
  if (dgamma) {
    RowMap(dgamma, gamma.size()) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    RowMap(dbeta, gamma.size()) += dy.colwise().sum();
  }
  const Mat dxhat = dy.array().rowwise() * gamma.array();
  const Vec m1 = dxhat.rowwise().mean();
  const Vec m2 = (dxhat.array() * c.xhat.array()).rowwise().mean();
  Mat dx = dxhat;
  dx.colwise() -= m1;
  dx -= (c.xhat.array().colwise() * m2.array()).matrix();
  dx.array().colwise() *= c.rstd.array();
  return dx;
}

Mat linear(const Mat& x, const ConstMatMap& w, const ConstRowMap& b) {
  Mat y(x.rows(), w.cols());
  y.noalias() = x * w;
  y.rowwise() += b;
  return y;
}

// dY -> dX, accumulating dW and db when `grads` is non-empty.
Mat linear_backward(const Mat& x, const Mat& dy, const ConstMatMap& w, std::span<double> grads,
                    const Slot& ws, const Slot& bs, bool need_dx = true) {
  if (!grads.empty()) {
    MatMap(grads.data() + ws.offset, ws.rows, ws.cols).noalias() += x.transpose() * dy;
    RowMap(grads.data() + bs.offset, static_cast<Eigen::Index>(bs.size())) += dy.colwise().sum();
  }
  if (!need_dx) return {};
  Mat dx(dy.rows(), w.rows());
  dx.noalias() = dy * w.transpose();
  return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---------------------------------------------------------------------------
// Configuration and layout

void EncoderConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("encoder config: " + m); };
  if (vocab_size <= SubwordModel::kNumSpecial) fail("vocab_size too small");
  if (max_len < 2) fail("max_len must be >= 2");
  if (hidden < 1 || layers < 1 || heads < 1 || ffn < 1) fail("sizes must be positive");
  if (hidden % heads != 0) fail("hidden must be divisible by heads");
  if (proj_hidden < 1 || proj_dim < 1) fail("projection sizes must be positive");
  if (num_classes < 1) fail("num_classes must be positive");
}

nlohmann::json EncoderConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"max_len", max_len},       {"hidden", hidden},
          {"layers", layers},         {"heads", heads},           {"ffn", ffn},
          {"proj_hidden", proj_hidden}, {"proj_dim", proj_dim},   {"num_classes", num_classes},
          {"subword_model_id", hex64(subword_model_id)},          {"truncate", truncate}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ffn = j.at("ffn").get<int>();
  c.proj_hidden = j.at("proj_hidden").get<int>();
  c.proj_dim = j.at("proj_dim").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.subword_model_id = std::stoull(j.at("subword_model_id").get<std::string>(), nullptr, 16);
  c.truncate = j.value("truncate", true);
  return c;
}

ParamLayout ParamLayout::build(const EncoderConfig& cfg) {
  ParamLayout L;
  auto add = [&L](const std::string& name, int rows, int cols) {
    Slot s{L.total, rows, cols};
    L.total += s.size();
    L.named.emplace_back(name, s);
    return s;
  };
  const int d = cfg.hidden;
  L.tok_emb = add("tok_emb", cfg.vocab_size, d);
  L.pos_emb = add("pos_emb", cfg.max_len, d);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerSlots s;
    s.ln1_g = add(p + "ln1_g", 1, d);
    s.ln1_b = add(p + "ln1_b", 1, d);
    s.wq = add(p + "wq", d, d);
    s.bq = add(p + "bq", 1, d);
    s.wk = add(p + "wk", d, d);
    s.bk = add(p + "bk", 1, d);
    s.wv = add(p + "wv", d, d);
    s.bv = add(p + "bv", 1, d);
    s.wo = add(p + "wo", d, d);
    s.bo = add(p + "bo", 1, d);
    s.ln2_g = add(p + "ln2_g", 1, d);
    s.ln2_b = add(p + "ln2_b", 1, d);
    s.w1 = add(p + "w1", d, cfg.ffn);
    s.b1 = add(p + "b1", 1, cfg.ffn);
    s.w2 = add(p + "w2", cfg.ffn, d);
    s.b2 = add(p + "b2", 1, d);
    L.layers.push_back(s);
  }
  L.lnf_g = add("lnf_g", 1, d);
  L.lnf_b = add("lnf_b", 1, d);
  L.cls_w1 = add("cls_w1", d, d);
  L.cls_b1 = add("cls_b1", 1, d);
  L.cls_w2 = add("cls_w2", d, cfg.num_classes);
  L.cls_b2 = add("cls_b2", 1, cfg.num_classes);
  L.proj_w1 = add("proj_w1", d, cfg.proj_hidden);
  L.proj_b1 = add("proj_b1", 1, cfg.proj_hidden);
  L.proj_w2 = add("proj_w2", cfg.proj_hidden, cfg.proj_dim);
  L.proj_b2 = add("proj_b2", 1, cfg.proj_dim);
  L.mlm_w = add("mlm_w", d, d);
  L.mlm_b = add("mlm_b", 1, d);
  L.mlm_bias = add("mlm_bias", 1, cfg.vocab_size);
  return L;
}

// ---------------------------------------------------------------------------
// Bundle

EncoderBundle::EncoderBundle(const EncoderConfig& config, std::uint64_t seed)
    : config_(config), layout_(std::make_shared<const ParamLayout>(ParamLayout::build(config))) {
  config_.validate();
  params_.assign(layout_->total, 0.0);
  std::mt19937_64 rng(mix_seed(seed, "encoder-init"));
  auto normal = [&](const Slot& s, double stddev) {
    std::normal_distribution<double> g(0.0, stddev);
    for (std::size_t i = 0; i < s.size(); ++i) params_[s.offset + i] = g(rng);
  };
  auto ones = [&](const Slot& s) { std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(), 1.0); };
  const double d = config_.hidden;
  const double residual_scale = 1.0 / std::sqrt(2.0 * config_.layers);
  normal(layout_->tok_emb, 0.1);
  normal(layout_->pos_emb, 0.02);
  for (const auto& l : layout_->layers) {
    ones(l.ln1_g);
    ones(l.ln2_g);
    normal(l.wq, 1.0 / std::sqrt(d));
    normal(l.wk, 1.0 / std::sqrt(d));
    normal(l.wv, 1.0 / std::sqrt(d));
    normal(l.wo, residual_scale / std::sqrt(d));
    normal(l.w1, 1.0 / std::sqrt(d));
    normal(l.w2, residual_scale / std::sqrt(static_cast<double>(config_.ffn)));
  }
  ones(layout_->lnf_g);
  normal(layout_->cls_w1, 1.0 / std::sqrt(d));
  normal(layout_->cls_w2, 1.0 / std::sqrt(d));
  normal(layout_->proj_w1, 1.0 / std::sqrt(d));
  normal(layout_->proj_w2, 1.0 / std::sqrt(static_cast<double>(config_.proj_hidden)));
  normal(layout_->mlm_w, 1.0 / std::sqrt(d));
}

EncoderBundle::EncoderBundle(const EncoderConfig& config, std::vector<double> params)
    : config_(config),
      layout_(std::make_shared<const ParamLayout>(ParamLayout::build(config))),
      params_(params.begin(), params.end()) {
  config_.validate();
  if (params_.size() != layout_->total) {
    throw ConfigError("parameter count " + std::to_string(params_.size()) +
                      " does not match architecture (" + std::to_string(layout_->total) + ")");
  }
}

EncoderBundle clone_parameters(const EncoderBundle& src) { return src; }

std::string parameter_checksum(const EncoderBundle& bundle) {
  std::string bytes = bundle.config().to_json().dump();
  const auto p = bundle.params();
  bytes.append(reinterpret_cast<const char*>(p.data()), p.size() * sizeof(double));
  return sha256_hex(bytes);
}

void require_same_architecture(const EncoderBundle& a, const EncoderBundle& b) {
  if (!(a.config() == b.config())) throw ConfigError("encoder architectures differ");
}

TokenizedExample clip_to_length(const TokenizedExample& example, int max_len) {
  if (example.num_subwords() + 1 <= max_len) return example;
  TokenizedExample out = example;
  const int limit = max_len - 1;
  while (!out.spans.empty() && out.spans.back().end > limit) {
    out.spans.pop_back();
    out.words.pop_back();
  }
  out.subwords.resize(out.spans.empty() ? 0 : static_cast<std::size_t>(out.spans.back().end));
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct LayerCache {
  LnCache ln1;
  Mat a, q, k, v;
  std::vector<Mat> attn;  // [seq * heads + head], n x n
  Mat o;
  LnCache ln2;
  Mat b, u, g;
};

struct ForwardPass::State {
  const EncoderBundle* bundle = nullptr;
  bool keep = false;
  std::vector<std::vector<int>> ids;  // [CLS] + subwords per sequence
  std::vector<int> offsets;
  int total = 0;
  std::vector<LayerCache> layers;
  LnCache lnf;
  Mat final_hidden;
  Mat c1;  // tanh hidden of the classification head
  Mat p1;  // sigmoid hidden of the projection head
  SentenceOutputs out;
};

ForwardPass::~ForwardPass() = default;
ForwardPass::ForwardPass(ForwardPass&&) noexcept = default;
ForwardPass& ForwardPass::operator=(ForwardPass&&) noexcept = default;

ForwardPass::ForwardPass(const EncoderBundle& bundle, std::span<const TokenizedExample> batch,
                         bool keep_cache, const Mat* input_delta)
    : s_(std::make_unique<State>()) {
  const auto& cfg = bundle.config();
  const auto& L = bundle.layout();
  const auto P = bundle.params();
  State& s = *s_;
  s.bundle = &bundle;
  s.keep = keep_cache;
  if (batch.empty()) throw ContractError("encode: empty batch");
  for (const auto& ex : batch) {
    if (ex.num_subwords() + 1 > cfg.max_len && !cfg.truncate) {
      throw ContractError("example " + ex.id + " exceeds max_len " + std::to_string(cfg.max_len));
    }
    std::vector<int> ids;
    ids.reserve(static_cast<std::size_t>(ex.num_subwords()) + 1);
    ids.push_back(SubwordModel::kCls);
    const TokenizedExample clipped = clip_to_length(ex, cfg.max_len);
    for (int t : clipped.subwords) {
      if (t < 0 || t >= cfg.vocab_size) throw ContractError("token id out of range in " + ex.id);
      ids.push_back(t);
    }
    s.offsets.push_back(s.total);
    s.total += static_cast<int>(ids.size());
    s.ids.push_back(std::move(ids));
  }

  const int d = cfg.hidden;
  const int dh = d / cfg.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto tok = bundle.view(L.tok_emb);
  const auto pos = bundle.view(L.pos_emb);

  Mat x(s.total, d);
  for (std::size_t q = 0; q < s.ids.size(); ++q) {
    for (std::size_t p = 0; p < s.ids[q].size(); ++p) {
      x.row(s.offsets[q] + static_cast<int>(p)) = tok.row(s.ids[q][p]) + pos.row(static_cast<int>(p));
    }
  }
  if (input_delta) {
    if (input_delta->rows() != s.total || input_delta->cols() != d) {
      throw ContractError("input delta shape mismatch");
    }
    x += *input_delta;
  }

  for (const auto& ls : L.layers) {
    LayerCache c;
    LayerCache* cp = keep_cache ? &c : nullptr;
    Mat a = layer_norm(x, row_view(P, ls.ln1_g), row_view(P, ls.ln1_b), cp ? &c.ln1 : nullptr);
    Mat q = linear(a, bundle.view(ls.wq), row_view(P, ls.bq));
    Mat k = linear(a, bundle.view(ls.wk), row_view(P, ls.bk));
    Mat v = linear(a, bundle.view(ls.wv), row_view(P, ls.bv));
    Mat o(s.total, d);
    for (std::size_t sq = 0; sq < s.ids.size(); ++sq) {
      const int off = s.offsets[sq];
      const int n = static_cast<int>(s.ids[sq].size());
      for (int h = 0; h < cfg.heads; ++h) {
        Mat sc(n, n);
        sc.noalias() = q.block(off, h * dh, n, dh) * k.block(off, h * dh, n, dh).transpose();
        sc *= scale;
        const Vec mx = sc.rowwise().maxCoeff();
        sc = (sc.colwise() - mx).array().exp();
        const Vec sum = sc.rowwise().sum();
        sc.array().colwise() /= sum.array();
        o.block(off, h * dh, n, dh).noalias() = sc * v.block(off, h * dh, n, dh);
        if (cp) c.attn.push_back(std::move(sc));
      }
    }
    Mat y = linear(o, bundle.view(ls.wo), row_view(P, ls.bo));
    x += y;
    Mat b = layer_norm(x, row_view(P, ls.ln2_g), row_view(P, ls.ln2_b), cp ? &c.ln2 : nullptr);
    Mat u = linear(b, bundle.view(ls.w1), row_view(P, ls.b1));
    Mat g = u.unaryExpr([](double t) { return gelu(t); });
    Mat f = linear(g, bundle.view(ls.w2), row_view(P, ls.b2));
    if (cp) {
      c.a = std::move(a);
      c.q = std::move(q);
      c.k = std::move(k);
      c.v = std::move(v);
      c.o = std::move(o);
      c.b = std::move(b);
      c.u = std::move(u);
      c.g = std::move(g);
      s.layers.push_back(std::move(c));
    }
    x += f;
  }
  s.final_hidden = layer_norm(x, row_view(P, L.lnf_g), row_view(P, L.lnf_b), keep_cache ? &s.lnf : nullptr);

  const int B = static_cast<int>(s.ids.size());
  Mat H(B, d);
  for (int i = 0; i < B; ++i) H.row(i) = s.final_hidden.row(s.offsets[static_cast<std::size_t>(i)]);
  s.c1 = linear(H, bundle.view(L.cls_w1), row_view(P, L.cls_b1)).array().tanh();
  s.out.logits = linear(s.c1, bundle.view(L.cls_w2), row_view(P, L.cls_b2));
  s.p1 = linear(H, bundle.view(L.proj_w1), row_view(P, L.proj_b1)).unaryExpr([](double t) { return sigmoid(t); });
  s.out.z = linear(s.p1, bundle.view(L.proj_w2), row_view(P, L.proj_b2)).array().tanh();
  s.out.h = std::move(H);
}

const SentenceOutputs& ForwardPass::outputs() const { return s_->out; }
const Mat& ForwardPass::final_hidden() const { return s_->final_hidden; }
int ForwardPass::batch_size() const { return static_cast<int>(s_->ids.size()); }
int ForwardPass::offset(int seq) const { return s_->offsets.at(static_cast<std::size_t>(seq)); }
int ForwardPass::length(int seq) const { return static_cast<int>(s_->ids.at(static_cast<std::size_t>(seq)).size()); }
int ForwardPass::total_positions() const { return s_->total; }

BackwardResult ForwardPass::backward(const Mat& d_logits, const Mat& d_z, const Mat* d_final,
                                     std::span<double> grads) const {
  const State& s = *s_;
  if (!s.keep) throw ContractError("backward() needs a pass built with keep_cache");
  const EncoderBundle& bundle = *s.bundle;
  const auto& cfg = bundle.config();
  const auto& L = bundle.layout();
  const auto P = bundle.params();
  const bool want = !grads.empty();
  if (want && grads.size() != P.size()) throw ContractError("gradient buffer size mismatch");
  const int B = batch_size();
  const int d = cfg.hidden;
  const int dh = d / cfg.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Mat& H = s.out.h;

  Mat dH = Mat::Zero(B, d);
  if (d_logits.size() > 0) {
    if (d_logits.rows() != B || d_logits.cols() != cfg.num_classes) throw ContractError("d_logits shape");
    Mat dc1 = linear_backward(s.c1, d_logits, bundle.view(L.cls_w2), grads, L.cls_w2, L.cls_b2);
    dc1.array() *= 1.0 - s.c1.array().square();
    dH += linear_backward(H, dc1, bundle.view(L.cls_w1), grads, L.cls_w1, L.cls_b1);
  }
  if (d_z.size() > 0) {
    if (d_z.rows() != B || d_z.cols() != cfg.proj_dim) throw ContractError("d_z shape");
    Mat dzpre = d_z.array() * (1.0 - s.out.z.array().square());
    Mat dp1 = linear_backward(s.p1, dzpre, bundle.view(L.proj_w2), grads, L.proj_w2, L.proj_b2);
    dp1.array() *= s.p1.array() * (1.0 - s.p1.array());
    dH += linear_backward(H, dp1, bundle.view(L.proj_w1), grads, L.proj_w1, L.proj_b1);
  }

  Mat dx = d_final ? *d_final : Mat::Zero(s.total, d);
  if (dx.rows() != s.total || dx.cols() != d) throw ContractError("d_final shape");
  for (int i = 0; i < B; ++i) dx.row(s.offsets[static_cast<std::size_t>(i)]) += dH.row(i);
  dx = layer_norm_backward(dx, s.lnf, row_view(P, L.lnf_g), want ? grads.data() + L.lnf_g.offset : nullptr,
                           want ? grads.data() + L.lnf_b.offset : nullptr);

  for (int li = static_cast<int>(L.layers.size()) - 1; li >= 0; --li) {
    const LayerSlots& ls = L.layers[static_cast<std::size_t>(li)];
    const LayerCache& c = s.layers[static_cast<std::size_t>(li)];
    // feed-forward branch
    Mat dg = linear_backward(c.g, dx, bundle.view(ls.w2), grads, ls.w2, ls.b2);
    Mat du = dg.array() * c.u.unaryExpr([](double t) { return gelu_grad(t); }).array();
    Mat db = linear_backward(c.b, du, bundle.view(ls.w1), grads, ls.w1, ls.b1);
    dx += layer_norm_backward(db, c.ln2, row_view(P, ls.ln2_g), want ? grads.data() + ls.ln2_g.offset : nullptr,
                              want ? grads.data() + ls.ln2_b.offset : nullptr);
    // attention branch
    Mat d_o = linear_backward(c.o, dx, bundle.view(ls.wo), grads, ls.wo, ls.bo);
    Mat dq(s.total, d), dk(s.total, d), dv(s.total, d);
    for (std::size_t sq = 0; sq < s.ids.size(); ++sq) {
      const int off = s.offsets[sq];
      const int n = static_cast<int>(s.ids[sq].size());
      for (int h = 0; h < cfg.heads; ++h) {
        const Mat& A = c.attn[sq * static_cast<std::size_t>(cfg.heads) + static_cast<std::size_t>(h)];
        const auto dO = d_o.block(off, h * dh, n, dh);
        Mat dA(n, n);
        dA.noalias() = dO * c.v.block(off, h * dh, n, dh).transpose();
        dv.block(off, h * dh, n, dh).noalias() = A.transpose() * dO;
        const Vec rs = (dA.array() * A.array()).rowwise().sum();
        Mat dS = A.array() * (dA.colwise() - rs).array();
        dS *= scale;
        dq.block(off, h * dh, n, dh).noalias() = dS * c.k.block(off, h * dh, n, dh);
        dk.block(off, h * dh, n, dh).noalias() = dS.transpose() * c.q.block(off, h * dh, n, dh);
      }
    }
    Mat da = linear_backward(c.a, dq, bundle.view(ls.wq), grads, ls.wq, ls.bq);
    da += linear_backward(c.a, dk, bundle.view(ls.wk), grads, ls.wk, ls.bk);
    da += linear_backward(c.a, dv, bundle.view(ls.wv), grads, ls.wv, ls.bv);
    dx += layer_norm_backward(da, c.ln1, row_view(P, ls.ln1_g), want ? grads.data() + ls.ln1_g.offset : nullptr,
                              want ? grads.data() + ls.ln1_b.offset : nullptr);
  }

  if (want) {
    MatMap gtok(grads.data() + L.tok_emb.offset, L.tok_emb.rows, L.tok_emb.cols);
    MatMap gpos(grads.data() + L.pos_emb.offset, L.pos_emb.rows, L.pos_emb.cols);
    for (std::size_t sq = 0; sq < s.ids.size(); ++sq) {
      for (std::size_t p = 0; p < s.ids[sq].size(); ++p) {
        const int row = s.offsets[sq] + static_cast<int>(p);
        gtok.row(s.ids[sq][p]) += dx.row(row);
        gpos.row(static_cast<int>(p)) += dx.row(row);
      }
    }
  }
  return {std::move(dx), std::move(dH)};
}

// ---------------------------------------------------------------------------
// Public operations

SentenceOutputs encode(const EncoderBundle& bundle, std::span<const TokenizedExample> batch) {
  ForwardPass fp(bundle, batch, false);
  return fp.outputs();
}

int argmax_class(const Eigen::Ref<const RowVec>& logits) {
  int best = 0;
  for (int c = 1; c < logits.size(); ++c) {
    if (logits(c) > logits(best)) best = c;
  }
  return best;
}

Classification classify(const EncoderBundle& bundle, std::span<const TokenizedExample> batch) {
  for (const auto& ex : batch) {
    if (ex.label && *ex.label >= bundle.num_classes()) {
      throw ConfigError("example " + ex.id + " has label " + std::to_string(*ex.label) +
                        " but the classification head has " + std::to_string(bundle.num_classes()) +
                        " classes");
    }
  }
  Classification out;
  out.logits = encode(bundle, batch).logits;
  out.predicted.reserve(static_cast<std::size_t>(out.logits.rows()));
  for (Eigen::Index i = 0; i < out.logits.rows(); ++i) out.predicted.push_back(argmax_class(out.logits.row(i)));
  return out;
}

void require_class_count(const EncoderBundle& bundle, int num_classes) {
  if (bundle.num_classes() != num_classes) {
    throw ConfigError("classification head has " + std::to_string(bundle.num_classes()) +
                      " classes, corpus has " + std::to_string(num_classes));
  }
}

std::vector<GradientProbe> probe_gradients_batch(const EncoderBundle& bundle,
                                                 std::span<const TokenizedExample> batch,
                                                 std::span<const SentenceLoss> losses) {
  if (losses.size() != batch.size()) throw ContractError("probe: one loss per example required");
  ForwardPass fp(bundle, batch, true);
  const auto& out = fp.outputs();
  const int B = fp.batch_size();
  Mat d_logits = Mat::Zero(B, bundle.num_classes());
  Mat d_z = Mat::Zero(B, bundle.proj_dim());
  Mat d_final = Mat::Zero(fp.total_positions(), bundle.hidden());
  std::vector<GradientProbe> probes(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    GradientProbe& p = probes[ui];
    p.h = out.h.row(i);
    p.z = out.z.row(i);
    p.logits = out.logits.row(i);
    LossValue lv = losses[ui](p.h, p.z, p.logits);
    if (!std::isfinite(lv.value)) {
      throw NumericError("non-finite loss for example " + batch[ui].id);
    }
    p.loss = lv.value;
    if (lv.d_logits.size() > 0) d_logits.row(i) = lv.d_logits.transpose();
    if (lv.d_z.size() > 0) d_z.row(i) = lv.d_z.transpose();
    if (lv.d_h.size() > 0) d_final.row(fp.offset(i)) = lv.d_h.transpose();
    p.grad_z = d_z.row(i).transpose();
  }
  const BackwardResult br = fp.backward(d_logits, d_z, &d_final, {});
  for (int i = 0; i < B; ++i) {
    GradientProbe& p = probes[static_cast<std::size_t>(i)];
    p.grad_h = br.d_h.row(i).transpose() + d_final.row(fp.offset(i)).transpose();
    p.grad_word_embeddings = br.d_input.middleRows(fp.offset(i) + 1, fp.length(i) - 1);
  }
  return probes;
}

GradientProbe probe_gradients(const EncoderBundle& bundle, const TokenizedExample& example,
                              const SentenceLoss& loss) {
  const SentenceLoss losses[] = {loss};
  return std::move(probe_gradients_batch(bundle, std::span(&example, 1), losses).front());
}

Mat masked_lm_logits(const EncoderBundle& bundle, const Mat& states) {
  const auto& L = bundle.layout();
  const auto p = bundle.params();
  const Mat a = linear(states, bundle.view(L.mlm_w), row_view(p, L.mlm_b)).unaryExpr([](double t) { return gelu(t); });
  Mat logits(a.rows(), L.tok_emb.rows);
  logits.noalias() = a * bundle.view(L.tok_emb).transpose();
  logits.rowwise() += row_view(p, L.mlm_bias);
  return logits;
}

double masked_lm_loss(const EncoderBundle& bundle, const ForwardPass& fp, const std::vector<int>& rows,
                      const std::vector<int>& targets, std::span<double> grads) {
  if (rows.size() != targets.size() || rows.empty()) throw ContractError("masked-lm: rows/targets mismatch");
  const auto& L = bundle.layout();
  const auto p = bundle.params();
  const int n = static_cast<int>(rows.size());
  const int d = bundle.hidden();
  Mat x(n, d);
  for (int i = 0; i < n; ++i) x.row(i) = fp.final_hidden().row(rows[static_cast<std::size_t>(i)]);
  const Mat u = linear(x, bundle.view(L.mlm_w), row_view(p, L.mlm_b));
  const Mat a = u.unaryExpr([](double t) { return gelu(t); });
  const auto emb = bundle.view(L.tok_emb);
  Mat logits(n, emb.rows());
  logits.noalias() = a * emb.transpose();
  logits.rowwise() += row_view(p, L.mlm_bias);
  double total = 0.0;
  Mat dlog(n, emb.rows());
  for (int i = 0; i < n; ++i) {
    LossValue lv = softmax_cross_entropy(logits.row(i), targets[static_cast<std::size_t>(i)]);
    total += lv.value;
    dlog.row(i) = lv.d_logits.transpose() / n;
  }
  if (grads.empty()) return total / n;
  RowMap(grads.data() + L.mlm_bias.offset, static_cast<Eigen::Index>(L.mlm_bias.size())) += dlog.colwise().sum();
  MatMap(grads.data() + L.tok_emb.offset, L.tok_emb.rows, L.tok_emb.cols).noalias() += dlog.transpose() * a;
  Mat da(n, d);
  da.noalias() = dlog * emb;
  const Mat du = da.array() * u.unaryExpr([](double t) { return gelu_grad(t); }).array();
  const Mat dx = linear_backward(x, du, bundle.view(L.mlm_w), grads, L.mlm_w, L.mlm_b);
  Mat d_final = Mat::Zero(fp.total_positions(), d);
  for (int i = 0; i < n; ++i) d_final.row(rows[static_cast<std::size_t>(i)]) += dx.row(i);
  fp.backward(Mat(), Mat(), &d_final, grads);
  return total / n;
}

LossValue softmax_cross_entropy(const RowVec& logits, int label) {
  if (label < 0 || label >= logits.size()) throw ContractError("label out of range for logits");
  const double mx = logits.maxCoeff();
  const RowVec e = (logits.array() - mx).exp();
  const double sum = e.sum();
  LossValue lv;
  lv.value = std::log(sum) + mx - logits(label);
  lv.d_logits = (e / sum).transpose();
  lv.d_logits(label) -= 1.0;
  return lv;
}

SentenceLoss cross_entropy_loss(int label) {
  return [label](const RowVec&, const RowVec&, const RowVec& logits) {
    return softmax_cross_entropy(logits, label);
  };
}

}  // namespace advcl
