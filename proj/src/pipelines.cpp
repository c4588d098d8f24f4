#include "advcl/pipelines.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>
#include <set>

namespace advcl {
namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::string_view stream, std::int64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(mix_seed(seed, stream), static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

bool same_words(const TokenizedExample& a, const TokenizedExample& b) { return a.words == b.words; }

void require_labels(const Corpus& corpus) {
  for (const auto& ex : corpus.examples) {
    if (!ex.label) throw ConfigError("finetuning needs labels; example " + ex.id + " has none");
  }
}

}  // namespace

std::string pretrain_scheme_name(PretrainScheme s) {
  switch (s) {
    case PretrainScheme::kNone: return "np";
    case PretrainScheme::kBackTranslation: return "btcl";
    case PretrainScheme::kAdversarial: return "adcl";
  }
  return "?";
}

PretrainScheme parse_pretrain_scheme(const std::string& s) {
  const std::string l = to_lower(s);
  if (l == "np") return PretrainScheme::kNone;
  if (l == "btcl") return PretrainScheme::kBackTranslation;
  if (l == "adcl") return PretrainScheme::kAdversarial;
  throw ConfigError("unknown pretraining scheme '" + s + "' (expected np, btcl or adcl)");
}

std::string finetune_scheme_name(FinetuneScheme s) { return s == FinetuneScheme::kClean ? "ftc" : "adv"; }

FinetuneScheme parse_finetune_scheme(const std::string& s) {
  const std::string l = to_lower(s);
  if (l == "ftc") return FinetuneScheme::kClean;
  if (l == "adv") return FinetuneScheme::kAdversarial;
  throw ConfigError("unknown finetuning scheme '" + s + "' (expected ftc or adv)");
}

AttackConfig TrainingConfig::default_pretrain_attack() {
  AttackConfig c;
  c.budget_fraction = 0.2;
  c.candidate_limit = 25;
  c.loss_kind = LossKind::kContrastive;
  return c;
}

AttackConfig TrainingConfig::default_adv_attack() {
  AttackConfig c;
  c.budget_fraction = 0.4;
  c.candidate_limit = 50;
  c.loss_kind = LossKind::kClassification;
  return c;
}

void TrainingConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("training config: " + m); };
  const auto& c = contrastive;
  if (c.steps < 0) fail("contrastive.steps must be >= 0");
  if (c.batch_size < 1) fail("contrastive.batch_size must be >= 1");
  if (!(c.learning_rate > 0)) fail("contrastive.learning_rate must be > 0");
  if (!(c.tau > 0)) fail("contrastive.tau must be > 0");
  if (!(c.momentum >= 0 && c.momentum <= 1)) fail("contrastive.momentum must lie in [0, 1]");
  if (c.queue_size < c.batch_size) {
    fail("contrastive.queue_size (" + std::to_string(c.queue_size) + ") must be >= batch_size (" +
         std::to_string(c.batch_size) + ")");
  }
  const auto& f = finetuning;
  if (f.epochs < 0) fail("finetune.epochs must be >= 0");
  if (f.batch_size < 1) fail("finetune.batch_size must be >= 1");
  if (!(f.learning_rate > 0)) fail("finetune.learning_rate must be > 0");
  if (!(back_translation.swap_rate >= 0 && back_translation.swap_rate <= 1)) fail("back_translation.swap_rate must lie in [0, 1]");
  pretrain_attack.validate();
  adv_attack.validate();
}

// ---------------------------------------------------------------------------
// Back-translation stand-in

TokenizedExample back_translation_standin(const TokenizedExample& example, std::uint64_t seed,
                                          const SubwordModel& subwords, const SynonymEmbeddingTable& table,
                                          const BackTranslationOptions& options, int max_len) {
  if (options.swap_rate <= 0.0 || example.words.empty()) return example;
  const auto locked = [&](const std::string& w) { return options.is_protected && options.is_protected(w); };
  std::mt19937_64 rng(mix_seed(seed, example.id));
  std::vector<std::string> words = example.words;
  const int L = static_cast<int>(words.size());
  const int want = std::max(1, static_cast<int>(std::lround(options.swap_rate * L)));

  std::vector<int> order(static_cast<std::size_t>(L));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  int swapped = 0;
  for (int pos : order) {
    if (swapped >= want) break;
    const std::string& w = words[static_cast<std::size_t>(pos)];
    if (locked(w)) continue;
    std::vector<std::string> pool;
    for (auto& [cand, cos] : table.nearest(to_lower(w), options.candidate_limit)) {
      if (cos >= options.cosine_threshold && !locked(cand)) pool.push_back(cand);
    }
    if (pool.empty()) continue;
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    words[static_cast<std::size_t>(pos)] = pool[pick(rng)];
    ++swapped;
  }

  // One local reordering: a function word trades places with a neighbour.
  std::set<std::string> fw;
  for (const auto& w : options.function_words) fw.insert(to_lower(w));
  std::vector<std::pair<int, int>> moves;
  for (int i = 0; i + 1 < L; ++i) {
    const std::string a = to_lower(words[static_cast<std::size_t>(i)]);
    const std::string b = to_lower(words[static_cast<std::size_t>(i + 1)]);
    if (a == b || locked(a) || locked(b)) continue;
    if (fw.count(a) || fw.count(b)) moves.emplace_back(i, i + 1);
  }
  if (!moves.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, moves.size() - 1);
    const auto [i, j] = moves[pick(rng)];
    std::swap(words[static_cast<std::size_t>(i)], words[static_cast<std::size_t>(j)]);
  }
  return tokenize_words(subwords, example.id, std::move(words), example.label, max_len - 1);
}

// ---------------------------------------------------------------------------
// Transforms

std::vector<std::optional<TokenizedExample>> IdentityTransform::apply(std::span<const TokenizedExample> batch,
                                                                      const TransformContext&) const {
  return {batch.begin(), batch.end()};
}

BackTranslationTransform::BackTranslationTransform(std::shared_ptr<const SubwordModel> subwords,
                                                   const SynonymEmbeddingTable& table,
                                                   BackTranslationOptions options, int max_len)
    : subwords_(std::move(subwords)), table_(&table), options_(std::move(options)), max_len_(max_len) {
  if (!subwords_) throw ContractError("back-translation transform needs a subword model");
}

std::vector<std::optional<TokenizedExample>> BackTranslationTransform::apply(
    std::span<const TokenizedExample> batch, const TransformContext& ctx) const {
  std::vector<std::optional<TokenizedExample>> out;
  out.reserve(batch.size());
  for (const auto& ex : batch) {
    out.emplace_back(back_translation_standin(ex, ctx.seed, *subwords_, *table_, options_, max_len_));
  }
  return out;
}

GeometryTransform::GeometryTransform(AttackConfig config, std::shared_ptr<const SubwordModel> subwords,
                                     const CandidateProvider& provider, const SynonymEmbeddingTable& table)
    : config_(config), subwords_(std::move(subwords)), provider_(&provider), table_(&table) {
  config_.loss_kind = LossKind::kContrastive;
  config_.validate();
  if (!subwords_) throw ContractError("geometry transform needs a subword model");
}

std::vector<std::optional<TokenizedExample>> GeometryTransform::apply(std::span<const TokenizedExample> batch,
                                                                      const TransformContext& ctx) const {
  if (!ctx.query) throw ContractError("geometry transform needs the query encoder");
  AttackContext actx;
  actx.negatives = ctx.negatives;
  actx.tau = ctx.tau;
  auto results = geometry_attack_batched(*ctx.query, *subwords_, batch, config_, *provider_, *table_, actx);
  std::vector<std::optional<TokenizedExample>> out;
  out.reserve(results.size());
  for (auto& r : results) {
    if (r.zero_gradient && r.replaced_indices.empty()) {
      out.emplace_back(std::nullopt);
    } else {
      out.emplace_back(std::move(r.perturbed));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Contrastive pretraining

nlohmann::json PretrainStep::to_json() const {
  return {{"step", step},
          {"loss", loss},
          {"lr", learning_rate},
          {"transform_failures", transform_failures},
          {"unchanged_positives", unchanged_positives}};
}

ContrastivePretrainer::ContrastivePretrainer(const TrainingConfig& config, const Corpus& corpus,
                                             const TransformFn& transform, const EncoderBundle& init)
    : config_(config),
      transform_(&transform),
      pair_(MomentumPair::from_initial(init, config.contrastive.momentum)),
      queue_(config.contrastive.queue_size, init.proj_dim()),
      adam_(init.params().size(), config.adam),
      schedule_(config.contrastive.learning_rate, config.contrastive.steps, config.contrastive.warmup_steps) {
  config_.validate();
  if (corpus.examples.empty()) throw ConfigError("pretraining corpus is empty");
  examples_.reserve(corpus.size());
  for (const auto& ex : corpus.examples) {
    TokenizedExample copy = ex;
    copy.label.reset();
    examples_.push_back(std::move(copy));
  }
  fill_queue(queue_, pair_.key, examples_, mix_seed(config_.seed, "queue"));
}

std::vector<TokenizedExample> ContrastivePretrainer::next_batch(std::int64_t step) const {
  const auto n = static_cast<std::int64_t>(examples_.size());
  const std::int64_t B = config_.contrastive.batch_size;
  std::vector<TokenizedExample> batch;
  batch.reserve(static_cast<std::size_t>(B));
  std::int64_t epoch = -1;
  std::vector<std::size_t> order;
  for (std::int64_t c = step * B; c < (step + 1) * B; ++c) {
    if (c / n != epoch) {
      epoch = c / n;
      order = epoch_order(examples_.size(), config_.seed, "pretrain-order", epoch);
    }
    batch.push_back(examples_[order[static_cast<std::size_t>(c % n)]]);
  }
  return batch;
}

PretrainStep ContrastivePretrainer::step() {
  const std::int64_t t = adam_.steps();
  const auto batch = next_batch(t);
  const Mat snapshot = queue_.storage();
  TransformContext ctx;
  ctx.query = &pair_.query;
  ctx.negatives = &snapshot;
  ctx.tau = config_.contrastive.tau;
  ctx.seed = mix_seed(config_.seed, static_cast<std::uint64_t>(t));

  PretrainStep rec;
  rec.step = t;
  std::vector<std::optional<TokenizedExample>> views;
  try {
    views = transform_->apply(batch, ctx);
  } catch (const std::exception&) {
    views.clear();
    for (const auto& ex : batch) {
      try {
        views.push_back(std::move(transform_->apply(std::span(&ex, 1), ctx).front()));
      } catch (const std::exception&) {
        views.emplace_back(std::nullopt);
      }
    }
  }
  if (views.size() != batch.size()) throw ContractError("transform returned the wrong number of views");
  std::vector<TokenizedExample> positives;
  positives.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (views[i]) {
      positives.push_back(std::move(*views[i]));
    } else {
      ++rec.transform_failures;
      positives.push_back(batch[i]);
    }
    if (same_words(positives.back(), batch[i])) ++rec.unchanged_positives;
  }

  const ForwardPass fq(pair_.query, batch, true);
  const Mat zk = encode(pair_.key, positives).z;
  queue_.enqueue(zk);
  const auto keys = queue_.storage();
  const Mat& zq = fq.outputs().z;
  const double tau = config_.contrastive.tau;
  const auto B = static_cast<double>(zq.rows());
  Mat dz(zq.rows(), zq.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < zq.rows(); ++i) {
    const InfoNce r = infonce(zq.row(i), zk.row(i), keys, tau);
    total += r.loss;
    dz.row(i) = r.grad_z.transpose() / B;
  }
  if (!std::isfinite(total)) throw NumericError("non-finite contrastive loss at step " + std::to_string(t));
  ParamVec grads(pair_.query.params().size(), 0.0);
  fq.backward(Mat(), dz, nullptr, grads);
  rec.learning_rate = schedule_.at(t);
  adam_.step(pair_.query.params(), grads, rec.learning_rate);
  momentum_update(pair_);
  rec.loss = total / B;
  return rec;
}

std::vector<PretrainStep> ContrastivePretrainer::run(std::int64_t steps) {
  std::vector<PretrainStep> out;
  out.reserve(static_cast<std::size_t>(std::max<std::int64_t>(steps, 0)));
  for (std::int64_t i = 0; i < steps; ++i) out.push_back(step());
  return out;
}

Checkpoint ContrastivePretrainer::save_state(std::shared_ptr<const SubwordModel> subwords) const {
  Checkpoint ck;
  ck.architecture = pair_.query.config();
  ck.subwords = std::move(subwords);
  ck.meta = {{"kind", "pretrain-state"},
             {"step", adam_.steps()},
             {"momentum", pair_.m},
             {"queue_capacity", queue_.capacity()},
             {"queue_size", queue_.size()},
             {"queue_cursor", queue_.cursor()}};
  auto vec = [](std::span<const double> s) { return std::vector<double>(s.begin(), s.end()); };
  ck.put("model", vec(pair_.query.params()));
  ck.put("key", vec(pair_.key.params()));
  ck.put("adam_m", adam_.first_moment());
  ck.put("adam_v", adam_.second_moment());
  ck.put("queue", queue_.raw());
  return ck;
}

ContrastivePretrainer ContrastivePretrainer::resume(const TrainingConfig& config, const Corpus& corpus,
                                                    const TransformFn& transform, const Checkpoint& state) {
  if (state.meta.value("kind", "") != "pretrain-state") {
    throw ConfigError("checkpoint does not hold a pretraining state");
  }
  const EncoderBundle query = bundle_from(state, "model");
  ContrastivePretrainer p(config, corpus, transform, query);
  p.pair_.key = bundle_from(state, "key");
  p.adam_.restore(state.tensor("adam_m"), state.tensor("adam_v"), state.meta.at("step").get<std::int64_t>());
  const int cap = state.meta.at("queue_capacity").get<int>();
  if (cap != config.contrastive.queue_size) throw ConfigError("queue size differs from the saved state");
  p.queue_ = NegativeQueue::restore(cap, query.proj_dim(), state.tensor("queue"), state.meta.at("queue_size").get<int>(),
                                    state.meta.at("queue_cursor").get<int>());
  return p;
}

PretrainResult pretrain_contrastive(const TrainingConfig& config, const Corpus& corpus, const TransformFn& transform,
                                    const EncoderBundle& init) {
  if (config.pretrain == PretrainScheme::kNone) return {init, {}, 0};
  ContrastivePretrainer trainer(config, corpus, transform, init);
  PretrainResult res{init, {}, 0};
  res.history = trainer.run(config.contrastive.steps);
  for (const auto& s : res.history) res.transform_failures += s.transform_failures;
  res.model = trainer.pair().query;
  return res;
}

// ---------------------------------------------------------------------------
// Finetuning

nlohmann::json FinetuneEpoch::to_json() const {
  return {{"epoch", epoch},
          {"loss", loss},
          {"accuracy", accuracy},
          {"adversarial_rows", adversarial_rows},
          {"timeouts", timeouts}};
}

namespace {

struct AdvHook {
  const SubwordModel* subwords;
  const CandidateProvider* provider;
  const SynonymEmbeddingTable* table;
};

FinetuneResult finetune_impl(const EncoderBundle& init, const Corpus& labeled, const TrainingConfig& config,
                             const AdvHook* adv) {
  config.validate();
  require_labels(labeled);
  require_class_count(init, labeled.num_classes);
  FinetuneResult res{init, {}};
  const auto& opt = config.finetuning;
  if (opt.epochs == 0 || labeled.examples.empty()) return res;
  const auto n = labeled.examples.size();
  const auto B = static_cast<std::size_t>(opt.batch_size);
  const std::int64_t per_epoch = static_cast<std::int64_t>((n + B - 1) / B);
  Adam adam(init.params().size(), config.adam);
  const LinearSchedule schedule(opt.learning_rate, per_epoch * opt.epochs, opt.warmup_steps);
  EncoderBundle& model = res.model;
  AttackConfig attack = config.adv_attack;
  attack.loss_kind = LossKind::kClassification;

  for (int e = 0; e < opt.epochs; ++e) {
    const auto order = epoch_order(n, config.seed, "finetune-order", e);
    FinetuneEpoch rec;
    rec.epoch = e;
    double loss_sum = 0.0;
    std::int64_t rows_seen = 0, clean_correct = 0;
    for (std::size_t at = 0; at < n; at += B) {
      std::vector<TokenizedExample> rows;
      for (std::size_t k = at; k < std::min(n, at + B); ++k) rows.push_back(labeled.examples[order[k]]);
      const std::size_t clean_rows = rows.size();
      if (adv && e >= 1) {
        const auto t0 = std::chrono::steady_clock::now();
        auto results = geometry_attack_batched(model, *adv->subwords, std::span(rows.data(), clean_rows), attack,
                                               *adv->provider, *adv->table);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (opt.attack_timeout_s > 0 && secs > opt.attack_timeout_s) {
          ++rec.timeouts;
          std::cerr << "adversarial finetuning: attack exceeded " << opt.attack_timeout_s
                    << "s; training on clean rows\n";
        } else {
          for (auto& r : results) {
            if (r.replaced_indices.empty()) continue;
            rows.push_back(std::move(r.perturbed));
            ++rec.adversarial_rows;
          }
        }
      }
      const ForwardPass fp(model, rows, true);
      const Mat& logits = fp.outputs().logits;
      const auto R = static_cast<double>(rows.size());
      Mat dlog(logits.rows(), logits.cols());
      double batch_loss = 0.0;
      for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const int y = *rows[static_cast<std::size_t>(i)].label;
        const LossValue lv = softmax_cross_entropy(logits.row(i), y);
        batch_loss += lv.value;
        dlog.row(i) = lv.d_logits.transpose() / R;
        if (static_cast<std::size_t>(i) < clean_rows && argmax_class(logits.row(i)) == y) ++clean_correct;
      }
      if (!std::isfinite(batch_loss)) throw NumericError("non-finite finetuning loss");
      ParamVec grads(model.params().size(), 0.0);
      fp.backward(dlog, Mat(), nullptr, grads);
      adam.step(model.params(), grads, schedule.at(adam.steps()));
      loss_sum += batch_loss;
      rows_seen += static_cast<std::int64_t>(rows.size());
    }
    rec.loss = loss_sum / static_cast<double>(rows_seen);
    rec.accuracy = static_cast<double>(clean_correct) / static_cast<double>(n);
    res.history.push_back(rec);
  }
  return res;
}

}  // namespace

FinetuneResult finetune_clean(const EncoderBundle& init, const Corpus& labeled, const TrainingConfig& config) {
  return finetune_impl(init, labeled, config, nullptr);
}

FinetuneResult finetune_adversarial(const EncoderBundle& init, const Corpus& labeled, const TrainingConfig& config,
                                    const SubwordModel& subwords, const CandidateProvider& provider,
                                    const SynonymEmbeddingTable& table) {
  const AdvHook hook{&subwords, &provider, &table};
  return finetune_impl(init, labeled, config, &hook);
}

Corpus pregenerate_adversarial_dataset(const EncoderBundle& model, const Corpus& labeled, const AttackConfig& attack,
                                       const CandidateProvider& provider, const SynonymEmbeddingTable& table,
                                       int batch_size) {
  require_labels(labeled);
  require_class_count(model, labeled.num_classes);
  if (!labeled.subwords) throw ContractError("pregeneration needs the corpus subword model");
  const GeometryAttack runner(attack, labeled.subwords, provider, table, batch_size);
  const auto results = runner.run(model, labeled.examples);
  Corpus out = labeled;
  out.dataset_id = labeled.dataset_id + "+adv";
  for (std::size_t i = 0; i < results.size(); ++i) {
    TokenizedExample adv = results[i].perturbed;
    adv.id = labeled.examples[i].id + ":adv";
    adv.label = labeled.examples[i].label;
    out.examples.push_back(std::move(adv));
  }
  return out;
}

double fit_masked_lm_head(EncoderBundle& model, const Corpus& corpus, const MaskedLmOptions& options) {
  if (corpus.examples.empty()) throw ConfigError("masked-lm corpus is empty");
  const auto& L = model.layout();
  const Slot head[] = {L.mlm_w, L.mlm_b, L.mlm_bias};
  std::size_t head_size = 0;
  for (const auto& s : head) head_size += s.size();
  std::vector<double> hp(head_size), hg(head_size);
  Adam adam(head_size);
  std::mt19937_64 rng(mix_seed(options.seed, "masked-lm"));
  std::uniform_int_distribution<std::size_t> pick_ex(0, corpus.size() - 1);
  double last = 0.0;
  ParamVec grads(model.params().size());
  for (int step = 0; step < options.steps; ++step) {
    std::vector<TokenizedExample> batch;
    std::vector<int> targets, positions;
    for (int b = 0; b < options.batch_size; ++b) {
      const TokenizedExample ex = clip_to_length(corpus.examples[pick_ex(rng)], model.config().max_len);
      if (ex.words.empty()) continue;
      std::uniform_int_distribution<int> pick_w(0, ex.num_words() - 1);
      const int w = pick_w(rng);
      targets.push_back(ex.subwords[static_cast<std::size_t>(ex.spans[static_cast<std::size_t>(w)].begin)]);
      TokenizedExample masked = mask_word(ex, w);
      positions.push_back(masked.spans[static_cast<std::size_t>(w)].begin);
      batch.push_back(std::move(masked));
    }
    if (batch.empty()) continue;
    const ForwardPass fp(model, batch, true);
    std::vector<int> rows;
    for (std::size_t i = 0; i < batch.size(); ++i) rows.push_back(fp.offset(static_cast<int>(i)) + 1 + positions[i]);
    std::fill(grads.begin(), grads.end(), 0.0);
    last = masked_lm_loss(model, fp, rows, targets, grads);
    std::size_t at = 0;
    for (const auto& s : head) {
      std::copy_n(model.params().begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(), hp.begin() + static_cast<std::ptrdiff_t>(at));
      std::copy_n(grads.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(), hg.begin() + static_cast<std::ptrdiff_t>(at));
      at += s.size();
    }
    adam.step(hp, hg, options.learning_rate);
    at = 0;
    for (const auto& s : head) {
      std::copy_n(hp.begin() + static_cast<std::ptrdiff_t>(at), s.size(), model.params().begin() + static_cast<std::ptrdiff_t>(s.offset));
      at += s.size();
    }
  }
  return last;
}

}  // namespace advcl
