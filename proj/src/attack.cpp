#include "advcl/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace advcl {
namespace {

std::string_view loss_kind_name(LossKind k) { return k == LossKind::kContrastive ? "contrastive" : "classification"; }
std::string_view projection_name(ProjectionRule r) { return r == ProjectionRule::kSigned ? "signed" : "absolute"; }

// Contrastive attack loss: the denominator runs over the frozen negatives plus
// the anchor, which is also the positive.
LossValue anchored_infonce(const RowVec& z, const RowVec& anchor, const Mat* negatives, double tau) {
  const Eigen::Index n = negatives ? negatives->rows() : 0;
  Vec logits(n + 1);
  if (n > 0) logits.head(n).noalias() = (*negatives) * z.transpose() / tau;
  logits(n) = anchor.dot(z) / tau;
  const double mx = logits.maxCoeff();
  const Vec e = (logits.array() - mx).exp();
  const double sum = e.sum();
  const Vec p = e / sum;
  LossValue lv;
  lv.value = std::log(sum) + mx - logits(n);
  lv.d_z = (p(n) - 1.0) * anchor.transpose();
  if (n > 0) lv.d_z.noalias() += negatives->transpose() * p.head(n);
  lv.d_z /= tau;
  return lv;
}

struct Work {
  TokenizedExample cur;
  RowVec anchor;
  bool has_anchor = false;
  std::set<int> replaced;
  AttackResult res;
  bool done = false;
};

class Engine {
 public:
  Engine(const EncoderBundle& model, const SubwordModel& subwords, const AttackConfig& config,
         const CandidateProvider& provider, const SynonymEmbeddingTable& table, const AttackContext& context,
         bool stacked)
      : model_(model),
        subwords_(subwords),
        cfg_(config),
        provider_(provider),
        table_(table),
        ctx_(context),
        stacked_(stacked) {
    cfg_.validate();
    if (cfg_.loss_kind == LossKind::kContrastive) {
      if (ctx_.tau <= 0.0) throw ContractError("attack: tau must be positive");
      if (ctx_.negatives && ctx_.negatives->rows() > 0 && ctx_.negatives->cols() != model.proj_dim()) {
        throw ContractError("attack: negative queue width differs from the projection size");
      }
    }
  }

  std::vector<AttackResult> run(std::span<const TokenizedExample> examples) {
    std::vector<Work> work(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
      Work& w = work[i];
      w.cur = clip_to_length(examples[i], model_.config().max_len);
      if (cfg_.loss_kind == LossKind::kClassification) {
        if (!w.cur.label) throw ContractError("classification attack needs a label: " + w.cur.id);
        if (*w.cur.label < 0 || *w.cur.label >= model_.num_classes()) {
          throw ConfigError("example " + w.cur.id + " has label outside the classification head");
        }
      }
      w.res.budget = cfg_.budget_for(w.cur.num_words());
      if (w.cur.num_words() == 0) w.done = true;
    }
    std::vector<std::size_t> active;
    for (;;) {
      active.clear();
      for (std::size_t i = 0; i < work.size(); ++i) {
        if (!work[i].done) active.push_back(i);
      }
      if (active.empty()) break;
      const std::vector<GradientProbe> probes = probe(work, active);

      std::vector<TokenizedExample> cands;
      std::vector<std::size_t> owner;  // index into `active` for each candidate
      std::vector<AttackStep> steps(active.size());
      std::vector<RowVec> dirs(active.size());
      for (std::size_t a = 0; a < active.size(); ++a) {
        Work& w = work[active[a]];
        const GradientProbe& p = probes[a];
        if (!plan(w, p, steps[a], dirs[a])) continue;
        for (const auto& word : steps[a].candidates) {
          cands.push_back(replace_word(w.cur, subwords_, steps[a].target, word, model_.config().max_len - 1));
          owner.push_back(a);
        }
      }
      if (cands.empty()) continue;

      const Mat reps = represent(cands);
      std::size_t next = 0;
      for (std::size_t a = 0; a < active.size(); ++a) {
        Work& w = work[active[a]];
        if (w.done) continue;
        AttackStep& step = steps[a];
        const int n = static_cast<int>(step.candidates.size());
        const RowVec& s_cur = cfg_.loss_kind == LossKind::kContrastive ? probes[a].z : probes[a].h;
        step.scores.resize(static_cast<std::size_t>(n));
        for (int j = 0; j < n; ++j) {
          const RowVec r = reps.row(static_cast<Eigen::Index>(next + static_cast<std::size_t>(j))) - s_cur;
          step.scores[static_cast<std::size_t>(j)] = projection_score(r, dirs[a]);
        }
        choose(step);
        w.res.queries += n;
        w.res.replaced_indices.push_back(step.target);
        w.res.original_words.push_back(w.cur.words[static_cast<std::size_t>(step.target)]);
        w.replaced.insert(step.target);
        w.cur = std::move(cands[next + static_cast<std::size_t>(step.chosen)]);
        w.res.steps.push_back(std::move(step));
        next += static_cast<std::size_t>(n);
      }
    }
    std::vector<AttackResult> out;
    out.reserve(work.size());
    for (auto& w : work) {
      w.res.perturbed = std::move(w.cur);
      out.push_back(std::move(w.res));
    }
    return out;
  }

 private:
  std::vector<GradientProbe> probe(std::vector<Work>& work, const std::vector<std::size_t>& active) {
    std::vector<TokenizedExample> batch;
    std::vector<SentenceLoss> losses;
    batch.reserve(active.size());
    for (std::size_t i : active) {
      Work& w = work[i];
      batch.push_back(w.cur);
      if (cfg_.loss_kind == LossKind::kClassification) {
        losses.push_back(cross_entropy_loss(*w.cur.label));
      } else {
        const Mat* neg = ctx_.negatives;
        const double tau = ctx_.tau;
        const bool has = w.has_anchor;
        RowVec anchor = w.anchor;
        losses.push_back([neg, tau, has, anchor](const RowVec&, const RowVec& z, const RowVec&) {
          return anchored_infonce(z, has ? anchor : z, neg, tau);
        });
      }
    }
    if (stacked_) return probe_gradients_batch(model_, batch, losses);
    std::vector<GradientProbe> out;
    out.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) out.push_back(probe_gradients(model_, batch[i], losses[i]));
    return out;
  }

  // Records the probe and picks the target word and its filtered candidates.
  // Returns false (and may finish the example) when no substitution follows.
  bool plan(Work& w, const GradientProbe& p, AttackStep& step, RowVec& dir) {
    w.res.queries += 1;
    w.res.loss_trajectory.push_back(p.loss);
    if (cfg_.loss_kind == LossKind::kContrastive && !w.has_anchor) {
      w.anchor = p.z;
      w.has_anchor = true;
    }
    if (cfg_.loss_kind == LossKind::kClassification && argmax_class(p.logits) != *w.cur.label) {
      w.res.success = true;
      w.res.already_misclassified = w.res.loss_trajectory.size() == 1;
      w.done = true;
      return false;
    }
    if (static_cast<int>(w.replaced.size()) >= w.res.budget ||
        static_cast<int>(w.res.steps.size()) >= cfg_.max_iters) {
      w.done = true;
      return false;
    }
    dir = cfg_.loss_kind == LossKind::kContrastive ? RowVec(p.grad_z.transpose()) : RowVec(p.grad_h.transpose());
    if (!(dir.norm() > 0.0)) {
      w.res.zero_gradient = true;
      w.done = true;
      return false;
    }
    const Mat word_grads = align_gradients(w.cur, p.grad_word_embeddings);
    std::set<int> blocked;
    if (cfg_.no_repeat) blocked = w.replaced;
    for (;;) {
      const std::optional<int> t = select_target_word(word_grads, blocked);
      if (!t) {
        w.done = true;
        return false;
      }
      const std::string& original = w.cur.words[static_cast<std::size_t>(*t)];
      FilteredCandidates f = filter_candidates(original, provider_.propose(w.cur, *t, cfg_.candidate_limit),
                                               table_, cfg_.cosine_threshold);
      if (f.original_missing) w.res.original_missing_from_table = true;
      if (f.words.empty()) {
        step.exhausted.push_back(*t);
        blocked.insert(*t);
        continue;
      }
      step.target = *t;
      step.candidates = std::move(f.words);
      return true;
    }
  }

  Mat represent(const std::vector<TokenizedExample>& cands) const {
    const bool use_z = cfg_.loss_kind == LossKind::kContrastive;
    const int width = use_z ? model_.proj_dim() : model_.hidden();
    Mat out(static_cast<Eigen::Index>(cands.size()), width);
    const std::size_t chunk = stacked_ ? 256 : 1;
    for (std::size_t at = 0; at < cands.size(); at += chunk) {
      const std::size_t n = std::min(chunk, cands.size() - at);
      const SentenceOutputs o = encode(model_, std::span(cands).subspan(at, n));
      out.middleRows(static_cast<Eigen::Index>(at), static_cast<Eigen::Index>(n)) = use_z ? o.z : o.h;
    }
    return out;
  }

  void choose(AttackStep& step) const {
    auto key = [&](double s) { return cfg_.projection == ProjectionRule::kSigned ? s : std::abs(s); };
    int best = 0;
    for (int j = 1; j < static_cast<int>(step.scores.size()); ++j) {
      if (key(step.scores[static_cast<std::size_t>(j)]) > key(step.scores[static_cast<std::size_t>(best)])) best = j;
    }
    double runner = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < static_cast<int>(step.scores.size()); ++j) {
      if (j != best) runner = std::max(runner, key(step.scores[static_cast<std::size_t>(j)]));
    }
    step.chosen = best;
    step.score_gap = key(step.scores[static_cast<std::size_t>(best)]) - runner;
  }

  const EncoderBundle& model_;
  const SubwordModel& subwords_;
  AttackConfig cfg_;
  const CandidateProvider& provider_;
  const SynonymEmbeddingTable& table_;
  AttackContext ctx_;
  bool stacked_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void AttackConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("attack config: " + m); };
  if (max_iters < 0) fail("max_iters must be >= 0");
  if (candidate_limit < 1) fail("candidate_limit must be >= 1");
  if (!(cosine_threshold > 0.0 && cosine_threshold < 1.0)) fail("cosine_threshold must lie in (0, 1)");
  if (!(budget_fraction >= 0.0 && budget_fraction <= 1.0)) fail("budget_fraction must lie in [0, 1]");
  if (budget_cap < 0) fail("budget_cap must be >= 0");
}

int AttackConfig::budget_for(int num_words) const {
  const int by_fraction = static_cast<int>(std::floor(budget_fraction * num_words + 1e-9));
  return std::max(0, std::min(budget_cap, by_fraction));
}

nlohmann::json AttackConfig::to_json() const {
  return {{"max_iters", max_iters},
          {"candidate_limit", candidate_limit},
          {"cosine_threshold", cosine_threshold},
          {"budget_fraction", budget_fraction},
          {"budget_cap", budget_cap},
          {"no_repeat", no_repeat},
          {"loss", loss_kind_name(loss_kind)},
          {"projection", projection_name(projection)}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
  AttackConfig c;
  c.max_iters = j.value("max_iters", c.max_iters);
  c.candidate_limit = j.value("candidate_limit", c.candidate_limit);
  c.cosine_threshold = j.value("cosine_threshold", c.cosine_threshold);
  c.budget_fraction = j.value("budget_fraction", c.budget_fraction);
  c.budget_cap = j.value("budget_cap", c.budget_cap);
  c.no_repeat = j.value("no_repeat", c.no_repeat);
  const std::string loss = j.value("loss", std::string(loss_kind_name(c.loss_kind)));
  if (loss == "contrastive") {
    c.loss_kind = LossKind::kContrastive;
  } else if (loss == "classification") {
    c.loss_kind = LossKind::kClassification;
  } else {
    throw ConfigError("attack config: unknown loss '" + loss + "'");
  }
  const std::string proj = j.value("projection", std::string(projection_name(c.projection)));
  if (proj == "signed") {
    c.projection = ProjectionRule::kSigned;
  } else if (proj == "absolute") {
    c.projection = ProjectionRule::kAbsolute;
  } else {
    throw ConfigError("attack config: unknown projection '" + proj + "'");
  }
  c.validate();
  return c;
}

nlohmann::json AttackResult::to_json(const TokenizedExample& original) const {
  nlohmann::json subs = nlohmann::json::array();
  for (std::size_t i = 0; i < replaced_indices.size(); ++i) {
    const int idx = replaced_indices[i];
    // Later substitutions may replace an earlier one only when no_repeat is off.
    std::string after = idx < perturbed.num_words() ? perturbed.words[static_cast<std::size_t>(idx)] : "";
    for (std::size_t k = i + 1; k < replaced_indices.size(); ++k) {
      if (replaced_indices[k] == idx) {
        after = original_words[k];
        break;
      }
    }
    subs.push_back({{"index", idx}, {"before", original_words[i]}, {"after", after}});
  }
  nlohmann::json j = {{"id", original.id},
                      {"success", success},
                      {"already_misclassified", already_misclassified},
                      {"zero_gradient", zero_gradient},
                      {"original_missing_from_table", original_missing_from_table},
                      {"budget", budget},
                      {"queries", queries},
                      {"substitutions", subs},
                      {"loss_trajectory", loss_trajectory},
                      {"original", original.words},
                      {"perturbed", perturbed.words}};
  if (original.label) j["label"] = *original.label;
  return j;
}

// ---------------------------------------------------------------------------
// Candidates

std::vector<std::string> SynonymTableProvider::propose(const TokenizedExample& example, int index,
                                                       int limit) const {
  std::vector<std::string> out;
  const std::string original = to_lower(example.words.at(static_cast<std::size_t>(index)));
  for (auto& [w, cos] : table_->nearest(original, limit)) {
    if (w != original) out.push_back(w);
  }
  return out;
}

TokenizedExample mask_word(const TokenizedExample& example, int index) {
  if (index < 0 || index >= example.num_words()) throw ContractError("mask_word: index out of range");
  const Span old = example.spans[static_cast<std::size_t>(index)];
  TokenizedExample out = example;
  out.words[static_cast<std::size_t>(index)] = "[MASK]";
  out.subwords.erase(out.subwords.begin() + old.begin, out.subwords.begin() + old.end);
  out.subwords.insert(out.subwords.begin() + old.begin, SubwordModel::kMask);
  const int delta = 1 - old.size();
  out.spans[static_cast<std::size_t>(index)].end = old.begin + 1;
  for (std::size_t k = static_cast<std::size_t>(index) + 1; k < out.spans.size(); ++k) {
    out.spans[k].begin += delta;
    out.spans[k].end += delta;
  }
  return out;
}

MaskedLmProvider::MaskedLmProvider(const EncoderBundle& model, std::shared_ptr<const SubwordModel> subwords,
                                   const SynonymEmbeddingTable& table)
    : model_(&model), subwords_(std::move(subwords)) {
  if (!subwords_) throw ContractError("masked-lm provider needs a subword model");
  if (model.config().subword_model_id != subwords_->fingerprint()) {
    throw ConfigError("masked-lm provider: subword model does not match the encoder");
  }
  for (const auto& w : table.words()) {
    const auto pieces = subwords_->encode_word(w);
    if (split_words(w).size() != 1 || pieces.empty() || pieces.front() == SubwordModel::kUnk) continue;
    words_.push_back(w);
    first_piece_.push_back(pieces.front());
  }
}

std::vector<std::string> MaskedLmProvider::propose(const TokenizedExample& example, int index, int limit) const {
  const TokenizedExample masked = clip_to_length(mask_word(example, index), model_->config().max_len);
  if (index >= masked.num_words()) return {};
  const ForwardPass fp(*model_, std::span(&masked, 1), false);
  const int row = fp.offset(0) + 1 + masked.spans[static_cast<std::size_t>(index)].begin;
  const Mat logits = masked_lm_logits(*model_, fp.final_hidden().row(row));
  const std::string original = to_lower(example.words[static_cast<std::size_t>(index)]);
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (words_[i] != original) order.push_back(i);
  }
  const auto by_logit = [&](std::size_t a, std::size_t b) {
    const double la = logits(0, first_piece_[a]);
    const double lb = logits(0, first_piece_[b]);
    return la != lb ? la > lb : words_[a] < words_[b];
  };
  const std::size_t k = std::min(order.size(), static_cast<std::size_t>(std::max(limit, 0)));
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), by_logit);
  std::vector<std::string> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(words_[order[i]]);
  return out;
}

std::optional<int> select_target_word(const Mat& per_word_grads, const std::set<int>& forbidden) {
  std::optional<int> best;
  double best_norm = -1.0;
  for (int i = 0; i < per_word_grads.rows(); ++i) {
    if (forbidden.count(i)) continue;
    const double n = per_word_grads.row(i).norm();
    if (n > best_norm) {
      best_norm = n;
      best = i;
    }
  }
  return best;
}

FilteredCandidates filter_candidates(const std::string& original, const std::vector<std::string>& candidates,
                                     const SynonymEmbeddingTable& table, double epsilon) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ContractError("filter_candidates: epsilon must lie in (0, 1)");
  FilteredCandidates out;
  const std::string key = to_lower(original);
  if (!table.contains(key)) {
    out.original_missing = true;
    return out;
  }
  std::set<std::string> seen;
  for (const auto& c : candidates) {
    const std::string lc = to_lower(c);
    if (lc == key || seen.count(lc)) continue;
    const auto cos = table.cosine(key, lc);
    if (cos && *cos >= epsilon) {
      out.words.push_back(lc);
      seen.insert(lc);
    }
  }
  return out;
}

double projection_score(const Eigen::Ref<const RowVec>& r, const Eigen::Ref<const RowVec>& v) {
  if (r.size() != v.size()) throw ContractError("projection_score: dimension mismatch");
  const double n = v.norm();
  if (!(n > 0.0)) throw ContractError("projection_score: zero gradient");
  return r.dot(v) / n;
}

// ---------------------------------------------------------------------------
// Attacks

AttackResult geometry_attack(const EncoderBundle& model, const SubwordModel& subwords,
                             const TokenizedExample& example, const AttackConfig& config,
                             const CandidateProvider& provider, const SynonymEmbeddingTable& table,
                             const AttackContext& context) {
  Engine engine(model, subwords, config, provider, table, context, false);
  return std::move(engine.run(std::span(&example, 1)).front());
}

std::vector<AttackResult> geometry_attack_batched(const EncoderBundle& model, const SubwordModel& subwords,
                                                  std::span<const TokenizedExample> examples,
                                                  const AttackConfig& config, const CandidateProvider& provider,
                                                  const SynonymEmbeddingTable& table,
                                                  const AttackContext& context) {
  if (examples.empty()) return {};
  Engine engine(model, subwords, config, provider, table, context, true);
  return engine.run(examples);
}

AttackResult baseline_random_synonym_attack(const EncoderBundle& model, const SubwordModel& subwords,
                                            const TokenizedExample& example, const AttackConfig& config,
                                            const SynonymEmbeddingTable& table, std::uint64_t seed) {
  config.validate();
  if (!example.label) throw ContractError("random synonym attack needs a label: " + example.id);
  const int label = *example.label;
  AttackResult res;
  res.perturbed = clip_to_length(example, model.config().max_len);
  res.budget = config.budget_for(res.perturbed.num_words());
  auto score = [&](const TokenizedExample& ex) {
    const Classification c = classify(model, std::span(&ex, 1));
    res.queries += 1;
    res.loss_trajectory.push_back(softmax_cross_entropy(c.logits.row(0), label).value);
    return c.predicted.front();
  };
  if (score(res.perturbed) != label) {
    res.success = true;
    res.already_misclassified = true;
    return res;
  }
  std::mt19937_64 rng(mix_seed(seed, example.id));
  std::vector<int> order(static_cast<std::size_t>(res.perturbed.num_words()));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const SynonymTableProvider provider(table);
  int steps = 0;
  for (int pos : order) {
    if (static_cast<int>(res.replaced_indices.size()) >= res.budget || steps >= config.max_iters) break;
    if (pos >= res.perturbed.num_words()) continue;
    const std::string original = res.perturbed.words[static_cast<std::size_t>(pos)];
    FilteredCandidates f = filter_candidates(original, provider.propose(res.perturbed, pos, config.candidate_limit),
                                             table, config.cosine_threshold);
    if (f.original_missing) res.original_missing_from_table = true;
    if (f.words.empty()) continue;
    std::uniform_int_distribution<std::size_t> pick(0, f.words.size() - 1);
    const std::string& word = f.words[pick(rng)];
    res.perturbed = replace_word(res.perturbed, subwords, pos, word, model.config().max_len - 1);
    res.replaced_indices.push_back(pos);
    res.original_words.push_back(original);
    ++steps;
    if (score(res.perturbed) != label) {
      res.success = true;
      break;
    }
  }
  return res;
}

GeometryAttack::GeometryAttack(AttackConfig config, std::shared_ptr<const SubwordModel> subwords,
                               const CandidateProvider& provider, const SynonymEmbeddingTable& table, int batch_size)
    : config_(config), subwords_(std::move(subwords)), provider_(&provider), table_(&table), batch_size_(batch_size) {
  config_.loss_kind = LossKind::kClassification;
  config_.validate();
  if (!subwords_) throw ContractError("geometry attack needs a subword model");
  if (batch_size_ < 1) throw ConfigError("attack batch size must be >= 1");
}

std::vector<AttackResult> GeometryAttack::run(const EncoderBundle& model,
                                              std::span<const TokenizedExample> batch) const {
  std::vector<AttackResult> out;
  out.reserve(batch.size());
  for (std::size_t at = 0; at < batch.size(); at += static_cast<std::size_t>(batch_size_)) {
    const std::size_t n = std::min(static_cast<std::size_t>(batch_size_), batch.size() - at);
    auto part = geometry_attack_batched(model, *subwords_, batch.subspan(at, n), config_, *provider_, *table_);
    for (auto& r : part) out.push_back(std::move(r));
  }
  return out;
}

RandomSynonymAttack::RandomSynonymAttack(AttackConfig config, std::shared_ptr<const SubwordModel> subwords,
                                         const SynonymEmbeddingTable& table, std::uint64_t seed)
    : config_(config), subwords_(std::move(subwords)), table_(&table), seed_(seed) {
  config_.validate();
  if (!subwords_) throw ContractError("random synonym attack needs a subword model");
}

std::vector<AttackResult> RandomSynonymAttack::run(const EncoderBundle& model,
                                                   std::span<const TokenizedExample> batch) const {
  std::vector<AttackResult> out;
  out.reserve(batch.size());
  for (const auto& ex : batch) out.push_back(baseline_random_synonym_attack(model, *subwords_, ex, config_, *table_, seed_));
  return out;
}

std::string export_attack_results(std::span<const TokenizedExample> originals,
                                  std::span<const AttackResult> results) {
  if (originals.size() != results.size()) throw ContractError("export: originals/results size mismatch");
  std::string out;
  for (std::size_t i = 0; i < results.size(); ++i) {
    out += results[i].to_json(originals[i]).dump();
    out += '\n';
  }
  return out;
}

}  // namespace advcl
