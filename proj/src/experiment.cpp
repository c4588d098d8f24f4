#include "advcl/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <random>
#include <sstream>

#include "advcl/synth.hpp"

namespace advcl {
namespace {

constexpr const char* kEnglishFunctionWords[] = {"the", "a",  "an",  "of",  "to", "and", "in", "is", "it", "that",
                                                 "on",  "was", "for", "with", "as", "at",  "by", "or", "be", "this"};

std::string data_path(const std::string& p) {
  namespace fs = std::filesystem;
  if (p.empty() || fs::path(p).is_absolute()) return p;
  if (const char* dir = std::getenv("ADVCL_DATA_DIR"); dir && *dir) return (fs::path(dir) / p).string();
  return p;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string cell(double mean, double sd, int runs, bool pct) {
  if (std::isnan(mean)) return "undefined";
  char buf[64];
  const double k = pct ? 100.0 : 1.0;
  if (runs > 1) {
    std::snprintf(buf, sizeof buf, "%.2f ± %.2f", k * mean, k * sd);
  } else {
    std::snprintf(buf, sizeof buf, "%.2f", k * mean);
  }
  return buf;
}

nlohmann::json num_or_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

}  // namespace

const Corpus& World::pretrain_corpus(const DataConfig& data) const {
  if (data.pretrain_on == "ood") {
    if (!ood) throw ConfigError("out-of-domain pretraining requested but no such corpus is configured");
    return *ood;
  }
  return train;
}

World build_world(const ExperimentConfig& cfg, std::shared_ptr<const SubwordModel> subwords) {
  cfg.validate();
  World w;
  const int max_sub = cfg.model.max_len - 1;
  if (cfg.data.source == "synth") {
    const auto& s = cfg.data.synth;
    SynthOptions o = s.world;
    o.max_len = cfg.model.max_len;
    o.vocab_limit = cfg.data.vocab_limit;
    o.subwords = subwords;
    const std::pair<int, int> range{s.min_len, s.max_len};
    o.domain = s.domain;
    w.train = synth_corpus(mix_seed(cfg.seed, "train"), s.train_size, s.num_classes, range, o);
    w.test = synth_corpus(mix_seed(cfg.seed, "test"), s.test_size, s.num_classes, range, o);
    o.domain = s.ood_domain;
    w.ood = synth_corpus(mix_seed(cfg.seed, "ood"), s.pretrain_size, s.num_classes, range, o);
    w.train.dataset_id = "synth-d" + std::to_string(s.domain);
    w.test.dataset_id = w.train.dataset_id;
    w.test.split = Split::kTest;
    w.ood->dataset_id = "synth-d" + std::to_string(s.ood_domain);
    auto lex = std::make_shared<const SynthLexicon>(o, s.num_classes);
    w.table = lex->table();
    w.function_words = lex->function_words();
    w.is_protected = [lex](std::string_view word) { return lex->is_marker(word); };
  } else {
    const auto& f = cfg.data.files;
    LoadOptions lo;
    lo.subwords = subwords;
    lo.vocab_limit = cfg.data.vocab_limit;
    lo.max_len = cfg.model.max_len;
    w.train = load_corpus(data_path(f.train), f.format, lo);
    w.input_files.push_back(data_path(f.train));
    lo.split = Split::kTest;
    w.test = load_corpus(data_path(f.test), f.format, lo);
    w.input_files.push_back(data_path(f.test));
    if (!f.pretrain.empty()) {
      lo.split = Split::kTrain;
      w.ood = load_corpus(data_path(f.pretrain), f.format, lo);
      w.input_files.push_back(data_path(f.pretrain));
    }
    if (w.test.num_classes != w.train.num_classes) {
      throw ConfigError("train and test corpora disagree on the number of classes");
    }
    w.test.dataset_id = w.train.dataset_id;
    w.table = SynonymEmbeddingTable::load(data_path(f.synonyms));
    w.input_files.push_back(data_path(f.synonyms));
    w.function_words.assign(std::begin(kEnglishFunctionWords), std::end(kEnglishFunctionWords));
  }
  if (subwords) {
    w.subwords = std::move(subwords);
  } else {
    std::vector<const Corpus*> all = {&w.train, &w.test};
    if (w.ood) all.push_back(&*w.ood);
    const std::vector<std::string> lexicon =
        cfg.embedding_init == "synonym-table" ? w.table.words() : std::vector<std::string>{};
    w.subwords = train_subwords(all, cfg.data.vocab_limit, lexicon);
  }
  retokenize(w.train, w.subwords, max_sub);
  retokenize(w.test, w.subwords, max_sub);
  if (w.ood) retokenize(*w.ood, w.subwords, max_sub);
  return w;
}

EncoderConfig model_config(const ExperimentConfig& cfg, const World& world) {
  EncoderConfig m = cfg.model;
  m.vocab_size = world.subwords->size();
  m.subword_model_id = world.subwords->fingerprint();
  m.num_classes = world.train.num_classes;
  m.validate();
  return m;
}

EncoderBundle initial_model(const ExperimentConfig& cfg, const World& world) {
  EncoderBundle model(model_config(cfg, world), mix_seed(cfg.seed, "init"));
  if (cfg.embedding_init == "synonym-table") seed_token_embeddings(model, *world.subwords, world.table, cfg.seed, cfg.prior_weight);
  return model;
}

void seed_token_embeddings(EncoderBundle& model, const SubwordModel& subwords, const SynonymEmbeddingTable& table,
                           std::uint64_t seed, double weight) {
  if (table.size() == 0) return;
  // Entries N(0, 0.1^2) keep projected unit vectors at the scale of the
  // default Gaussian embedding rows.
  std::mt19937_64 rng(mix_seed(seed, "lexical-prior"));
  std::normal_distribution<double> normal(0.0, 0.1);
  Mat proj(table.dim(), model.hidden());
  for (Eigen::Index i = 0; i < proj.rows(); ++i) {
    for (Eigen::Index j = 0; j < proj.cols(); ++j) proj(i, j) = normal(rng);
  }
  auto emb = model.view(model.layout().tok_emb);
  for (int t = 0; t < subwords.size(); ++t) {
    if (!subwords.is_word_initial(t)) continue;
    if (const auto v = table.vector(subwords.token(t))) emb.row(t) = (1.0 - weight) * emb.row(t) + weight * (*v * proj);
  }
}

ProviderHandle::ProviderHandle(const ExperimentConfig& cfg, const World& world, const EncoderBundle& model) {
  if (cfg.eval.provider == "mlm") {
    mlm_model_ = std::make_unique<EncoderBundle>(model);
    fit_masked_lm_head(*mlm_model_, world.train, cfg.eval.masked_lm);
    provider_ = std::make_unique<MaskedLmProvider>(*mlm_model_, world.subwords, world.table);
  } else {
    provider_ = std::make_unique<SynonymTableProvider>(world.table);
  }
}

PretrainResult run_pretraining(const ExperimentConfig& cfg, const World& world, PretrainScheme scheme,
                               const EncoderBundle& init) {
  TrainingConfig t = cfg.training;
  t.pretrain = scheme;
  t.seed = mix_seed(cfg.seed, "pretrain");
  const Corpus& corpus = world.pretrain_corpus(cfg.data);
  switch (scheme) {
    case PretrainScheme::kNone:
      return pretrain_contrastive(t, corpus, IdentityTransform{}, init);
    case PretrainScheme::kBackTranslation: {
      BackTranslationOptions bt = t.back_translation;
      bt.is_protected = world.is_protected;
      bt.function_words = world.function_words;
      const BackTranslationTransform transform(world.subwords, world.table, bt, cfg.model.max_len);
      return pretrain_contrastive(t, corpus, transform, init);
    }
    case PretrainScheme::kAdversarial: {
      const ProviderHandle provider(cfg, world, init);
      const GeometryTransform transform(t.pretrain_attack, world.subwords, provider.get(), world.table);
      return pretrain_contrastive(t, corpus, transform, init);
    }
  }
  throw ContractError("unhandled pretraining scheme");
}

FinetuneResult run_finetuning(const ExperimentConfig& cfg, const World& world, FinetuneScheme scheme,
                              const EncoderBundle& init) {
  TrainingConfig t = cfg.training;
  t.finetune = scheme;
  t.seed = mix_seed(cfg.seed, "finetune");
  if (scheme == FinetuneScheme::kClean) return finetune_clean(init, world.train, t);
  const ProviderHandle provider(cfg, world, init);
  return finetune_adversarial(init, world.train, t, *world.subwords, provider.get(), world.table);
}

Corpus evaluation_set(const ExperimentConfig& cfg, const World& world) {
  Corpus test = world.test;
  if (cfg.eval.test_limit > 0 && test.examples.size() > static_cast<std::size_t>(cfg.eval.test_limit)) {
    test.examples.resize(static_cast<std::size_t>(cfg.eval.test_limit));
  }
  return test;
}

RobustnessReport evaluate_model(const ExperimentConfig& cfg, const World& world, const EncoderBundle& model,
                                const std::string& setting, std::vector<AttackResult>* results) {
  const ProviderHandle provider(cfg, world, model);
  const GeometryAttack attack(cfg.eval.attack, world.subwords, provider.get(), world.table, cfg.eval.attack_batch);
  RobustnessReport r = evaluate_robustness(model, evaluation_set(cfg, world), attack,
                                           ReplacementAveraging::kSuccessful, results);
  r.setting = setting;
  return r;
}

std::string Setting::name() const {
  return pretrain_scheme_name(pretrain) + (ood ? "-ood" : "") + "+" + finetune_scheme_name(finetune);
}

Setting Setting::parse(const std::string& s) {
  const auto plus = s.find('+');
  if (plus == std::string::npos) throw ConfigError("setting '" + s + "' must look like <pretrain>+<finetune>");
  std::string pre = to_lower(s.substr(0, plus));
  Setting out{};
  if (pre.size() > 4 && pre.substr(pre.size() - 4) == "-ood") {
    out.ood = true;
    pre = pre.substr(0, pre.size() - 4);
  }
  out.pretrain = parse_pretrain_scheme(pre);
  out.finetune = parse_finetune_scheme(s.substr(plus + 1));
  return out;
}

Comparison compare_reports(const std::vector<RobustnessReport>& reports) {
  if (reports.empty()) throw ConfigError("compare: no reports given");
  Comparison c;
  c.dataset_id = reports.front().dataset_id;
  c.budget = reports.front().budget;
  for (const auto& r : reports) {
    if (!(r.budget == c.budget)) {
      char buf[200];
      std::snprintf(buf, sizeof buf,
                    "compare: report '%s' uses budget %.4g/%d but '%s' uses %.4g/%d; results under different "
                    "perturbation budgets are not comparable",
                    r.setting.c_str(), r.budget.fraction, r.budget.cap, reports.front().setting.c_str(),
                    c.budget.fraction, c.budget.cap);
      throw ConfigError(buf);
    }
    if (r.dataset_id != c.dataset_id) {
      throw ConfigError("compare: reports cover different datasets (" + c.dataset_id + " vs " + r.dataset_id + ")");
    }
  }
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RobustnessReport*>> groups;
  for (const auto& r : reports) {
    if (!groups.count(r.setting)) order.push_back(r.setting);
    groups[r.setting].push_back(&r);
  }
  for (const auto& name : order) {
    std::vector<double> s, rep, acc;
    for (const auto* r : groups[name]) {
      if (r->success_rate) s.push_back(*r->success_rate);
      if (r->replacement_rate) rep.push_back(*r->replacement_rate);
      acc.push_back(r->clean_accuracy);
    }
    ComparisonRow row;
    row.setting = name;
    row.runs = static_cast<int>(groups[name].size());
    row.success_mean = mean_of(s);
    row.success_sd = sd_of(s);
    row.replaced_mean = mean_of(rep);
    row.replaced_sd = sd_of(rep);
    row.accuracy_mean = mean_of(acc);
    row.accuracy_sd = sd_of(acc);
    c.rows.push_back(row);
  }
  return c;
}

std::string Comparison::text() const {
  auto best = [&](auto get, bool lower) {
    double b = std::numeric_limits<double>::quiet_NaN();
    for (const auto& r : rows) {
      const double v = get(r);
      if (std::isnan(v)) continue;
      if (std::isnan(b) || (lower ? v < b : v > b)) b = v;
    }
    return b;
  };
  const double best_s = best([](const ComparisonRow& r) { return r.success_mean; }, true);
  const double best_r = best([](const ComparisonRow& r) { return r.replaced_mean; }, false);
  const double best_a = best([](const ComparisonRow& r) { return r.accuracy_mean; }, false);
  auto mark = [](const std::string& s, double v, double b) { return !std::isnan(v) && v == b ? "**" + s + "**" : s; };
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f/%d", budget.fraction, budget.cap);
  os << "dataset: " << dataset_id << "  budget: " << buf << "\n";
  os << "setting | runs | success % (lower is better) | replaced % | clean accuracy %\n";
  for (const auto& r : rows) {
    os << r.setting << " | " << r.runs << " | "
       << mark(cell(r.success_mean, r.success_sd, r.runs, true), r.success_mean, best_s) << " | "
       << mark(cell(r.replaced_mean, r.replaced_sd, r.runs, true), r.replaced_mean, best_r) << " | "
       << mark(cell(r.accuracy_mean, r.accuracy_sd, r.runs, true), r.accuracy_mean, best_a) << "\n";
  }
  return os.str();
}

nlohmann::json Comparison::to_json() const {
  nlohmann::json rows_j = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_j.push_back({{"setting", r.setting},
                      {"runs", r.runs},
                      {"success_mean", num_or_null(r.success_mean)},
                      {"success_sd", r.success_sd},
                      {"replaced_mean", num_or_null(r.replaced_mean)},
                      {"replaced_sd", r.replaced_sd},
                      {"accuracy_mean", num_or_null(r.accuracy_mean)},
                      {"accuracy_sd", r.accuracy_sd}});
  }
  return {{"dataset_id", dataset_id}, {"budget", budget.to_json()}, {"rows", rows_j}};
}

std::vector<SweepRow> queue_size_sweep(const ExperimentConfig& cfg, const World& world, const std::vector<int>& sizes) {
  std::vector<SweepRow> rows;
  for (int q : sizes) {
    if (q < cfg.training.contrastive.batch_size) {
      throw ConfigError("queue size " + std::to_string(q) + " is smaller than the contrastive batch size " +
                        std::to_string(cfg.training.contrastive.batch_size));
    }
  }
  for (int q : sizes) {
    ExperimentConfig c = cfg;
    c.training.contrastive.queue_size = q;
    const EncoderBundle init = initial_model(c, world);
    const PretrainResult pre = run_pretraining(c, world, PretrainScheme::kAdversarial, init);
    const FinetuneResult fin = run_finetuning(c, world, FinetuneScheme::kClean, pre.model);
    rows.push_back({q, evaluate_model(c, world, fin.model, "adcl+ftc/q" + std::to_string(q))});
  }
  return rows;
}

std::string sweep_table(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "queue_size | success % | replaced % | clean accuracy %\n";
  char buf[160];
  for (const auto& r : rows) {
    const auto& rep = r.report;
    std::snprintf(buf, sizeof buf, "%d | %s | %s | %.2f\n", r.queue_size,
                  rep.success_rate ? std::to_string(100.0 * *rep.success_rate).c_str() : "undefined",
                  rep.replacement_rate ? std::to_string(100.0 * *rep.replacement_rate).c_str() : "undefined",
                  100.0 * rep.clean_accuracy);
    os << buf;
  }
  return os.str();
}

}  // namespace advcl
