#include "advcl/config.hpp"

#include <set>

extern char** environ;

namespace advcl {
namespace {

using nlohmann::json;

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ConfigError("config field '" + path + "': " + what);
}

// Binds one JSON object, tracking which keys were consumed.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "<root>" : path_, "expected an object");
  }

  void get(const char* key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) fail(join(path_, key), "expected an integer, got " + std::string(v->type_name()));
      out = v->get<int>();
    }
  }
  void get(const char* key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<std::int64_t>() < 0)) {
        fail(join(path_, key), "expected a non-negative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(join(path_, key), "expected a number, got " + std::string(v->type_name()));
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(join(path_, key), "expected a boolean, got " + std::string(v->type_name()));
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(join(path_, key), "expected a string, got " + std::string(v->type_name()));
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::vector<int>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(join(path_, key), "expected an array of integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_integer()) fail(join(path_, key), "expected an array of integers");
        out.push_back(e.get<int>());
      }
    }
  }
  void get(const char* key, std::vector<std::string>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(join(path_, key), "expected an array of strings");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_string()) fail(join(path_, key), "expected an array of strings");
        out.push_back(e.get<std::string>());
      }
    }
  }
  template <class F>
  void child(const char* key, F&& bind) {
    static const json kEmpty = json::object();
    const json* v = find(key);
    Reader r(v ? *v : kEmpty, join(path_, key));
    bind(r);
    r.finish();
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) fail(join(path_, it.key()), "unknown field");
    }
  }
  const std::string& path() const { return path_; }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void bind_attack(Reader& r, AttackConfig& a) {
  r.get("max_iters", a.max_iters);
  r.get("candidate_limit", a.candidate_limit);
  r.get("cosine_threshold", a.cosine_threshold);
  r.get("budget_fraction", a.budget_fraction);
  r.get("budget_cap", a.budget_cap);
  r.get("no_repeat", a.no_repeat);
  std::string loss = a.loss_kind == LossKind::kContrastive ? "contrastive" : "classification";
  r.get("loss", loss);
  if (loss == "contrastive") {
    a.loss_kind = LossKind::kContrastive;
  } else if (loss == "classification") {
    a.loss_kind = LossKind::kClassification;
  } else {
    fail(join(r.path(), "loss"), "expected 'contrastive' or 'classification'");
  }
  std::string proj = a.projection == ProjectionRule::kSigned ? "signed" : "absolute";
  r.get("projection", proj);
  if (proj == "signed") {
    a.projection = ProjectionRule::kSigned;
  } else if (proj == "absolute") {
    a.projection = ProjectionRule::kAbsolute;
  } else {
    fail(join(r.path(), "projection"), "expected 'signed' or 'absolute'");
  }
}

void bind_synth_world(Reader& r, SynthOptions& o) {
  r.get("lexicon_seed", o.lexicon_seed);
  r.get("num_domains", o.num_domains);
  r.get("markers_per_class", o.markers_per_class);
  r.get("marker_forms", o.marker_forms);
  r.get("seen_marker_forms", o.seen_marker_forms);
  r.get("neutral_concepts", o.neutral_concepts);
  r.get("neutral_forms", o.neutral_forms);
  r.get("seen_neutral_forms", o.seen_neutral_forms);
  r.get("min_markers", o.min_markers);
  r.get("max_markers", o.max_markers);
  r.get("function_word_rate", o.function_word_rate);
  r.get("spurious_bias", o.spurious_bias);
  r.get("embedding_dim", o.embedding_dim);
  r.get("synonym_noise", o.synonym_noise);
}

json synth_world_json(const SynthOptions& o) {
  return {{"lexicon_seed", o.lexicon_seed},
          {"num_domains", o.num_domains},
          {"markers_per_class", o.markers_per_class},
          {"marker_forms", o.marker_forms},
          {"seen_marker_forms", o.seen_marker_forms},
          {"neutral_concepts", o.neutral_concepts},
          {"neutral_forms", o.neutral_forms},
          {"seen_neutral_forms", o.seen_neutral_forms},
          {"min_markers", o.min_markers},
          {"max_markers", o.max_markers},
          {"function_word_rate", o.function_word_rate},
          {"spurious_bias", o.spurious_bias},
          {"embedding_dim", o.embedding_dim},
          {"synonym_noise", o.synonym_noise}};
}

void set_path(json& doc, const std::vector<std::string>& path, json value) {
  json* cur = &doc;
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    if (!cur->is_object()) throw ConfigError("environment override: '" + path[i] + "' is not an object");
    cur = &(*cur)[path[i]];
    if (cur->is_null()) *cur = json::object();
  }
  if (!cur->is_object()) throw ConfigError("environment override: parent of '" + path.back() + "' is not an object");
  (*cur)[path.back()] = std::move(value);
}

}  // namespace

AttackConfig EvalConfig::default_eval_attack() {
  AttackConfig c;
  c.loss_kind = LossKind::kClassification;
  c.budget_fraction = 0.4;
  c.budget_cap = 20;
  c.candidate_limit = 25;
  c.max_iters = 20;
  return c;
}

json ExperimentConfig::to_json() const {
  const auto& s = data.synth;
  const auto& t = training;
  const auto& m = model;
  return {
      {"schema_version", schema_version},
      {"seed", seed},
      {"data",
       {{"source", data.source},
        {"pretrain_on", data.pretrain_on},
        {"vocab_limit", data.vocab_limit},
        {"synth",
         {{"train_size", s.train_size},
          {"test_size", s.test_size},
          {"pretrain_size", s.pretrain_size},
          {"num_classes", s.num_classes},
          {"min_len", s.min_len},
          {"max_len", s.max_len},
          {"domain", s.domain},
          {"ood_domain", s.ood_domain},
          {"world", synth_world_json(s.world)}}},
        {"files",
         {{"format", data.files.format},
          {"train", data.files.train},
          {"test", data.files.test},
          {"synonyms", data.files.synonyms},
          {"pretrain", data.files.pretrain}}}}},
      {"model",
       {{"max_len", m.max_len},
        {"hidden", m.hidden},
        {"layers", m.layers},
        {"heads", m.heads},
        {"ffn", m.ffn},
        {"proj_hidden", m.proj_hidden},
        {"proj_dim", m.proj_dim},
        {"truncate", m.truncate},
        {"embedding_init", embedding_init},
        {"prior_weight", prior_weight}}},
      {"training",
       {{"pretrain_scheme", pretrain_scheme_name(t.pretrain)},
        {"finetune_scheme", finetune_scheme_name(t.finetune)},
        {"contrastive",
         {{"steps", t.contrastive.steps},
          {"batch_size", t.contrastive.batch_size},
          {"learning_rate", t.contrastive.learning_rate},
          {"warmup_steps", t.contrastive.warmup_steps},
          {"tau", t.contrastive.tau},
          {"momentum", t.contrastive.momentum},
          {"queue_size", t.contrastive.queue_size}}},
        {"finetune",
         {{"epochs", t.finetuning.epochs},
          {"batch_size", t.finetuning.batch_size},
          {"learning_rate", t.finetuning.learning_rate},
          {"warmup_steps", t.finetuning.warmup_steps},
          {"attack_timeout_s", t.finetuning.attack_timeout_s}}},
        {"pretrain_attack", t.pretrain_attack.to_json()},
        {"adv_attack", t.adv_attack.to_json()},
        {"back_translation",
         {{"swap_rate", t.back_translation.swap_rate},
          {"cosine_threshold", t.back_translation.cosine_threshold},
          {"candidate_limit", t.back_translation.candidate_limit}}},
        {"adam",
         {{"beta1", t.adam.beta1},
          {"beta2", t.adam.beta2},
          {"eps", t.adam.eps},
          {"weight_decay", t.adam.weight_decay},
          {"clip_norm", t.adam.clip_norm}}}}},
      {"eval",
       {{"attack", eval.attack.to_json()},
        {"provider", eval.provider},
        {"masked_lm",
         {{"steps", eval.masked_lm.steps},
          {"batch_size", eval.masked_lm.batch_size},
          {"learning_rate", eval.masked_lm.learning_rate},
          {"seed", eval.masked_lm.seed}}},
        {"attack_batch", eval.attack_batch},
        {"test_limit", eval.test_limit},
        {"distance_examples", eval.distance_examples},
        {"bench_sample", eval.bench_sample},
        {"bench",
         {{"batch_sizes", eval.bench.batch_sizes},
          {"repeats", eval.bench.repeats},
          {"include_baseline", eval.bench.include_baseline}}},
        {"sweep_queue_sizes", eval.sweep_queue_sizes},
        {"study_settings", eval.study_settings}}}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  Reader root(j, "");
  int version = -1;
  root.get("schema_version", version);
  if (version != kConfigSchemaVersion) {
    fail("schema_version", "expected " + std::to_string(kConfigSchemaVersion) + ", got " +
                               (version < 0 ? std::string("none") : std::to_string(version)));
  }
  root.get("seed", c.seed);
  root.child("data", [&](Reader& r) {
    r.get("source", c.data.source);
    r.get("pretrain_on", c.data.pretrain_on);
    r.get("vocab_limit", c.data.vocab_limit);
    r.child("synth", [&](Reader& s) {
      auto& d = c.data.synth;
      s.get("train_size", d.train_size);
      s.get("test_size", d.test_size);
      s.get("pretrain_size", d.pretrain_size);
      s.get("num_classes", d.num_classes);
      s.get("min_len", d.min_len);
      s.get("max_len", d.max_len);
      s.get("domain", d.domain);
      s.get("ood_domain", d.ood_domain);
      s.child("world", [&](Reader& w) { bind_synth_world(w, d.world); });
    });
    r.child("files", [&](Reader& f) {
      f.get("format", c.data.files.format);
      f.get("train", c.data.files.train);
      f.get("test", c.data.files.test);
      f.get("synonyms", c.data.files.synonyms);
      f.get("pretrain", c.data.files.pretrain);
    });
  });
  root.child("model", [&](Reader& r) {
    r.get("max_len", c.model.max_len);
    r.get("hidden", c.model.hidden);
    r.get("layers", c.model.layers);
    r.get("heads", c.model.heads);
    r.get("ffn", c.model.ffn);
    r.get("proj_hidden", c.model.proj_hidden);
    r.get("proj_dim", c.model.proj_dim);
    r.get("truncate", c.model.truncate);
    r.get("embedding_init", c.embedding_init);
    r.get("prior_weight", c.prior_weight);
  });
  root.child("training", [&](Reader& r) {
    auto& t = c.training;
    std::string pre = pretrain_scheme_name(t.pretrain), fin = finetune_scheme_name(t.finetune);
    r.get("pretrain_scheme", pre);
    r.get("finetune_scheme", fin);
    try {
      t.pretrain = parse_pretrain_scheme(pre);
    } catch (const ConfigError& e) {
      fail("training.pretrain_scheme", e.what());
    }
    try {
      t.finetune = parse_finetune_scheme(fin);
    } catch (const ConfigError& e) {
      fail("training.finetune_scheme", e.what());
    }
    r.child("contrastive", [&](Reader& s) {
      s.get("steps", t.contrastive.steps);
      s.get("batch_size", t.contrastive.batch_size);
      s.get("learning_rate", t.contrastive.learning_rate);
      s.get("warmup_steps", t.contrastive.warmup_steps);
      s.get("tau", t.contrastive.tau);
      s.get("momentum", t.contrastive.momentum);
      s.get("queue_size", t.contrastive.queue_size);
    });
    r.child("finetune", [&](Reader& s) {
      s.get("epochs", t.finetuning.epochs);
      s.get("batch_size", t.finetuning.batch_size);
      s.get("learning_rate", t.finetuning.learning_rate);
      s.get("warmup_steps", t.finetuning.warmup_steps);
      s.get("attack_timeout_s", t.finetuning.attack_timeout_s);
    });
    r.child("pretrain_attack", [&](Reader& s) { bind_attack(s, t.pretrain_attack); });
    r.child("adv_attack", [&](Reader& s) { bind_attack(s, t.adv_attack); });
    r.child("back_translation", [&](Reader& s) {
      s.get("swap_rate", t.back_translation.swap_rate);
      s.get("cosine_threshold", t.back_translation.cosine_threshold);
      s.get("candidate_limit", t.back_translation.candidate_limit);
    });
    r.child("adam", [&](Reader& s) {
      s.get("beta1", t.adam.beta1);
      s.get("beta2", t.adam.beta2);
      s.get("eps", t.adam.eps);
      s.get("weight_decay", t.adam.weight_decay);
      s.get("clip_norm", t.adam.clip_norm);
    });
  });
  root.child("eval", [&](Reader& r) {
    auto& e = c.eval;
    r.child("attack", [&](Reader& s) { bind_attack(s, e.attack); });
    r.get("provider", e.provider);
    r.child("masked_lm", [&](Reader& s) {
      s.get("steps", e.masked_lm.steps);
      s.get("batch_size", e.masked_lm.batch_size);
      s.get("learning_rate", e.masked_lm.learning_rate);
      s.get("seed", e.masked_lm.seed);
    });
    r.get("attack_batch", e.attack_batch);
    r.get("test_limit", e.test_limit);
    r.get("distance_examples", e.distance_examples);
    r.get("bench_sample", e.bench_sample);
    r.child("bench", [&](Reader& s) {
      s.get("batch_sizes", e.bench.batch_sizes);
      s.get("repeats", e.bench.repeats);
      s.get("include_baseline", e.bench.include_baseline);
    });
    r.get("sweep_queue_sizes", e.sweep_queue_sizes);
    r.get("study_settings", e.study_settings);
  });
  root.finish();
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  if (data.source != "synth" && data.source != "files") fail("data.source", "expected 'synth' or 'files'");
  if (data.pretrain_on != "train" && data.pretrain_on != "ood") fail("data.pretrain_on", "expected 'train' or 'ood'");
  if (data.vocab_limit < 16 || data.vocab_limit > SubwordModel::kMaxVocab) {
    fail("data.vocab_limit", "must lie in [16, " + std::to_string(SubwordModel::kMaxVocab) + "]");
  }
  if (embedding_init != "random" && embedding_init != "synonym-table") {
    fail("model.embedding_init", "expected 'random' or 'synonym-table'");
  }
  if (!(prior_weight >= 0.0 && prior_weight <= 1.0)) fail("model.prior_weight", "must lie in [0, 1]");
  const auto& s = data.synth;
  if (data.source == "synth") {
    if (s.num_classes < 2) fail("data.synth.num_classes", "must be >= 2");
    if (s.train_size < s.num_classes) fail("data.synth.train_size", "must be >= num_classes");
    if (s.test_size < s.num_classes) fail("data.synth.test_size", "must be >= num_classes");
    if (s.min_len < 3 || s.max_len < s.min_len) fail("data.synth.min_len", "need 3 <= min_len <= max_len");
    if (s.domain < 0 || s.domain >= s.world.num_domains) fail("data.synth.domain", "out of range");
    if (s.ood_domain < 0 || s.ood_domain >= s.world.num_domains) fail("data.synth.ood_domain", "out of range");
  } else {
    if (data.files.train.empty()) fail("data.files.train", "required when data.source is 'files'");
    if (data.files.test.empty()) fail("data.files.test", "required when data.source is 'files'");
    if (data.files.synonyms.empty()) fail("data.files.synonyms", "required when data.source is 'files'");
    if (data.pretrain_on == "ood" && data.files.pretrain.empty()) {
      fail("data.files.pretrain", "required when data.pretrain_on is 'ood'");
    }
  }
  if (eval.provider != "table" && eval.provider != "mlm") fail("eval.provider", "expected 'table' or 'mlm'");
  if (eval.attack_batch < 1) fail("eval.attack_batch", "must be >= 1");
  if (eval.test_limit < 0) fail("eval.test_limit", "must be >= 0");
  if (eval.distance_examples < 2) fail("eval.distance_examples", "must be >= 2");
  if (eval.bench_sample < 1) fail("eval.bench_sample", "must be >= 1");
  for (int q : eval.sweep_queue_sizes) {
    if (q < training.contrastive.batch_size) {
      fail("eval.sweep_queue_sizes", "queue size " + std::to_string(q) + " is smaller than the batch size " +
                                         std::to_string(training.contrastive.batch_size));
    }
  }
  try {
    training.validate();
    eval.attack.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

void apply_env_overrides(json& doc, const std::map<std::string, std::string>& env) {
  static const std::string kPrefix = "ADVCL__";
  for (const auto& [name, value] : env) {
    if (name.rfind(kPrefix, 0) != 0) continue;
    std::vector<std::string> path;
    std::string rest = name.substr(kPrefix.size());
    for (;;) {
      const auto pos = rest.find("__");
      path.push_back(to_lower(rest.substr(0, pos)));
      if (pos == std::string::npos) break;
      rest = rest.substr(pos + 2);
    }
    if (path.empty() || path.back().empty()) throw ConfigError("environment override " + name + " has no field name");
    json parsed = json::parse(value, nullptr, false);
    set_path(doc, path, parsed.is_discarded() ? json(value) : parsed);
  }
}

std::map<std::string, std::string> current_environment() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string kv = *e;
    const auto eq = kv.find('=');
    if (eq != std::string::npos) out.emplace(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return out;
}

ExperimentConfig load_experiment_config(const std::string& path, const std::map<std::string, std::string>& env) {
  json doc;
  if (path.empty()) {
    doc = ExperimentConfig{}.to_json();
  } else {
    const std::string text = read_file(path);
    doc = json::parse(text, nullptr, false);
    if (doc.is_discarded()) throw ConfigError("config " + path + " is not valid JSON");
  }
  apply_env_overrides(doc, env);
  return ExperimentConfig::from_json(doc);
}

}  // namespace advcl
