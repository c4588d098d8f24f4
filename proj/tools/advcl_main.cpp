// advcl: command-line front end for pretraining, finetuning, attacking and
// evaluating desk-scale text classifiers.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "advcl/checkpoint.hpp"
#include "advcl/config.hpp"
#include "advcl/experiment.hpp"
#include "advcl/manifest.hpp"

namespace fs = std::filesystem;
using namespace advcl;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> limit;
  std::optional<double> budget;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool needs_out = true) {
  cmd->add_option("--config", f.config, "Experiment config (JSON)");
  cmd->add_option("--seed", f.seed, "Override the config seed");
  auto* out = cmd->add_option("--out", f.out, "Output directory");
  if (needs_out) out->required();
  cmd->add_option("--limit", f.limit, "Evaluate at most this many test examples");
  cmd->add_option("--budget", f.budget, "Override the evaluation attack budget fraction");
}

ExperimentConfig resolve_config(const CommonFlags& f) {
  ExperimentConfig cfg = load_experiment_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.limit) cfg.eval.test_limit = *f.limit;
  if (f.budget) cfg.eval.attack.budget_fraction = *f.budget;
  cfg.validate();
  return cfg;
}

// Collects inputs/outputs of one command and writes its manifest.
class Run {
 public:
  Run(std::string command, const ExperimentConfig& cfg, std::string out, const std::string& config_path)
      : out_(std::move(out)), t0_(std::chrono::steady_clock::now()) {
    m_.command = std::move(command);
    m_.config = cfg.to_json();
    m_.seed = cfg.seed;
    m_.git_describe = build_git_describe();
    m_.started_at = utc_timestamp();
    m_.run_id = make_run_id(m_.command, m_.config, m_.started_at);
    fs::create_directories(out_);
    if (!config_path.empty()) input(config_path);
  }
  void input(const std::string& path) { m_.inputs.push_back(hash_artifact(fs::absolute(path).string())); }
  void inputs(const std::vector<std::string>& paths) {
    for (const auto& p : paths) input(p);
  }
  std::string path(const std::string& name) const { return (fs::path(out_) / name).string(); }
  void output(const std::string& name, const std::string& content) {
    write_file(path(name), content);
    m_.outputs.push_back(hash_artifact(path(name)));
  }
  void output_file(const std::string& name) { m_.outputs.push_back(hash_artifact(path(name))); }
  void finish() {
    m_.finished_at = utc_timestamp();
    m_.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    const std::string manifest = write_manifest(out_, m_);
    std::string registry = (fs::path(out_) / kRegistryName).string();
    if (const char* cache = std::getenv("ADVCL_CACHE_DIR"); cache && *cache) {
      registry = (fs::path(cache) / kRegistryName).string();
    }
    append_registry(registry, m_, manifest);
    std::cerr << "run " << m_.run_id << " -> " << manifest << "\n";
  }

 private:
  std::string out_;
  RunManifest m_;
  std::chrono::steady_clock::time_point t0_;
};

struct Loaded {
  EncoderBundle model;
  std::shared_ptr<const SubwordModel> subwords;
};

Loaded load_model(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  return {bundle_from(ck, "model"), ck.subwords};
}

std::string jsonl(const std::vector<nlohmann::json>& rows) {
  std::string out;
  for (const auto& r : rows) out += r.dump() + "\n";
  return out;
}

void save_model(Run& run, const std::string& name, const EncoderBundle& model, const World& world,
                nlohmann::json meta) {
  const Checkpoint ck = model_checkpoint(model, world.subwords, std::move(meta));
  run.output(name, encode_checkpoint(ck));
}

std::vector<TokenizedExample> head(const Corpus& c, int n) {
  const auto k = std::min<std::size_t>(c.size(), static_cast<std::size_t>(n));
  return {c.examples.begin(), c.examples.begin() + static_cast<std::ptrdiff_t>(k)};
}

// Adversarial counterparts generated once against a reference model.
std::vector<TokenizedExample> adversarial_pairs(const ExperimentConfig& cfg, const World& world,
                                                const EncoderBundle& reference,
                                                const std::vector<TokenizedExample>& clean) {
  const ProviderHandle provider(cfg, world, reference);
  const GeometryAttack attack(cfg.eval.attack, world.subwords, provider.get(), world.table, cfg.eval.attack_batch);
  std::vector<TokenizedExample> adv;
  for (auto& r : attack.run(reference, clean)) adv.push_back(std::move(r.perturbed));
  return adv;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"advcl: adversarial contrastive pretraining and robustness evaluation"};
  app.require_subcommand(1);

  CommonFlags f;
  std::string scheme, init, model_path, src, dst, reference, resume, setting_name, mode = "classification";
  std::vector<std::string> models, reports, settings;
  std::vector<int> sizes;
  std::optional<int> steps;
  bool save_state = false;
  std::string root;

  auto* c_synth = app.add_subcommand("synth", "Write the synthetic corpora and synonym table as files");
  add_common(c_synth, f);

  auto* c_pre = app.add_subcommand("pretrain", "Contrastive pretraining (np, btcl, adcl)");
  add_common(c_pre, f);
  c_pre->add_option("--scheme", scheme, "np | btcl | adcl")->required();
  c_pre->add_option("--steps", steps, "Override the number of pretraining steps");
  c_pre->add_option("--resume", resume, "Continue from a saved training state");
  c_pre->add_flag("--save-state", save_state, "Also write the full training state (state.ckpt)");

  auto* c_fin = app.add_subcommand("finetune", "Finetuning (ftc, adv)");
  add_common(c_fin, f);
  c_fin->add_option("--scheme", scheme, "ftc | adv")->required();
  c_fin->add_option("--init", init, "Pretrained checkpoint (fresh initialization when omitted)");

  auto* c_pregen = app.add_subcommand("pregen", "Pre-generate one adversarial example per training example");
  add_common(c_pregen, f);
  c_pregen->add_option("--model", model_path, "Model checkpoint")->required();

  auto* c_attack = app.add_subcommand("attack", "Run the geometry attack and export results as line-JSON");
  add_common(c_attack, f);
  c_attack->add_option("--model", model_path, "Model checkpoint")->required();

  auto* c_eval = app.add_subcommand("eval", "Robustness report for one model");
  add_common(c_eval, f);
  c_eval->add_option("--model", model_path, "Model checkpoint")->required();
  c_eval->add_option("--setting", setting_name, "Label stored in the report");

  auto* c_transfer = app.add_subcommand("transfer", "Transferability of attacks from --src to --dst");
  add_common(c_transfer, f);
  c_transfer->add_option("--src", src, "Model the attack runs against")->required();
  c_transfer->add_option("--dst", dst, "Model the perturbations are tested on")->required();

  auto* c_dist = app.add_subcommand("distances", "Positive/negative pair distances on h");
  add_common(c_dist, f);
  c_dist->add_option("--reference", reference, "Model used to generate the adversarial pairs")->required();
  c_dist->add_option("--model", models, "Models to measure")->required();

  auto* c_emb = app.add_subcommand("export-emb", "Export clean/adversarial h vectors as CSV");
  add_common(c_emb, f);
  c_emb->add_option("--model", model_path, "Model to encode with")->required();
  c_emb->add_option("--reference", reference, "Model used to generate the adversarial pairs (default: --model)");

  auto* c_bench = app.add_subcommand("bench", "Attack throughput benchmark");
  add_common(c_bench, f);
  c_bench->add_option("--model", model_path, "Model checkpoint")->required();

  auto* c_sweep = app.add_subcommand("sweep-queue", "ADCL+FTC robustness per queue size");
  add_common(c_sweep, f);
  c_sweep->add_option("--sizes", sizes, "Queue sizes (default from config)")->delimiter(',');

  auto* c_cmp = app.add_subcommand("compare", "Compare robustness reports");
  add_common(c_cmp, f);
  c_cmp->add_option("reports", reports, "report.json files")->required();

  auto* c_study = app.add_subcommand("study", "Train and evaluate several settings, e.g. np+ftc,adcl+ftc");
  add_common(c_study, f);
  c_study->add_option("--settings", settings, "Settings (default from config)")->delimiter(',');

  auto* c_orphans = app.add_subcommand("orphans", "List artifacts not owned by exactly one manifest");
  c_orphans->add_option("--root", root, "Directory to scan")->required();

  auto* c_verify = app.add_subcommand("verify", "Re-hash the artifacts of a manifest");
  c_verify->add_option("--manifest", model_path, "manifest.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (c_orphans->parsed()) {
      const auto orphans = find_orphans(root);
      for (const auto& o : orphans) std::cout << o << "\n";
      return orphans.empty() ? 0 : 1;
    }
    if (c_verify->parsed()) {
      load_manifest(model_path, true);
      std::cout << "ok\n";
      return 0;
    }

    const ExperimentConfig cfg = resolve_config(f);

    if (c_synth->parsed()) {
      if (cfg.data.source != "synth") throw ConfigError("synth: data.source must be 'synth'");
      Run run("synth", cfg, f.out, f.config);
      const World w = build_world(cfg);
      run.output("train.tsv", to_tsv(w.train));
      run.output("test.tsv", to_tsv(w.test));
      if (w.ood) run.output("ood.tsv", to_tsv(*w.ood));
      run.output("synonyms.txt", w.table.serialize());
      run.finish();
      return 0;
    }

    if (c_pre->parsed()) {
      ExperimentConfig c = cfg;
      if (steps) c.training.contrastive.steps = *steps;
      const PretrainScheme s = parse_pretrain_scheme(scheme);
      Run run("pretrain", c, f.out, f.config);
      std::shared_ptr<const SubwordModel> sub;
      std::optional<Checkpoint> state;
      if (!resume.empty()) {
        state = load_checkpoint(resume);
        sub = state->subwords;
        run.input(resume);
      }
      const World w = build_world(c, sub);
      run.inputs(w.input_files);
      const EncoderBundle init0 = initial_model(c, w);
      std::vector<nlohmann::json> metrics;
      EncoderBundle result = init0;
      if (s != PretrainScheme::kNone) {
        TrainingConfig t = c.training;
        t.pretrain = s;
        t.seed = mix_seed(c.seed, "pretrain");
        const Corpus& corpus = w.pretrain_corpus(c.data);
        BackTranslationOptions bt = t.back_translation;
        bt.is_protected = w.is_protected;
        bt.function_words = w.function_words;
        const ProviderHandle provider(c, w, init0);
        std::unique_ptr<TransformFn> transform;
        if (s == PretrainScheme::kBackTranslation) {
          transform = std::make_unique<BackTranslationTransform>(w.subwords, w.table, bt, c.model.max_len);
        } else {
          transform = std::make_unique<GeometryTransform>(t.pretrain_attack, w.subwords, provider.get(), w.table);
        }
        auto trainer = state ? ContrastivePretrainer::resume(t, corpus, *transform, *state)
                             : ContrastivePretrainer(t, corpus, *transform, init0);
        while (trainer.steps_done() < t.contrastive.steps) metrics.push_back(trainer.step().to_json());
        result = trainer.pair().query;
        if (save_state) run.output("state.ckpt", encode_checkpoint(trainer.save_state(w.subwords)));
      }
      run.output("pretrain_metrics.jsonl", jsonl(metrics));
      save_model(run, "model.ckpt", result, w, {{"stage", "pretrain"}, {"scheme", pretrain_scheme_name(s)}});
      run.finish();
      return 0;
    }

    if (c_fin->parsed()) {
      const FinetuneScheme s = parse_finetune_scheme(scheme);
      Run run("finetune", cfg, f.out, f.config);
      std::optional<Loaded> start;
      if (!init.empty()) {
        start = load_model(init);
        run.input(init);
      }
      const World w = build_world(cfg, start ? start->subwords : nullptr);
      run.inputs(w.input_files);
      const EncoderBundle init_model = start ? start->model : initial_model(cfg, w);
      require_class_count(init_model, w.train.num_classes);
      const FinetuneResult res = run_finetuning(cfg, w, s, init_model);
      std::vector<nlohmann::json> metrics;
      for (const auto& e : res.history) metrics.push_back(e.to_json());
      run.output("finetune_metrics.jsonl", jsonl(metrics));
      save_model(run, "model.ckpt", res.model, w, {{"stage", "finetune"}, {"scheme", finetune_scheme_name(s)}});
      run.finish();
      return 0;
    }

    // Remaining commands evaluate existing checkpoints.
    auto world_for = [&](const std::string& ckpt, Run& run) {
      Loaded l = load_model(ckpt);
      run.input(ckpt);
      World w = build_world(cfg, l.subwords);
      run.inputs(w.input_files);
      require_class_count(l.model, w.train.num_classes);
      return std::make_pair(std::move(l.model), std::move(w));
    };

    if (c_pregen->parsed()) {
      Run run("pregen", cfg, f.out, f.config);
      auto [model, w] = world_for(model_path, run);
      const ProviderHandle provider(cfg, w, model);
      const Corpus aug = pregenerate_adversarial_dataset(model, w.train, cfg.training.adv_attack, provider.get(),
                                                         w.table, cfg.eval.attack_batch);
      run.output("augmented.jsonl", serialize_corpus(aug));
      run.finish();
      return 0;
    }

    if (c_attack->parsed()) {
      Run run("attack", cfg, f.out, f.config);
      auto [model, w] = world_for(model_path, run);
      const ProviderHandle provider(cfg, w, model);
      const GeometryAttack attack(cfg.eval.attack, w.subwords, provider.get(), w.table, cfg.eval.attack_batch);
      const Corpus test = evaluation_set(cfg, w);
      const auto results = attack.run(model, test.examples);
      run.output("attacks.jsonl", export_attack_results(test.examples, results));
      run.finish();
      return 0;
    }

    if (c_eval->parsed()) {
      Run run("eval", cfg, f.out, f.config);
      auto [model, w] = world_for(model_path, run);
      const RobustnessReport rep = evaluate_model(cfg, w, model, setting_name.empty() ? "model" : setting_name);
      run.output("report.json", rep.to_jsonl());
      run.output("report.txt", rep.table());
      std::cout << rep.table();
      run.finish();
      return 0;
    }

    if (c_transfer->parsed()) {
      Run run("transfer", cfg, f.out, f.config);
      auto [m_src, w] = world_for(src, run);
      Loaded d = load_model(dst);
      run.input(dst);
      const ProviderHandle provider(cfg, w, m_src);
      const GeometryAttack attack(cfg.eval.attack, w.subwords, provider.get(), w.table, cfg.eval.attack_batch);
      const TransferReport t = transferability_eval(m_src, d.model, evaluation_set(cfg, w), attack);
      run.output("transfer.json", t.to_json().dump(2) + "\n");
      std::cout << t.to_json().dump() << "\n";
      run.finish();
      return 0;
    }

    if (c_dist->parsed()) {
      Run run("distances", cfg, f.out, f.config);
      auto [ref, w] = world_for(reference, run);
      const auto clean = head(evaluation_set(cfg, w), cfg.eval.distance_examples);
      const auto adv = adversarial_pairs(cfg, w, ref, clean);
      nlohmann::json out = nlohmann::json::array();
      for (const auto& p : models) {
        Loaded l = load_model(p);
        run.input(p);
        nlohmann::json row = distance_study(l.model, clean, adv).to_json();
        row["model"] = fs::path(p).lexically_normal().string();
        out.push_back(row);
      }
      run.output("distances.json", out.dump(2) + "\n");
      std::cout << out.dump(2) << "\n";
      run.finish();
      return 0;
    }

    if (c_emb->parsed()) {
      Run run("export-emb", cfg, f.out, f.config);
      auto [model, w] = world_for(model_path, run);
      EncoderBundle ref = model;
      if (!reference.empty()) {
        ref = load_model(reference).model;
        run.input(reference);
      }
      const auto clean = head(evaluation_set(cfg, w), cfg.eval.distance_examples);
      const auto adv = adversarial_pairs(cfg, w, ref, clean);
      std::vector<TokenizedExample> rows;
      std::vector<std::string> tags;
      std::vector<int> pairs;
      for (std::size_t i = 0; i < clean.size(); ++i) {
        rows.push_back(clean[i]);
        tags.emplace_back("clean");
        pairs.push_back(static_cast<int>(i));
        rows.push_back(adv[i]);
        tags.emplace_back("adversarial");
        pairs.push_back(static_cast<int>(i));
      }
      run.output("embeddings.csv", export_embeddings(model, rows, tags, pairs));
      run.finish();
      return 0;
    }

    if (c_bench->parsed()) {
      Run run("bench", cfg, f.out, f.config);
      auto [model, w] = world_for(model_path, run);
      const ProviderHandle provider(cfg, w, model);
      const auto sample = head(w.test, cfg.eval.bench_sample);
      const auto rows =
          speed_benchmark(model, *w.subwords, sample, cfg.eval.attack, provider.get(), w.table, cfg.eval.bench);
      const std::string csv = benchmark_csv(rows);
      run.output("bench.csv", csv);
      std::cout << csv;
      run.finish();
      return 0;
    }

    if (c_sweep->parsed()) {
      Run run("sweep-queue", cfg, f.out, f.config);
      const World w = build_world(cfg);
      run.inputs(w.input_files);
      const auto rows = queue_size_sweep(cfg, w, sizes.empty() ? cfg.eval.sweep_queue_sizes : sizes);
      nlohmann::json j = nlohmann::json::array();
      for (const auto& r : rows) j.push_back({{"queue_size", r.queue_size}, {"report", r.report.to_json()}});
      run.output("sweep.json", j.dump(2) + "\n");
      run.output("sweep.txt", sweep_table(rows));
      std::cout << sweep_table(rows);
      run.finish();
      return 0;
    }

    if (c_cmp->parsed()) {
      Run run("compare", cfg, f.out, f.config);
      std::vector<RobustnessReport> loaded;
      for (const auto& p : reports) {
        std::istringstream in(read_file(p));
        std::string first;
        std::getline(in, first);
        loaded.push_back(RobustnessReport::from_json(nlohmann::json::parse(first)));
        run.input(p);
      }
      const Comparison cmp = compare_reports(loaded);
      run.output("comparison.txt", cmp.text());
      run.output("comparison.json", cmp.to_json().dump(2) + "\n");
      std::cout << cmp.text();
      run.finish();
      return 0;
    }

    if (c_study->parsed()) {
      const auto names = settings.empty() ? cfg.eval.study_settings : settings;
      const World w = build_world(cfg);
      const EncoderBundle init0 = initial_model(cfg, w);
      std::map<std::string, EncoderBundle> pretrained;
      std::vector<RobustnessReport> all;
      for (const auto& name : names) {
        const Setting st = Setting::parse(name);
        ExperimentConfig c = cfg;
        if (st.ood) c.data.pretrain_on = "ood";
        Run run("study", c, (fs::path(f.out) / st.name()).string(), f.config);
        run.inputs(w.input_files);
        const std::string pre_key = pretrain_scheme_name(st.pretrain) + (st.ood ? "-ood" : "");
        if (!pretrained.count(pre_key)) {
          pretrained.emplace(pre_key, run_pretraining(c, w, st.pretrain, init0).model);
        }
        const FinetuneResult fin = run_finetuning(c, w, st.finetune, pretrained.at(pre_key));
        const RobustnessReport rep = evaluate_model(c, w, fin.model, st.name());
        save_model(run, "model.ckpt", fin.model, w, {{"setting", st.name()}});
        run.output("report.json", rep.to_jsonl());
        run.output("report.txt", rep.table());
        run.finish();
        all.push_back(rep);
      }
      Run run("compare", cfg, (fs::path(f.out) / "comparison").string(), f.config);
      const Comparison cmp = compare_reports(all);
      run.output("comparison.txt", cmp.text());
      run.output("comparison.json", cmp.to_json().dump(2) + "\n");
      std::cout << cmp.text();
      run.finish();
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const LoadError& e) {
    std::cerr << "load error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
