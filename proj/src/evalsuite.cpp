#include "advcl/evalsuite.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace advcl {
namespace {

constexpr int kClassifyBatch = 64;

std::vector<int> predict_all(const EncoderBundle& model, std::span<const TokenizedExample> examples) {
  std::vector<int> out;
  out.reserve(examples.size());
  for (std::size_t at = 0; at < examples.size(); at += kClassifyBatch) {
    const std::size_t n = std::min<std::size_t>(kClassifyBatch, examples.size() - at);
    const Classification c = classify(model, examples.subspan(at, n));
    out.insert(out.end(), c.predicted.begin(), c.predicted.end());
  }
  return out;
}

Mat encode_h(const EncoderBundle& model, std::span<const TokenizedExample> examples) {
  Mat out(static_cast<Eigen::Index>(examples.size()), model.hidden());
  for (std::size_t at = 0; at < examples.size(); at += kClassifyBatch) {
    const std::size_t n = std::min<std::size_t>(kClassifyBatch, examples.size() - at);
    out.middleRows(static_cast<Eigen::Index>(at), static_cast<Eigen::Index>(n)) =
        encode(model, examples.subspan(at, n)).h;
  }
  return out;
}

std::string fmt_pct(const std::optional<double>& v) {
  if (!v) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * *v);
  return buf;
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::optional<double> opt_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

}  // namespace

nlohmann::json ExampleOutcome::to_json() const {
  return {{"id", id},         {"label", label},       {"predicted", predicted}, {"correct", correct},
          {"success", success}, {"num_words", num_words}, {"replaced", replaced},   {"queries", queries}};
}

void summarize(RobustnessReport& r) {
  r.num_examples = static_cast<int>(r.per_example.size());
  r.num_correct = 0;
  r.num_success = 0;
  double frac_sum = 0.0;
  int frac_n = 0;
  for (const auto& e : r.per_example) {
    if (!e.correct) continue;
    ++r.num_correct;
    if (e.success) ++r.num_success;
    const bool counts = r.averaging == ReplacementAveraging::kAllAttacked || e.success;
    if (counts && e.num_words > 0) {
      frac_sum += static_cast<double>(e.replaced) / e.num_words;
      ++frac_n;
    }
  }
  r.clean_accuracy = r.num_examples > 0 ? static_cast<double>(r.num_correct) / r.num_examples : 0.0;
  r.success_rate = r.num_correct > 0 ? std::optional<double>(static_cast<double>(r.num_success) / r.num_correct)
                                     : std::nullopt;
  r.replacement_rate = frac_n > 0 ? std::optional<double>(frac_sum / frac_n) : std::nullopt;
}

nlohmann::json RobustnessReport::to_json() const {
  return {{"format", "advcl-robustness"},
          {"version", 1},
          {"dataset_id", dataset_id},
          {"setting", setting},
          {"attack", attack},
          {"budget", budget.to_json()},
          {"replacement_averaging", averaging == ReplacementAveraging::kSuccessful ? "successful" : "all"},
          {"num_examples", num_examples},
          {"num_correct", num_correct},
          {"num_success", num_success},
          {"clean_accuracy", clean_accuracy},
          {"success_rate", opt_json(success_rate)},
          {"replacement_rate", opt_json(replacement_rate)}};
}

RobustnessReport RobustnessReport::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "advcl-robustness") throw ConfigError("not a robustness report");
  if (j.value("version", 0) != 1) throw ConfigError("unsupported robustness report version");
  RobustnessReport r;
  r.dataset_id = j.at("dataset_id").get<std::string>();
  r.setting = j.value("setting", "");
  r.attack = j.at("attack").get<std::string>();
  r.budget.fraction = j.at("budget").at("fraction").get<double>();
  r.budget.cap = j.at("budget").at("cap").get<int>();
  r.averaging = j.value("replacement_averaging", "successful") == "successful" ? ReplacementAveraging::kSuccessful
                                                                               : ReplacementAveraging::kAllAttacked;
  r.num_examples = j.at("num_examples").get<int>();
  r.num_correct = j.at("num_correct").get<int>();
  r.num_success = j.at("num_success").get<int>();
  r.clean_accuracy = j.at("clean_accuracy").get<double>();
  r.success_rate = opt_from(j.at("success_rate"));
  r.replacement_rate = opt_from(j.at("replacement_rate"));
  return r;
}

std::string RobustnessReport::to_jsonl() const {
  std::string out = to_json().dump() + "\n";
  for (const auto& e : per_example) out += e.to_json().dump() + "\n";
  return out;
}

std::string RobustnessReport::table() const {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-16s %-20s %-16s %-14s %9s %9s %9s %8s\n", "setting", "dataset", "attack",
                "budget", "clean", "success", "replaced", "correct");
  os << buf;
  char budget_s[32];
  std::snprintf(budget_s, sizeof budget_s, "%.2f/%d", budget.fraction, budget.cap);
  std::snprintf(buf, sizeof buf, "%-16s %-20s %-16s %-14s %9s %9s %9s %8d\n", setting.c_str(), dataset_id.c_str(),
                attack.c_str(), budget_s, fmt_pct(clean_accuracy).c_str(), fmt_pct(success_rate).c_str(),
                fmt_pct(replacement_rate).c_str(), num_correct);
  os << buf;
  return os.str();
}

RobustnessReport evaluate_robustness(const EncoderBundle& model, const Corpus& test, const Attack& attack,
                                     ReplacementAveraging averaging, std::vector<AttackResult>* results) {
  require_class_count(model, test.num_classes);
  RobustnessReport r;
  r.dataset_id = test.dataset_id;
  r.attack = attack.name();
  r.budget = attack.budget();
  r.averaging = averaging;
  const auto predicted = predict_all(model, test.examples);
  std::vector<TokenizedExample> targets;
  std::vector<std::size_t> where;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& ex = test.examples[i];
    if (!ex.label) throw ConfigError("evaluation needs labels; example " + ex.id + " has none");
    ExampleOutcome o;
    o.id = ex.id;
    o.label = *ex.label;
    o.predicted = predicted[i];
    o.correct = o.predicted == o.label;
    o.num_words = clip_to_length(ex, model.config().max_len).num_words();
    if (o.correct) {
      targets.push_back(ex);
      where.push_back(i);
    }
    r.per_example.push_back(std::move(o));
  }
  auto attacked = targets.empty() ? std::vector<AttackResult>{} : attack.run(model, targets);
  for (std::size_t k = 0; k < attacked.size(); ++k) {
    ExampleOutcome& o = r.per_example[where[k]];
    o.success = attacked[k].success && !attacked[k].already_misclassified;
    o.replaced = static_cast<int>(attacked[k].replaced_indices.size());
    o.queries = attacked[k].queries;
  }
  summarize(r);
  if (results) *results = std::move(attacked);
  return r;
}

nlohmann::json TransferReport::to_json() const {
  return {{"denominator", denominator}, {"successes", successes}, {"success_rate", opt_json(success_rate)}};
}

TransferReport transferability_eval(const EncoderBundle& model_src, const EncoderBundle& model_dst,
                                    const Corpus& test, const Attack& attack) {
  if (model_src.config().subword_model_id != model_dst.config().subword_model_id ||
      model_src.config().vocab_size != model_dst.config().vocab_size) {
    throw ContractError("transferability: models use different vocabularies");
  }
  if (model_src.num_classes() != model_dst.num_classes()) {
    throw ContractError("transferability: models have different class spaces");
  }
  require_class_count(model_dst, test.num_classes);
  const auto clean_dst = predict_all(model_dst, test.examples);
  const auto perturbed = attack.run(model_src, test.examples);
  std::vector<TokenizedExample> adv;
  adv.reserve(perturbed.size());
  for (const auto& p : perturbed) adv.push_back(p.perturbed);
  const auto adv_dst = predict_all(model_dst, adv);
  TransferReport t;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const int y = *test.examples[i].label;
    if (clean_dst[i] != y) continue;
    ++t.denominator;
    if (adv_dst[i] != y) ++t.successes;
  }
  if (t.denominator > 0) t.success_rate = static_cast<double>(t.successes) / t.denominator;
  return t;
}

nlohmann::json DistanceReport::to_json() const {
  return {{"d_pos", d_pos}, {"d_neg", d_neg}, {"delta", delta}, {"m", m}};
}

DistanceReport distance_report(const Mat& v, const Mat& v_adv) {
  if (v.rows() != v_adv.rows() || v.cols() != v_adv.cols()) throw ContractError("distance study: shape mismatch");
  const Eigen::Index M = v.rows();
  if (M < 2) throw ContractError("distance study needs M >= 2");
  DistanceReport r;
  r.m = static_cast<int>(M);
  double pos = 0.0;
  for (Eigen::Index i = 0; i < M; ++i) pos += (v.row(i) - v_adv.row(i)).norm();
  r.d_pos = pos / static_cast<double>(M);
  double neg = 0.0;
  for (Eigen::Index i = 0; i < M; ++i) {
    for (Eigen::Index j = 0; j < M; ++j) {
      if (i == j) continue;
      neg += (v.row(i) - v.row(j)).norm() + (v.row(i) - v_adv.row(j)).norm();
    }
  }
  r.d_neg = neg / (2.0 * static_cast<double>(M) * static_cast<double>(M - 1));
  r.delta = r.d_neg - r.d_pos;
  return r;
}

DistanceReport distance_study(const EncoderBundle& model, std::span<const TokenizedExample> clean,
                              std::span<const TokenizedExample> adversarial) {
  if (clean.size() != adversarial.size()) throw ContractError("distance study: clean/adversarial count mismatch");
  return distance_report(encode_h(model, clean), encode_h(model, adversarial));
}

std::string export_embeddings(const EncoderBundle& model, std::span<const TokenizedExample> examples,
                              std::span<const std::string> tags, std::span<const int> pair_ids) {
  if (tags.size() != examples.size() || pair_ids.size() != examples.size()) {
    throw ContractError("export_embeddings: one tag and pair id per example required");
  }
  std::string out = "id,tag,pair_id";
  for (int k = 0; k < model.hidden(); ++k) out += ",v" + std::to_string(k);
  out += '\n';
  if (examples.empty()) return out;
  const Mat h = encode_h(model, examples);
  char buf[40];
  for (std::size_t i = 0; i < examples.size(); ++i) {
    out += csv_field(examples[i].id) + ',' + csv_field(tags[i]) + ',' + std::to_string(pair_ids[i]);
    for (Eigen::Index k = 0; k < h.cols(); ++k) {
      std::snprintf(buf, sizeof buf, ",%.17g", h(static_cast<Eigen::Index>(i), k));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

std::vector<EmbeddingRow> parse_embeddings(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line)) throw LoadError("<embeddings>", 1, "missing header");
  const auto header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "id" || header[1] != "tag" || header[2] != "pair_id") {
    throw LoadError("<embeddings>", 1, "unexpected header");
  }
  const std::size_t width = header.size() - 3;
  std::vector<EmbeddingRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size()) throw LoadError("<embeddings>", lineno, "wrong number of fields");
    EmbeddingRow r;
    r.id = f[0];
    r.tag = f[1];
    try {
      r.pair_id = std::stoi(f[2]);
      for (std::size_t k = 0; k < width; ++k) r.values.push_back(std::stod(f[3 + k]));
    } catch (const std::exception&) {
      throw LoadError("<embeddings>", lineno, "non-numeric field");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<BenchmarkRow> speed_benchmark(const EncoderBundle& model, const SubwordModel& subwords,
                                          std::span<const TokenizedExample> sample, const AttackConfig& config,
                                          const CandidateProvider& provider, const SynonymEmbeddingTable& table,
                                          const BenchmarkOptions& options) {
  if (sample.empty()) throw ConfigError("benchmark sample is empty");
  if (options.repeats < 1) throw ConfigError("benchmark repeats must be >= 1");
  using Clock = std::chrono::steady_clock;
  const auto n = static_cast<double>(sample.size());
  auto measure = [&](const std::string& attack, const std::string& mode, int bs, const auto& body) {
    body();  // warm-up
    std::vector<double> per_example;
    for (int r = 0; r < options.repeats; ++r) {
      const auto t0 = Clock::now();
      body();
      per_example.push_back(std::chrono::duration<double>(Clock::now() - t0).count() / n);
    }
    BenchmarkRow row;
    row.attack = attack;
    row.mode = mode;
    row.batch_size = bs;
    row.examples = static_cast<int>(sample.size());
    row.repeats = options.repeats;
    double mean = 0.0;
    for (double x : per_example) mean += x;
    mean /= static_cast<double>(per_example.size());
    double var = 0.0;
    for (double x : per_example) var += (x - mean) * (x - mean);
    row.mean_seconds_per_example = mean;
    row.sd_seconds_per_example =
        per_example.size() > 1 ? std::sqrt(var / static_cast<double>(per_example.size() - 1)) : 0.0;
    return row;
  };
  std::vector<BenchmarkRow> rows;
  rows.push_back(measure("geometry", "sequential", 1, [&] {
    for (const auto& ex : sample) geometry_attack(model, subwords, ex, config, provider, table);
  }));
  for (int bs : options.batch_sizes) {
    if (bs < 1) throw ConfigError("benchmark batch sizes must be >= 1");
    rows.push_back(measure("geometry", "batched", bs, [&] {
      for (std::size_t at = 0; at < sample.size(); at += static_cast<std::size_t>(bs)) {
        const std::size_t k = std::min(static_cast<std::size_t>(bs), sample.size() - at);
        geometry_attack_batched(model, subwords, sample.subspan(at, k), config, provider, table);
      }
    }));
  }
  if (options.include_baseline && config.loss_kind == LossKind::kClassification) {
    rows.push_back(measure("random-synonym", "sequential", 1, [&] {
      for (const auto& ex : sample) baseline_random_synonym_attack(model, subwords, ex, config, table);
    }));
  }
  return rows;
}

std::string benchmark_csv(const std::vector<BenchmarkRow>& rows) {
  std::string out = "attack,mode,batch_size,examples,repeats,mean_seconds_per_example,sd_seconds_per_example\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%d,%d,%d,%.9g,%.9g\n", r.attack.c_str(), r.mode.c_str(), r.batch_size,
                  r.examples, r.repeats, r.mean_seconds_per_example, r.sd_seconds_per_example);
    out += buf;
  }
  return out;
}

}  // namespace advcl
