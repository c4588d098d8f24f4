#include <gtest/gtest.h>

#include "advcl/config.hpp"
#include "test_util.hpp"

namespace advcl {
namespace {

std::string error_of(const nlohmann::json& j) {
  try {
    ExperimentConfig::from_json(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(Config, DefaultsRoundTrip) {
  const ExperimentConfig c;
  const auto back = ExperimentConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(Config, PartialDocumentKeepsDefaults) {
  const auto c = ExperimentConfig::from_json({{"schema_version", 1}, {"seed", 9}});
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.training.contrastive.tau, ExperimentConfig{}.training.contrastive.tau);
}

TEST(Config, UnknownFieldNamesItsPath) {
  auto j = ExperimentConfig{}.to_json();
  j["training"]["contrastive"]["temprature"] = 0.1;
  EXPECT_NE(error_of(j).find("training.contrastive.temprature"), std::string::npos) << error_of(j);
}

TEST(Config, TypeErrorNamesItsPath) {
  auto j = ExperimentConfig{}.to_json();
  j["training"]["contrastive"]["steps"] = "many";
  const std::string e = error_of(j);
  EXPECT_NE(e.find("training.contrastive.steps"), std::string::npos) << e;
  EXPECT_NE(e.find("integer"), std::string::npos) << e;
}

TEST(Config, SchemaVersionIsChecked) {
  auto j = ExperimentConfig{}.to_json();
  j["schema_version"] = 2;
  EXPECT_NE(error_of(j).find("schema_version"), std::string::npos);
}

TEST(Config, RangeChecks) {
  auto j = ExperimentConfig{}.to_json();
  j["eval"]["attack"]["cosine_threshold"] = 1.5;
  EXPECT_FALSE(error_of(j).empty());
  j = ExperimentConfig{}.to_json();
  j["training"]["contrastive"]["queue_size"] = 4;
  EXPECT_FALSE(error_of(j).empty());
}

TEST(Config, EnvironmentOverridesNestedFields) {
  nlohmann::json doc = ExperimentConfig{}.to_json();
  apply_env_overrides(doc, {{"ADVCL__TRAINING__CONTRASTIVE__TAU", "0.2"},
                            {"ADVCL__SEED", "44"},
                            {"ADVCL__DATA__PRETRAIN_ON", "ood"},
                            {"OTHER", "x"}});
  const auto c = ExperimentConfig::from_json(doc);
  EXPECT_DOUBLE_EQ(c.training.contrastive.tau, 0.2);
  EXPECT_EQ(c.seed, 44u);
  EXPECT_EQ(c.data.pretrain_on, "ood");
}

TEST(Config, LoadFromFileWithOverride) {
  const auto dir = testing::scratch_dir("config");
  const auto path = (dir / "c.json").string();
  write_file(path, R"({"schema_version": 1, "seed": 5})");
  const auto c = load_experiment_config(path, {{"ADVCL__SEED", "6"}});
  EXPECT_EQ(c.seed, 6u);
  write_file(path, "{not json");
  EXPECT_THROW(load_experiment_config(path, {}), ConfigError);
}

}  // namespace
}  // namespace advcl
