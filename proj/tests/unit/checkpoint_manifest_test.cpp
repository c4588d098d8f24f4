#include <gtest/gtest.h>

#include <filesystem>

#include "advcl/checkpoint.hpp"
#include "advcl/manifest.hpp"
#include "test_util.hpp"

namespace advcl {
namespace {

namespace fs = std::filesystem;
using testing::make_world;
using testing::scratch_dir;
using testing::tiny_config;

TEST(Checkpoint, RoundTripPreservesParametersAndTokenizer) {
  auto w = make_world();
  const EncoderBundle model(tiny_config(*w.subwords), 8);
  const auto dir = scratch_dir("ckpt");
  const auto path = (dir / "m.ckpt").string();
  save_checkpoint(path, model_checkpoint(model, w.subwords, {{"note", "x"}}));
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(parameter_checksum(bundle_from(back)), parameter_checksum(model));
  EXPECT_EQ(back.subwords->fingerprint(), w.subwords->fingerprint());
  EXPECT_EQ(back.meta.at("note"), "x");
}

TEST(Checkpoint, ArchitectureMismatchIsAnError) {
  auto w = make_world();
  const EncoderBundle model(tiny_config(*w.subwords), 8);
  const auto path = (scratch_dir("ckpt2") / "m.ckpt").string();
  save_checkpoint(path, model_checkpoint(model, w.subwords));
  EncoderConfig other = tiny_config(*w.subwords);
  other.hidden = 32;
  EXPECT_THROW(load_checkpoint(path, &other), ConfigError);
}

TEST(Checkpoint, CorruptBytesAreRejected) {
  auto w = make_world();
  const EncoderBundle model(tiny_config(*w.subwords), 8);
  std::string bytes = encode_checkpoint(model_checkpoint(model, w.subwords));
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 9)), LoadError);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), LoadError);
}

RunManifest sample_manifest(const fs::path& dir) {
  write_file((dir / "a.txt").string(), "alpha");
  write_file((dir / "b.txt").string(), "beta");
  RunManifest m;
  m.command = "eval";
  m.config = {{"seed", 1}};
  m.started_at = utc_timestamp();
  m.run_id = make_run_id(m.command, m.config, m.started_at);
  m.outputs = {hash_artifact((dir / "a.txt").string()), hash_artifact((dir / "b.txt").string())};
  return m;
}

TEST(Manifest, HashesMatchIndependentSha256) {
  const auto dir = scratch_dir("manifest");
  write_file((dir / "abc.txt").string(), "abc");
  EXPECT_EQ(hash_artifact((dir / "abc.txt").string()).sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Manifest, RoundTripAndVerification) {
  const auto dir = scratch_dir("manifest2");
  const auto path = write_manifest(dir.string(), sample_manifest(dir));
  const RunManifest back = load_manifest(path, true);
  ASSERT_EQ(back.outputs.size(), 2u);
  EXPECT_EQ(back.outputs[0].path, "a.txt");
  EXPECT_TRUE(verify_manifest(back, dir.string()).empty());

  write_file((dir / "b.txt").string(), "tampered");
  EXPECT_EQ(verify_manifest(back, dir.string()).size(), 1u);
  EXPECT_THROW(load_manifest(path, true), LoadError);
  EXPECT_NO_THROW(load_manifest(path, false));
}

TEST(Manifest, WorkingDirectoryRelativeOutputsVerify) {
  const auto root = scratch_dir("relative");
  fs::create_directories(root / "run");
  const fs::path old = fs::current_path();
  fs::current_path(root);
  write_file("run/a.txt", "alpha");
  RunManifest m = sample_manifest(root / "run");
  m.outputs = {hash_artifact("run/a.txt")};
  const auto path = write_manifest("run", m);
  const auto back = load_manifest(path, false);
  fs::current_path(old);
  ASSERT_EQ(back.outputs.size(), 1u);
  EXPECT_EQ(back.outputs[0].path, "a.txt");
  EXPECT_NO_THROW(load_manifest(path, true));
}

TEST(Manifest, OrphansAreFilesWithoutExactlyOneOwner) {
  const auto root = scratch_dir("orphans");
  const auto run = root / "run1";
  fs::create_directories(run);
  const auto path = write_manifest(run.string(), sample_manifest(run));
  append_registry((root / kRegistryName).string(), load_manifest(path), path);
  EXPECT_TRUE(find_orphans(root.string()).empty());
  write_file((run / "stray.bin").string(), "?");
  const auto orphans = find_orphans(root.string());
  ASSERT_EQ(orphans.size(), 1u);
  EXPECT_NE(orphans[0].find("stray.bin"), std::string::npos);
}

TEST(Manifest, RegistryAppendsOneLinePerRun) {
  const auto root = scratch_dir("registry");
  const auto path = write_manifest(root.string(), sample_manifest(root));
  const auto reg = (root / kRegistryName).string();
  append_registry(reg, load_manifest(path), path);
  append_registry(reg, load_manifest(path), path);
  const std::string text = read_file(reg);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
}

}  // namespace
}  // namespace advcl
