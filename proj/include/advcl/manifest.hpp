#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace advcl {

struct ArtifactRef {
  std::string path;  // outputs: relative to the manifest directory
  std::string sha256;
};

struct RunManifest {
  std::string run_id;
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::string git_describe;
  std::vector<ArtifactRef> inputs;
  std::vector<ArtifactRef> outputs;
  std::string started_at;
  std::string finished_at;
  double wall_seconds = 0.0;
  int exit_status = 0;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kRegistryName = "registry.jsonl";

// `git describe` of the source tree this binary was built from.
std::string build_git_describe();
std::string utc_timestamp();
// `command`, a short config hash and the start time.
std::string make_run_id(const std::string& command, const nlohmann::json& config, const std::string& started_at);

ArtifactRef hash_artifact(const std::string& path);

// Writes `<dir>/manifest.json`; output paths are stored relative to `dir`.
std::string write_manifest(const std::string& dir, const RunManifest& manifest);
// Throws LoadError listing every missing or mismatching artifact when `verify`.
RunManifest load_manifest(const std::string& path, bool verify = true);
// Problems found re-hashing the manifest's artifacts (empty when clean).
std::vector<std::string> verify_manifest(const RunManifest& manifest, const std::string& manifest_dir);

// Appends one line under an exclusive advisory lock.
void append_registry(const std::string& registry_path, const RunManifest& manifest, const std::string& manifest_path);

// Files under `root` that are not listed as an output of exactly one manifest
// (manifests, the registry and its lock file excepted).
std::vector<std::string> find_orphans(const std::string& root);

}  // namespace advcl
