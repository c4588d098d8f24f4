#include "advcl/manifest.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <map>

#include "advcl/common.hpp"

#ifndef ADVCL_GIT_DESCRIBE
#define ADVCL_GIT_DESCRIBE "unknown"
#endif

namespace advcl {
namespace fs = std::filesystem;

namespace {

nlohmann::json refs_json(const std::vector<ArtifactRef>& refs) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : refs) a.push_back({{"path", r.path}, {"sha256", r.sha256}});
  return a;
}

std::vector<ArtifactRef> refs_from(const nlohmann::json& j) {
  std::vector<ArtifactRef> out;
  for (const auto& e : j) out.push_back({e.at("path").get<std::string>(), e.at("sha256").get<std::string>()});
  return out;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return fs::weakly_canonical(path.is_absolute() ? path : base / path);
}

}  // namespace

nlohmann::json RunManifest::to_json() const {
  return {{"format", "advcl-manifest"},
          {"version", 1},
          {"run_id", run_id},
          {"command", command},
          {"config", config},
          {"seed", seed},
          {"git_describe", git_describe},
          {"inputs", refs_json(inputs)},
          {"outputs", refs_json(outputs)},
          {"started_at", started_at},
          {"finished_at", finished_at},
          {"wall_seconds", wall_seconds},
          {"exit_status", exit_status}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "advcl-manifest" || j.value("version", 0) != 1) {
    throw ConfigError("not a version-1 run manifest");
  }
  RunManifest m;
  m.run_id = j.at("run_id").get<std::string>();
  m.command = j.at("command").get<std::string>();
  m.config = j.at("config");
  m.seed = j.at("seed").get<std::uint64_t>();
  m.git_describe = j.at("git_describe").get<std::string>();
  m.inputs = refs_from(j.at("inputs"));
  m.outputs = refs_from(j.at("outputs"));
  m.started_at = j.at("started_at").get<std::string>();
  m.finished_at = j.at("finished_at").get<std::string>();
  m.wall_seconds = j.at("wall_seconds").get<double>();
  m.exit_status = j.at("exit_status").get<int>();
  return m;
}

std::string build_git_describe() { return ADVCL_GIT_DESCRIBE; }

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string make_run_id(const std::string& command, const nlohmann::json& config, const std::string& started_at) {
  std::string stamp;
  for (char c : started_at) {
    if (std::isdigit(static_cast<unsigned char>(c))) stamp += c;
  }
  return command + "-" + sha256_hex(config.dump()).substr(0, 10) + "-" + stamp;
}

ArtifactRef hash_artifact(const std::string& path) { return {path, sha256_file(path)}; }

std::string write_manifest(const std::string& dir, const RunManifest& manifest) {
  RunManifest m = manifest;
  const fs::path base = fs::weakly_canonical(fs::path(dir));
  for (auto& o : m.outputs) {
    // Artifact paths are as hashed, i.e. relative to the working directory.
    const fs::path abs = fs::weakly_canonical(fs::absolute(o.path));
    const fs::path rel = abs.lexically_relative(base);
    if (!rel.empty() && *rel.begin() != "..") o.path = rel.string();
  }
  const std::string path = (base / kManifestName).string();
  write_file(path, m.to_json().dump(2) + "\n");
  return path;
}

std::vector<std::string> verify_manifest(const RunManifest& manifest, const std::string& manifest_dir) {
  std::vector<std::string> problems;
  const fs::path base(manifest_dir);
  auto check = [&](const ArtifactRef& r, const char* kind) {
    const fs::path p = resolve(base, r.path);
    if (!fs::exists(p)) {
      problems.push_back(std::string(kind) + " " + r.path + ": missing (expected sha256 " + r.sha256 + ")");
      return;
    }
    const std::string got = sha256_file(p.string());
    if (got != r.sha256) {
      problems.push_back(std::string(kind) + " " + r.path + ": sha256 " + got + " != recorded " + r.sha256);
    }
  };
  for (const auto& r : manifest.inputs) check(r, "input");
  for (const auto& r : manifest.outputs) check(r, "output");
  return problems;
}

RunManifest load_manifest(const std::string& path, bool verify) {
  const auto j = nlohmann::json::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) throw LoadError(path, 0, "manifest is not valid JSON");
  RunManifest m = RunManifest::from_json(j);
  if (verify) {
    const auto problems = verify_manifest(m, fs::path(path).parent_path().string());
    if (!problems.empty()) {
      std::string msg = "artifact hash check failed:";
      for (const auto& p : problems) msg += "\n  " + p;
      throw LoadError(path, 0, msg);
    }
  }
  return m;
}

void append_registry(const std::string& registry_path, const RunManifest& manifest, const std::string& manifest_path) {
  const fs::path reg(registry_path);
  if (reg.has_parent_path()) fs::create_directories(reg.parent_path());
  const int fd = ::open(registry_path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) throw Error("cannot open registry " + registry_path);
  if (::flock(fd, LOCK_EX) != 0) {
    ::close(fd);
    throw Error("cannot lock registry " + registry_path);
  }
  const std::string line = nlohmann::json{{"run_id", manifest.run_id},
                                          {"command", manifest.command},
                                          {"manifest", manifest_path},
                                          {"finished_at", manifest.finished_at},
                                          {"exit_status", manifest.exit_status}}
                               .dump() +
                           "\n";
  const ssize_t n = ::write(fd, line.data(), line.size());
  ::flock(fd, LOCK_UN);
  ::close(fd);
  if (n != static_cast<ssize_t>(line.size())) throw Error("short write to registry " + registry_path);
}

std::vector<std::string> find_orphans(const std::string& root) {
  std::map<std::string, int> owners;
  std::vector<std::string> files;
  if (!fs::exists(root)) return {};
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string name = e.path().filename().string();
    if (name == kManifestName) {
      const auto j = nlohmann::json::parse(read_file(e.path().string()), nullptr, false);
      if (j.is_discarded()) continue;
      const RunManifest m = RunManifest::from_json(j);
      for (const auto& o : m.outputs) owners[resolve(e.path().parent_path(), o.path).string()] += 1;
      continue;
    }
    if (name == kRegistryName || name == std::string(kRegistryName) + ".lock") continue;
    files.push_back(fs::weakly_canonical(e.path()).string());
  }
  std::vector<std::string> orphans;
  for (const auto& f : files) {
    auto it = owners.find(f);
    if (it == owners.end() || it->second != 1) orphans.push_back(f);
  }
  std::sort(orphans.begin(), orphans.end());
  return orphans;
}

}  // namespace advcl
