#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "advcl/encoder.hpp"
#include "advcl/subword.hpp"

namespace advcl {

// Versioned binary container: magic, version, JSON header, then the named
// tensors as little-endian doubles in header order.
struct Checkpoint {
  EncoderConfig architecture;
  std::shared_ptr<const SubwordModel> subwords;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, std::vector<double>>> tensors;

  bool has(const std::string& name) const;
  const std::vector<double>& tensor(const std::string& name) const;
  void put(const std::string& name, std::vector<double> data);
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "<memory>");
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
// When `expected` is given, a differing architecture is a ConfigError.
Checkpoint load_checkpoint(const std::string& path, const EncoderConfig* expected = nullptr);

// Single-model checkpoint stored under tensor name "model".
Checkpoint model_checkpoint(const EncoderBundle& bundle, std::shared_ptr<const SubwordModel> subwords,
                            nlohmann::json meta = nlohmann::json::object());
EncoderBundle bundle_from(const Checkpoint& ckpt, const std::string& tensor_name = "model");

}  // namespace advcl
