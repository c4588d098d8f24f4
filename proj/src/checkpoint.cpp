#include "advcl/checkpoint.hpp"

#include <bit>
#include <cstring>

namespace advcl {
namespace {

constexpr char kMagic[8] = {'A', 'D', 'V', 'C', 'L', 'C', 'K', 'P'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian hosts");

template <typename T>
void put_raw(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_raw(const std::string& in, std::size_t& pos, const std::string& origin) {
  if (pos + sizeof(T) > in.size()) throw LoadError(origin, 0, "truncated checkpoint");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return true;
  }
  return false;
}

const std::vector<double>& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw ConfigError("checkpoint has no tensor '" + name + "'");
}

void Checkpoint::put(const std::string& name, std::vector<double> data) {
  for (auto& [n, t] : tensors) {
    if (n == name) {
      t = std::move(data);
      return;
    }
  }
  tensors.emplace_back(name, std::move(data));
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header = {{"format", "advcl-checkpoint"},
                           {"version", kCheckpointVersion},
                           {"architecture", ckpt.architecture.to_json()},
                           {"subword_model_id", hex64(ckpt.architecture.subword_model_id)},
                           {"subwords", ckpt.subwords ? ckpt.subwords->to_json() : nlohmann::json(nullptr)},
                           {"meta", ckpt.meta}};
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, data] : ckpt.tensors) index.push_back({{"name", name}, {"size", data.size()}});
  header["tensors"] = index;
  const std::string h = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_raw(out, kCheckpointVersion);
  put_raw(out, static_cast<std::uint64_t>(h.size()));
  out += h;
  for (const auto& [name, data] : ckpt.tensors) {
    out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw LoadError(origin, 0, "not an advcl checkpoint");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = get_raw<std::uint32_t>(bytes, pos, origin);
  if (version != kCheckpointVersion) {
    throw LoadError(origin, 0, "unsupported checkpoint version " + std::to_string(version));
  }
  const auto hlen = get_raw<std::uint64_t>(bytes, pos, origin);
  if (pos + hlen > bytes.size()) throw LoadError(origin, 0, "truncated checkpoint header");
  const auto header = nlohmann::json::parse(bytes.substr(pos, hlen));
  pos += hlen;

  Checkpoint ckpt;
  ckpt.architecture = EncoderConfig::from_json(header.at("architecture"));
  if (!header.at("subwords").is_null()) {
    ckpt.subwords = std::make_shared<const SubwordModel>(SubwordModel::from_json(header.at("subwords")));
    if (ckpt.subwords->fingerprint() != ckpt.architecture.subword_model_id) {
      throw LoadError(origin, 0, "subword model does not match architecture id");
    }
  }
  ckpt.meta = header.value("meta", nlohmann::json::object());
  for (const auto& t : header.at("tensors")) {
    const auto n = t.at("size").get<std::size_t>();
    if (pos + n * sizeof(double) > bytes.size()) throw LoadError(origin, 0, "truncated tensor data");
    std::vector<double> data(n);
    std::memcpy(data.data(), bytes.data() + pos, n * sizeof(double));
    pos += n * sizeof(double);
    ckpt.tensors.emplace_back(t.at("name").get<std::string>(), std::move(data));
  }
  if (pos != bytes.size()) throw LoadError(origin, 0, "trailing bytes after tensors");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::string& path, const EncoderConfig* expected) {
  Checkpoint ckpt = decode_checkpoint(read_file(path), path);
  if (expected && !(ckpt.architecture == *expected)) {
    throw ConfigError(path + ": checkpoint architecture " + ckpt.architecture.to_json().dump() +
                      " does not match expected " + expected->to_json().dump());
  }
  return ckpt;
}

Checkpoint model_checkpoint(const EncoderBundle& bundle, std::shared_ptr<const SubwordModel> subwords,
                            nlohmann::json meta) {
  Checkpoint ckpt;
  ckpt.architecture = bundle.config();
  ckpt.subwords = std::move(subwords);
  ckpt.meta = std::move(meta);
  ckpt.put("model", std::vector<double>(bundle.params().begin(), bundle.params().end()));
  return ckpt;
}

EncoderBundle bundle_from(const Checkpoint& ckpt, const std::string& tensor_name) {
  return EncoderBundle(ckpt.architecture, ckpt.tensor(tensor_name));
}

}  // namespace advcl
