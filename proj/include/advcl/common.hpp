#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace advcl {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
// Flat parameter and gradient storage. Vectorized Eigen kernels over a map
// pick their code path from the base address, so an aligned base keeps
// results independent of where the allocator happened to place the buffer.
using ParamVec = std::vector<double, Eigen::aligned_allocator<double>>;

// Error taxonomy shared by every module.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Bad or inconsistent configuration (unknown format, class-count mismatch,
// schema violation...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed input file. `line` is 1-based, 0 when not line-oriented.
class LoadError : public Error {
 public:
  LoadError(const std::string& path, std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

std::string to_lower(std::string_view s);
std::string hex64(std::uint64_t v);

// FNV-1a, used for cheap stable fingerprints (not for artifact integrity).
std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL);

// SHA-256 of a byte string / file, lowercase hex.
std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::string& path);

// Deterministic sub-seed derivation so independent consumers never share a stream.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);
std::uint64_t mix_seed(std::uint64_t seed, std::string_view salt);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view content);

}  // namespace advcl
