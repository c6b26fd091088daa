// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gmc {

enum class ErrorKind {
  kConfig,
  kData,
  kProtocol,
  kDecode,
  kProvider,
  kDependency,
  kTraining,
  kInternal,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error(ErrorKind::kConfig, m) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& m) : Error(ErrorKind::kData, m) {}
};

// Wire or file format violated (wrong dimension, bad magic, short sequence).
class ProtocolError : public Error {
 public:
  explicit ProtocolError(const std::string& m) : Error(ErrorKind::kProtocol, m) {}
};

class DecodeError : public Error {
 public:
  explicit DecodeError(const std::string& m) : Error(ErrorKind::kDecode, m) {}
};

class DependencyError : public Error {
 public:
  explicit DependencyError(const std::string& m) : Error(ErrorKind::kDependency, m) {}
};

class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& m) : Error(ErrorKind::kTraining, m) {}
};

class InternalError : public Error {
 public:
  explicit InternalError(const std::string& m) : Error(ErrorKind::kInternal, m) {}
};

// Process exit codes used by the command line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitRuntime = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitDependency = 4,
};

int exit_code_for(ErrorKind kind);

using Rng = std::mt19937_64;

// Uniform in [0, 1) with 53 random bits. Independent of the standard
// library's distribution implementations.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double standard_normal(Rng& rng);

// Uniform integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

template <typename T>
void shuffle(std::vector<T>& values, Rng& rng) {
  for (std::size_t i = values.size(); i > 1; --i) {
    std::size_t j = uniform_index(rng, i);
    std::swap(values[i - 1], values[j]);
  }
}

using Digest = std::array<std::uint8_t, 32>;

Digest sha256(std::string_view data);
Digest sha256(std::span<const std::uint8_t> data);
std::string sha256_hex(std::string_view data);
std::string to_hex(std::span<const std::uint8_t> bytes);

// Seed derived from a string label and a base seed, so independent
// components draw from independent streams.
std::uint64_t derive_seed(std::uint64_t base, std::string_view label);

// Writes to a sibling temporary file, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

std::vector<std::string> split(std::string_view text, char sep);
std::string trim(std::string_view text);

}  // namespace gmc
