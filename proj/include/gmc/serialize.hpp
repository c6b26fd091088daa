// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

// Versioned binary checkpoint container:
//   "GMCB" | u32 format | str kind | u32 version | str meta-json |
//   u32 count | { str name | u64 rows | u64 cols | f64[rows*cols] }*
// Strings are u64 length + bytes. All integers little-endian.

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gmc/autodiff.hpp"

namespace gmc::io {

struct Blob {
  std::string kind;
  std::uint32_t version = 1;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, ad::Matrix>> tensors;

  const ad::Matrix& tensor(const std::string& name) const;
};

void write_blob(const std::filesystem::path& path, const Blob& blob);
// Throws ProtocolError on bad magic, a different kind, or truncation.
Blob read_blob(const std::filesystem::path& path, const std::string& expected_kind);

void write_matrix(const std::filesystem::path& path, const ad::Matrix& m);
ad::Matrix read_matrix(const std::filesystem::path& path);

// SHA-256 over the raw bytes of the given matrices, in order.
std::string checksum(const std::vector<const ad::Matrix*>& tensors);

}  // namespace gmc::io
