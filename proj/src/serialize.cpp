// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmc/serialize.hpp"

#include <cstring>

#include "gmc/common.hpp"

namespace gmc::io {

namespace {

constexpr char kMagic[4] = {'G', 'M', 'C', 'B'};
constexpr std::uint32_t kFormat = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_str(std::string& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out += s;
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_str() {
    auto n = get<std::uint64_t>();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void get_doubles(double* dst, std::size_t n) {
    need(n * sizeof(double));
    std::memcpy(dst, data_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw ProtocolError("checkpoint truncated");
  }
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace

const ad::Matrix& Blob::tensor(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return m;
  }
  throw ProtocolError("checkpoint has no tensor '" + name + "'");
}

void write_blob(const std::filesystem::path& path, const Blob& blob) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kFormat);
  put_str(out, blob.kind);
  put<std::uint32_t>(out, blob.version);
  put_str(out, blob.meta.dump());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(blob.tensors.size()));
  for (const auto& [name, m] : blob.tensors) {
    put_str(out, name);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  write_file_atomic(path, out);
}

Blob read_blob(const std::filesystem::path& path, const std::string& expected_kind) {
  Reader r(read_file(path));
  char magic[4];
  for (char& c : magic) c = r.get<char>();
  if (std::memcmp(magic, kMagic, 4) != 0) throw ProtocolError(path.string() + " is not a checkpoint");
  if (r.get<std::uint32_t>() != kFormat) throw ProtocolError(path.string() + ": unsupported format");
  Blob blob;
  blob.kind = r.get_str();
  if (!expected_kind.empty() && blob.kind != expected_kind) {
    throw ProtocolError(path.string() + " holds '" + blob.kind + "', expected '" + expected_kind + "'");
  }
  blob.version = r.get<std::uint32_t>();
  blob.meta = nlohmann::json::parse(r.get_str());
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_str();
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    ad::Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    r.get_doubles(m.data(), rows * cols);
    blob.tensors.emplace_back(std::move(name), std::move(m));
  }
  return blob;
}

void write_matrix(const std::filesystem::path& path, const ad::Matrix& m) {
  Blob b;
  b.kind = "matrix";
  b.tensors.emplace_back("data", m);
  write_blob(path, b);
}

ad::Matrix read_matrix(const std::filesystem::path& path) {
  return read_blob(path, "matrix").tensor("data");
}

std::string checksum(const std::vector<const ad::Matrix*>& tensors) {
  std::string buf;
  for (const ad::Matrix* m : tensors) {
    buf.append(reinterpret_cast<const char*>(m->data()), static_cast<std::size_t>(m->size()) * sizeof(double));
  }
  return sha256_hex(buf);
}

}  // namespace gmc::io
