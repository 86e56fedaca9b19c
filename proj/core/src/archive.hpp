// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Private to the library: tensor archives as a JSON table plus one blob.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmoe/tensor.hpp"

namespace cmoe::archive {

using nlohmann::json;

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kBlobFile = "params.bin";

/// Appends tensors to a little-endian float64 blob and records a table entry
/// {name, shape, offset, count, fnv} for each.
class Writer {
 public:
  /// Returns the table index of the stored tensor.
  std::size_t put(const std::string& name, const Tensor& t);
  std::size_t put(const std::string& name, const Shape& shape, std::span<const double> values);

  const json& table() const { return table_; }
  const std::string& blob() const { return blob_; }

 private:
  json table_ = json::array();
  std::string blob_;
};

/// Reads tensors back by name. Every accessor validates against the blob and
/// throws LoadError with a field path.
class Reader {
 public:
  Reader(const json& table, std::string blob);

  bool has(const std::string& name) const;
  Tensor get(const std::string& name, const Shape& expected, bool requires_grad) const;
  Tensor get(const std::string& name, bool requires_grad) const;
  std::vector<double> values(const std::string& name) const;

 private:
  const json* find(const std::string& name) const;
  json table_;
  std::string blob_;
};

/// Writes manifest.json and params.bin under `dir`. `manifest` gets the
/// format header, blob checksum and tensor table merged in.
void save(const std::filesystem::path& dir, json manifest, const Writer& writer, const std::string& kind);

struct Loaded {
  json manifest;
  Reader reader;
};

/// Parses and validates both files before returning anything.
Loaded load(const std::filesystem::path& dir, const std::string& kind);

[[noreturn]] void throw_missing(const std::string& path);
[[noreturn]] void throw_bad(const std::string& path, const std::string& why);

/// Field accessor that raises LoadError("<path>: ...") on absence or type mismatch.
template <typename T>
T field(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) throw_missing(path + "." + key);
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw_bad(path + "." + key, e.what());
  }
}

std::string hex64(std::uint64_t v);

}  // namespace cmoe::archive
