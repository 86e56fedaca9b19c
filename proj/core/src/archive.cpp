// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "archive.hpp"

#include <bit>
#include <cstdio>
#include <cstring>

#include "cmoe/error.hpp"
#include "cmoe/io.hpp"

namespace cmoe::archive {

namespace {

std::uint64_t fnv_bytes(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

void append_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xffU);
  out.append(buf, 8);
}

double read_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void throw_missing(const std::string& path) { throw LoadError(path + ": missing"); }

void throw_bad(const std::string& path, const std::string& why) { throw LoadError(path + ": " + why); }

std::size_t Writer::put(const std::string& name, const Tensor& t) { return put(name, t.shape(), t.data()); }

std::size_t Writer::put(const std::string& name, const Shape& shape, std::span<const double> values) {
  const std::size_t offset = blob_.size();
  for (double v : values) append_le(blob_, v);
  table_.push_back({{"name", name},
                    {"shape", shape},
                    {"offset", offset},
                    {"count", values.size()},
                    {"fnv", hex64(fnv_bytes(std::string_view(blob_).substr(offset)))}});
  return table_.size() - 1;
}

Reader::Reader(const json& table, std::string blob) : table_(table), blob_(std::move(blob)) {
  if (!table_.is_array()) throw_bad("manifest.tensors", "not an array");
  for (std::size_t i = 0; i < table_.size(); ++i) {
    const std::string path = "manifest.tensors[" + std::to_string(i) + "]";
    const json& e = table_[i];
    const auto offset = field<std::size_t>(e, "offset", path);
    const auto count = field<std::size_t>(e, "count", path);
    const auto shape = field<Shape>(e, "shape", path);
    field<std::string>(e, "name", path);
    if (shape_numel(shape) != count) throw_bad(path + ".shape", "does not match count");
    if (offset % 8 != 0 || offset > blob_.size() || count > (blob_.size() - offset) / 8) {
      throw_bad(path, "extends past the end of " + std::string(kBlobFile));
    }
    const std::string fnv = hex64(fnv_bytes(std::string_view(blob_).substr(offset, count * 8)));
    if (fnv != field<std::string>(e, "fnv", path)) throw_bad(path + ".fnv", "checksum mismatch");
  }
}

const json* Reader::find(const std::string& name) const {
  for (const json& e : table_) {
    if (e.at("name").get<std::string>() == name) return &e;
  }
  return nullptr;
}

bool Reader::has(const std::string& name) const { return find(name) != nullptr; }

std::vector<double> Reader::values(const std::string& name) const {
  const json* e = find(name);
  if (!e) throw_missing("tensor '" + name + "'");
  const auto offset = e->at("offset").get<std::size_t>();
  const auto count = e->at("count").get<std::size_t>();
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = read_le(blob_.data() + offset + 8 * i);
  return out;
}

Tensor Reader::get(const std::string& name, bool requires_grad) const {
  const json* e = find(name);
  if (!e) throw_missing("tensor '" + name + "'");
  Tensor t = Tensor::from(e->at("shape").get<Shape>(), values(name), requires_grad);
  t.set_name(name);
  return t;
}

Tensor Reader::get(const std::string& name, const Shape& expected, bool requires_grad) const {
  Tensor t = get(name, requires_grad);
  if (t.shape() != expected) {
    throw_bad("tensor '" + name + "'", "shape " + shape_str(t.shape()) + ", expected " + shape_str(expected));
  }
  return t;
}

void save(const std::filesystem::path& dir, json manifest, const Writer& writer, const std::string& kind) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
  manifest["format"] = {{"kind", kind}, {"version", kFormatVersion}};
  manifest["blob"] = {{"file", kBlobFile}, {"bytes", writer.blob().size()}, {"fnv", hex64(fnv_bytes(writer.blob()))}};
  manifest["tensors"] = writer.table();
  io::write_file_atomic(dir / kBlobFile, writer.blob());
  io::write_file_atomic(dir / kManifestFile, manifest.dump(1) + "\n");
}

Loaded load(const std::filesystem::path& dir, const std::string& kind) {
  const std::string text = io::read_file(dir / kManifestFile);
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::parse_error& e) {
    throw LoadError(std::string("manifest: ") + e.what());
  }
  const json format = field<json>(manifest, "format", "manifest");
  if (field<std::string>(format, "kind", "manifest.format") != kind) {
    throw_bad("manifest.format.kind", "expected '" + kind + "'");
  }
  const int version = field<int>(format, "version", "manifest.format");
  if (version != kFormatVersion) {
    throw_bad("manifest.format.version",
              "version " + std::to_string(version) + " unsupported (expected " + std::to_string(kFormatVersion) + ")");
  }
  const json blob_info = field<json>(manifest, "blob", "manifest");
  std::string blob = io::read_file(dir / field<std::string>(blob_info, "file", "manifest.blob"));
  const auto bytes = field<std::size_t>(blob_info, "bytes", "manifest.blob");
  if (blob.size() != bytes) {
    throw_bad("manifest.blob.bytes", std::string(kBlobFile) + " is corrupt: expected " + std::to_string(bytes) +
                                         " bytes, found " + std::to_string(blob.size()) +
                                         (blob.size() < bytes ? " (truncated)" : ""));
  }
  if (hex64(fnv_bytes(blob)) != field<std::string>(blob_info, "fnv", "manifest.blob")) {
    throw_bad("manifest.blob.fnv", std::string(kBlobFile) + " checksum mismatch");
  }
  Reader reader(field<json>(manifest, "tensors", "manifest"), std::move(blob));
  return {std::move(manifest), std::move(reader)};
}

}  // namespace cmoe::archive
