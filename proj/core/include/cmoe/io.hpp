// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace cmoe::io {

/// Writes through a sibling temp file and renames over `path`, so readers
/// see either the old file or the complete new one. Throws cmoe::Error.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

/// Whole-file read; throws LoadError naming the path.
std::string read_file(const std::filesystem::path& path);

}  // namespace cmoe::io
