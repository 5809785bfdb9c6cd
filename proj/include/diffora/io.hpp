// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace diffora {

/// Writes the whole payload to a sibling temp file and renames it over
/// `path`, so readers see either the old file, nothing, or the new file.
void atomic_write(const std::filesystem::path& path, std::string_view payload);

std::string read_file(const std::filesystem::path& path);

/// Shortest-round-trip formatting with 17 significant digits.
std::string format_double(double v);

}  // namespace diffora
