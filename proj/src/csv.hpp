// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "diffora/errors.hpp"

namespace diffora::csv {

struct Row {
    std::size_t line = 0;  // 1-based physical line number
    std::vector<std::string> cells;
};

/// Splits text into comma-separated rows. Blank lines and lines starting
/// with '#' are skipped but still counted for line numbers.
inline std::vector<Row> split(std::string_view text) {
    std::vector<Row> rows;
    std::size_t line = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view raw = text.substr(pos, end - pos);
        pos = end + 1;
        ++line;
        if (!raw.empty() && raw.back() == '\r') raw.remove_suffix(1);
        if (raw.empty() || raw.front() == '#') continue;
        Row row{line, {}};
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = raw.find(',', start);
            std::string_view cell = raw.substr(start, comma == std::string_view::npos ? raw.npos : comma - start);
            while (!cell.empty() && cell.front() == ' ') cell.remove_prefix(1);
            while (!cell.empty() && cell.back() == ' ') cell.remove_suffix(1);
            row.cells.emplace_back(cell);
            if (comma == std::string_view::npos) break;
            start = comma + 1;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline double parse_number(const std::string& cell, std::size_t line) {
    double v = 0.0;
    const char* first = cell.data();
    const char* last = cell.data() + cell.size();
    if (!cell.empty() && *first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (cell.empty() || ec != std::errc() || ptr != last) {
        throw ParseError("non-numeric cell '" + cell + "'", line);
    }
    if (!std::isfinite(v)) throw ParseError("non-finite cell '" + cell + "'", line);
    return v;
}

}  // namespace diffora::csv
