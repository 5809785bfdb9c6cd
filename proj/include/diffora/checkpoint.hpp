// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "diffora/adapters.hpp"
#include "diffora/dam.hpp"
#include "diffora/models.hpp"

namespace diffora {

// Binary layout, all integers little-endian:
//   "DFRA" u16 version
//   repeated: u8 section id, u64 payload length, payload
// Matrices are stored as u64 rows, u64 cols, then rows*cols IEEE doubles.

inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class Section : std::uint8_t { config = 1, dam = 2, adapters = 3 };

/// Layer index used for shared-bank entries.
inline constexpr std::uint32_t kBankLayer = 0xFFFFFFFFu;

struct AdapterRecord {
    std::uint32_t layer = 0;
    Family family = Family::Q;
    LowRankAdapter adapter;
};

struct Checkpoint {
    std::string config_text;
    DamState dam;
    std::vector<AdapterRecord> adapters;
    /// (layer, family) of modules wired to their family's bank entry.
    std::vector<std::pair<std::uint32_t, Family>> shared_slots;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Collects every own adapter, bank entry and shared slot of a network.
Checkpoint snapshot(const std::string& config_text, const DamState& dam, const ModularNet& net);

/// Re-wires adapters on a base network (whose slots are replaced).
void restore_adapters(const Checkpoint& ckpt, ModularNet& net);

}  // namespace diffora
