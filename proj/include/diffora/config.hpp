// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "diffora/models.hpp"
#include "diffora/numerics.hpp"

namespace diffora {

struct DataConfig {
    std::string generator = "planted";  // planted | sphere
    ModularShape shape{4, 8, 8, 4, 4};
    std::size_t n = 320;
    double noise = 0.01;
    std::size_t k_star = 3;
    /// Explicit L x 6 planted indicator; drawn from k_star when empty.
    Matrix planted;
    std::size_t teacher_rank = 2;
    double teacher_scale = 1.0;
    std::string teacher_calibration = "weight";  // weight | output
    double base_scale = 0.5;
    std::size_t base_rank = 4;
    double split_fraction = 0.5;
    double subsample = 1.0;
};

struct TheoryConfig {
    std::size_t n = 10;
    std::size_t d = 8;
    std::size_t m = 4096;
    std::size_t samples = 100000;
    double w0_scale = 1.0;
    double c_label = 1.0;
    std::string gamma = "modules";  // modules | ones
    std::size_t groups = 8;
    std::size_t active = 4;
    std::size_t steps = 2000;
    double eta_factor = 0.1;
    double kappa = 0.1;
    double c_const = 1.0;
    std::size_t workers = 1;
};

struct RunConfig {
    std::uint64_t seed = 1;
    std::string architecture = "modular";  // modular | theory
    double eta = 0.05;
    /// Learning rate of the DAM logits; negative means "same as eta".
    double eta_dam = -1.0;
    /// Learning rate of Stage 2; negative means "same as eta".
    double eta_finetune = -1.0;
    std::size_t v_outer = 5;
    std::size_t t_inner = 10;
    std::size_t t_finetune = 100;
    double rho = 0.5;
    std::size_t r_l = 2;
    std::size_t r_s = 1;
    double alpha = 16.0;
    double dropout_p = 0.0;
    bool sharing = true;
    bool sharing_auto = false;
    bool warm_start = false;
    double momentum = 0.0;
    DataConfig data;
    TheoryConfig theory;

    double stage2_eta() const { return eta_finetune < 0.0 ? eta : eta_finetune; }
    std::size_t total_steps() const { return v_outer * (1 + t_inner) + t_finetune; }
};

/// Parses the JSON config text. Unknown keys are rejected.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Checks every cross-field invariant; throws a configuration error.
void validate_config(const RunConfig& cfg);

/// Sorted-key JSON rendering; parse_config(canonical_text(c)) == c.
std::string canonical_text(const RunConfig& cfg);

/// Replaces the seed with $DIFFORA_SEED when that variable is set.
void apply_env_overrides(RunConfig& cfg);

}  // namespace diffora
