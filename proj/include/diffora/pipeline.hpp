// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "diffora/checkpoint.hpp"
#include "diffora/config.hpp"
#include "diffora/dam.hpp"
#include "diffora/data.hpp"
#include "diffora/models.hpp"
#include "diffora/theory.hpp"

namespace diffora {

// Derived stream keys under SeededRng(cfg.seed, 0).
namespace streams {
inline constexpr std::uint64_t data = 1;
inline constexpr std::uint64_t planted = 2;
inline constexpr std::uint64_t split = 3;
inline constexpr std::uint64_t stage1_adapters = 4;
inline constexpr std::uint64_t stage2_adapters = 5;
inline constexpr std::uint64_t stage1_dropout = 6;
inline constexpr std::uint64_t stage2_dropout = 7;
inline constexpr std::uint64_t random_selection = 8;
inline constexpr std::uint64_t theory = 9;
}  // namespace streams

struct PreparedData {
    PlantedTask task;
    SplitPlan split;
    Dataset train;
    Dataset valid;
};

/// Builds the planted task described by cfg.data and splits it.
PreparedData prepare_data(const RunConfig& cfg);

struct Stage1Result {
    DamState dam;
    ModularNet net;  // warm adapters after relaxation
    std::vector<StepLoss> losses;
    double seconds = 0.0;
};

/// V outer iterations, each one logits update followed by T_inner adapter
/// updates. Every adapter starts at rank r_l on every module.
Stage1Result run_stage1(const RunConfig& cfg, const PreparedData& data);

struct Stage2Result {
    DamState dam;  // with gamma_bin
    ModularNet net;
    std::vector<StepLoss> losses;
    double base_valid_loss = 0.0;
    bool sharing = false;
    double seconds = 0.0;
};

/// Discretizes, wires adapters by attach_sharing and runs T_finetune
/// descent steps on the training split. `warm` supplies Stage 1 adapters
/// when cfg.warm_start is set.
Stage2Result run_stage2(const RunConfig& cfg, const DamState& dam, const PreparedData& data,
                        const ModularNet* warm = nullptr);

/// Stage 2 with an externally chosen selection (L x 6, 0/1).
Stage2Result finetune_selection(const RunConfig& cfg, const Matrix& gamma_bin, const PreparedData& data, bool sharing,
                                const ModularNet* warm = nullptr);

/// k·L·(own adapter params at r_l) summed per selected module, plus one
/// bank entry at r_s for each family with an unselected module.
std::size_t expected_parameter_count(const ModularShape& shape, const Matrix& gamma_bin, std::size_t r_l,
                                     std::size_t r_s, bool sharing);

/// Fraction of planted modules that are selected.
double planted_recovery(const Matrix& gamma_bin, const Matrix& planted);

struct RunReport {
    std::string config_text;
    std::vector<StepLoss> stage1;
    std::vector<StepLoss> stage2;
    Matrix gamma_bar;
    Matrix gamma_bin;
    Matrix planted;
    std::vector<double> row_entropy;
    double stage1_seconds = 0.0;
    double stage2_seconds = 0.0;
    double base_valid_loss = 0.0;
    double final_train_loss = 0.0;
    double final_valid_loss = 0.0;
    std::size_t trainable_parameters = 0;
    std::size_t expected_parameters = 0;
    double planted_recovery = 0.0;
    bool sharing = false;
};

struct RunArtifacts {
    PreparedData data;
    Stage1Result stage1;
    Stage2Result stage2;
    RunReport report;
};

RunArtifacts run_all(const RunConfig& cfg);

/// Nested key/value report (JSON). Wall-clock times are left out so the
/// file is reproducible byte for byte.
std::string report_text(const RunReport& report);

/// "step,train_loss,valid_loss" with one row per update of both stages.
std::string loss_csv(const RunReport& report);

/// Writes checkpoint.dfra, report.json, losses.csv, gamma_bar.csv and
/// gamma_bin.csv into `dir`.
void write_run_outputs(const std::filesystem::path& dir, const RunArtifacts& run);

// ---------------------------------------------------------------------------
// Strategy comparison

struct StrategyRow {
    std::string strategy;
    double rho = 0.0;
    std::size_t k = 0;
    std::vector<double> final_losses;  // one per seed
    double mean_loss = 0.0;
    double sd_loss = 0.0;
    double recovery = 0.0;
    std::size_t parameters = 0;
};

/// Runs each strategy (diffora | random | all | none) on seeds cfg.seed,
/// cfg.seed + 1, ... Throws a configuration error if diffora and random
/// select adapters with different parameter counts on any seed; the shared
/// bank is excluded since its size depends on which families stay unselected.
std::vector<StrategyRow> run_compare(const RunConfig& cfg, const std::vector<std::string>& strategies,
                                     std::size_t seeds);

std::string compare_table(const std::vector<StrategyRow>& rows);

// ---------------------------------------------------------------------------
// Theory verification

struct TheoryCheck {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct TheoryRun {
    double eta = 0.0;
    std::vector<double> residuals;
    double slope = 0.0;
    double decay_orders = 0.0;
};

struct TheoryReport {
    EigenComparison eigen;
    GramEstimate gated;
    GramEstimate ungated;
    TheoryRun gated_run;    // increment w trained under the gates
    TheoryRun ungated_run;  // increment w trained with all gates one
    TheoryRun gated_kernel_run;    // effective weights trained from w0 + gamma∘w
    TheoryRun ungated_kernel_run;  // effective weights trained from w0 + w
    std::size_t dominance_step = 0;
    GeneralizationTerm generalization;
    double theorem_eta = 0.0;
    std::vector<TheoryCheck> checks;

    bool all_passed() const;
};

TheoryReport verify_theory(const TheoryConfig& cfg, std::uint64_t seed);

std::string theory_report_text(const TheoryReport& report);

}  // namespace diffora
