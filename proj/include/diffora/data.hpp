// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "diffora/models.hpp"
#include "diffora/numerics.hpp"

namespace diffora {

struct Descriptor {
    std::string generator;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> params;

    /// "generator=<g> seed=<s> k1=v1 ..." with keys in sorted order.
    std::string to_string() const;
};

/// Samples are the columns of x (d x n); labels are the rows of y (n x 1).
struct Dataset {
    Matrix x;
    Matrix y;
    Descriptor descriptor;

    std::size_t size() const { return x.cols(); }
    std::size_t dim() const { return x.rows(); }
};

/// Restricts a dataset to the given sample indices, in order.
Dataset select_samples(const Dataset& data, const std::vector<std::size_t>& indices);

/// Unit-norm Gaussian columns, pairwise |cos| < 1 - 1e-6, labels uniform in
/// [-c_label, c_label].
Dataset gen_sphere(std::size_t n, std::size_t d, double c_label, const SeededRng& rng);

/// Checks the theory-side invariants of a dataset: unit columns,
/// pairwise non-parallel, bounded labels.
void validate_sphere(const Dataset& data, double c_label);

/// How each planted teacher update is sized. `weight`: ‖ΔW‖_F equals
/// teacher_scale·‖W‖_F. `output`: the update alone moves the network output
/// by teacher_scale times the base output RMS, so every planted module is
/// equally visible in the labels whatever its family.
enum class TeacherCalibration { weight, output };

struct PlantedOptions {
    ModularShape shape;
    Matrix planted;  // L x 6 indicator of modules carrying a teacher adapter
    double noise = 0.0;
    std::size_t n = 128;
    std::size_t teacher_rank = 2;
    double teacher_scale = 1.0;
    TeacherCalibration calibration = TeacherCalibration::weight;
    double base_scale = 1.0;
    std::size_t base_rank = 0;  // 0 keeps base weights full rank
};

struct PlantedTask {
    Dataset data;
    ModularNet base;     // frozen pretrained network, no adapters
    ModularNet teacher;  // base plus adapters on the planted modules
    Matrix planted;
};

PlantedTask gen_planted(const PlantedOptions& opts, const SeededRng& rng);

/// Random L x 6 indicator with exactly k_star ones per row.
Matrix random_planted_set(std::size_t layers, std::size_t k_star, const SeededRng& rng);

/// Reads a rectangular numeric CSV with a header row. The label column
/// becomes y; all other columns become features. Lines starting with '#'
/// are comments.
Dataset ingest_csv(const std::filesystem::path& path, const std::string& label_column, bool unit_normalize = false);

/// Writes "# <descriptor>", a header f1..fd,y, then one row per sample with
/// 17 significant digits.
void export_csv(const std::filesystem::path& path, const Dataset& data);

struct SplitPlan {
    double fraction = 0.5;
    double subsample = 1.0;
    std::vector<std::size_t> train;
    std::vector<std::size_t> valid;
    std::uint64_t seed = 0;
};

/// Seeded shuffle, keep the first ⌊subsample·n⌋ indices, then split them at
/// ⌊fraction·count⌋ into train (prefix) and valid (suffix).
SplitPlan make_split(std::size_t n, double fraction, const SeededRng& rng, double subsample = 1.0);

}  // namespace diffora
