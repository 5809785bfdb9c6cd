// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "diffora/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "csv.hpp"
#include "diffora/errors.hpp"
#include "diffora/io.hpp"

namespace diffora {

namespace {
constexpr double kParallelTol = 1e-6;
}

std::string Descriptor::to_string() const {
    std::string s = "generator=" + generator + " seed=" + std::to_string(seed);
    for (const auto& [k, v] : params) s += " " + k + "=" + v;
    return s;
}

Dataset select_samples(const Dataset& data, const std::vector<std::size_t>& indices) {
    Dataset out;
    out.descriptor = data.descriptor;
    out.x = Matrix(data.dim(), indices.size());
    out.y = Matrix(indices.size(), data.y.cols());
    for (std::size_t j = 0; j < indices.size(); ++j) {
        const std::size_t i = indices[j];
        if (i >= data.size()) throw Error(ErrorKind::data, "sample index out of range");
        for (std::size_t r = 0; r < data.dim(); ++r) out.x(r, j) = data.x(r, i);
        for (std::size_t c = 0; c < data.y.cols(); ++c) out.y(j, c) = data.y(i, c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Unit-sphere data

namespace {

double column_cosine(const Matrix& x, std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) s += x(r, a) * x(r, b);
    return s;
}

void normalize_column(Matrix& x, std::size_t c) {
    double s = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) s += x(r, c) * x(r, c);
    const double inv = 1.0 / std::sqrt(s);
    for (std::size_t r = 0; r < x.rows(); ++r) x(r, c) *= inv;
}

}  // namespace

Dataset gen_sphere(std::size_t n, std::size_t d, double c_label, const SeededRng& rng) {
    if (n < 1 || d < 2) throw Error(ErrorKind::configuration, "gen_sphere needs n >= 1 and d >= 2");
    if (!(c_label > 0.0)) throw Error(ErrorKind::configuration, "label bound must be positive");
    SeededRng xs = rng.derive(1);
    SeededRng ys = rng.derive(2);
    Matrix x(d, n);
    std::size_t attempts = 0;
    const std::size_t max_attempts = 100 * n;
    for (std::size_t c = 0; c < n;) {
        for (std::size_t r = 0; r < d; ++r) x(r, c) = xs.normal();
        normalize_column(x, c);
        bool parallel = false;
        for (std::size_t p = 0; p < c && !parallel; ++p) parallel = std::abs(column_cosine(x, p, c)) >= 1.0 - kParallelTol;
        if (!parallel) {
            ++c;
            continue;
        }
        if (++attempts > max_attempts) {
            throw Error(ErrorKind::feasibility, "could not draw " + std::to_string(n) + " non-parallel points in d=" +
                                                    std::to_string(d));
        }
    }
    Dataset data;
    data.x = std::move(x);
    data.y = Matrix(n, 1);
    for (double& v : data.y.data()) v = c_label * (2.0 * ys.uniform() - 1.0);
    data.descriptor = {"sphere", rng.seed(), {{"c_label", format_double(c_label)}, {"d", std::to_string(d)},
                                              {"n", std::to_string(n)}, {"stream", std::to_string(rng.stream_id())}}};
    validate_sphere(data, c_label);
    return data;
}

void validate_sphere(const Dataset& data, double c_label) {
    require_unit_columns(data.x, 1e-10);
    for (std::size_t a = 0; a < data.size(); ++a)
        for (std::size_t b = a + 1; b < data.size(); ++b)
            if (std::abs(column_cosine(data.x, a, b)) >= 1.0 - kParallelTol) {
                throw Error(ErrorKind::data, "samples " + std::to_string(a) + " and " + std::to_string(b) +
                                                 " are parallel");
            }
    for (double v : data.y.data())
        if (std::abs(v) > c_label) throw Error(ErrorKind::data, "label exceeds bound");
}

// ---------------------------------------------------------------------------
// Planted-module task

Matrix random_planted_set(std::size_t layers, std::size_t k_star, const SeededRng& rng) {
    if (k_star < 1 || k_star > kFamilyCount) throw Error(ErrorKind::configuration, "k* must lie in [1, 6]");
    Matrix planted(layers, kFamilyCount);
    for (std::size_t l = 0; l < layers; ++l) {
        SeededRng stream = rng.derive(l);
        std::array<std::size_t, kFamilyCount> order{};
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = kFamilyCount - 1; i > 0; --i) std::swap(order[i], order[stream.below(i + 1)]);
        for (std::size_t i = 0; i < k_star; ++i) planted(l, order[i]) = 1.0;
    }
    return planted;
}

PlantedTask gen_planted(const PlantedOptions& opts, const SeededRng& rng) {
    const ModularShape& shape = opts.shape;
    if (opts.planted.rows() != shape.layers || opts.planted.cols() != kFamilyCount) {
        throw Error(ErrorKind::configuration, "planted set must be L x 6");
    }
    std::size_t per_layer = 0;
    for (std::size_t l = 0; l < shape.layers; ++l) {
        std::size_t count = 0;
        for (std::size_t j = 0; j < kFamilyCount; ++j) {
            const double v = opts.planted(l, j);
            if (v != 0.0 && v != 1.0) throw Error(ErrorKind::configuration, "planted set must be 0/1");
            count += v == 1.0;
        }
        if (l == 0) per_layer = count;
        if (count != per_layer) throw Error(ErrorKind::configuration, "planted set must have k* modules per layer");
    }
    if (per_layer == 0) throw Error(ErrorKind::configuration, "planted set is empty");
    if (opts.n < 1) throw Error(ErrorKind::configuration, "planted task needs n >= 1");

    PlantedTask task;
    task.planted = opts.planted;
    task.base = make_base_modular(shape, rng.derive(1), opts.base_scale, opts.base_rank);
    task.teacher = task.base;

    SeededRng x_stream = rng.derive(2);
    SeededRng noise_stream = rng.derive(4);
    Dataset& data = task.data;
    data.x = gaussian_matrix(shape.input_size(), opts.n, x_stream);

    const Matrix gates = unit_gates(shape.layers);
    const std::size_t probe_n = std::min<std::size_t>(opts.n, 64);
    Matrix probe(shape.input_size(), probe_n);
    for (std::size_t r = 0; r < probe.rows(); ++r)
        for (std::size_t c = 0; c < probe_n; ++c) probe(r, c) = data.x(r, c);
    const Matrix base_out = modular_predict(task.base, gates, probe);
    const double output_target = opts.teacher_scale * std::sqrt(base_out.frobenius() * base_out.frobenius() /
                                                                static_cast<double>(base_out.size()));
    auto output_effect = [&](std::size_t l, Family f, const LowRankAdapter& ad) {
        ModularNet single = task.base;
        single.set_own(l, f, ad);
        const Matrix diff = modular_predict(single, gates, probe) - base_out;
        return diff.frobenius() / std::sqrt(static_cast<double>(diff.size()));
    };

    const SeededRng adapter_root = rng.derive(3);
    for (std::size_t l = 0; l < shape.layers; ++l) {
        for (Family f : kFamilies) {
            if (opts.planted(l, index_of(f)) != 1.0) continue;
            const auto [d, k] = shape.weight_shape(f);
            SeededRng stream = adapter_root.derive(l * kFamilyCount + index_of(f));
            const std::size_t r = std::min({opts.teacher_rank, d, k});
            LowRankAdapter ad = init_adapter(d, k, r, static_cast<double>(r), stream);
            ad.b = gaussian_matrix(d, r, stream);
            const double weight_norm = task.base.module(l, f).weight.frobenius();
            ad.b *= (opts.calibration == TeacherCalibration::weight ? opts.teacher_scale : 1.0) * weight_norm /
                    delta(ad).frobenius();
            if (opts.calibration == TeacherCalibration::output) {
                // The output response is nonlinear in the update size; ratio
                // corrections converge unless the module saturates.
                bool reached = false;
                for (int it = 0; it < 30 && !reached; ++it) {
                    const double effect = output_effect(l, f, ad);
                    if (!(effect > 0.0) || !std::isfinite(effect)) {
                        throw Error(ErrorKind::feasibility, "planted module " + std::to_string(l) + "/" +
                                                                std::string(family_name(f)) +
                                                                " has no effect on the output");
                    }
                    reached = std::abs(effect / output_target - 1.0) < 1e-3;
                    if (!reached) ad.b *= output_target / effect;
                }
                if (!reached) {
                    throw Error(ErrorKind::feasibility,
                                "planted module " + std::to_string(l) + "/" + std::string(family_name(f)) +
                                    " cannot move the output by teacher_scale=" + format_double(opts.teacher_scale) +
                                    " of its RMS; lower teacher_scale or use weight calibration");
                }
            }
            task.teacher.set_own(l, f, std::move(ad));
        }
    }

    data.y = modular_predict(task.teacher, gates, data.x);
    if (opts.noise > 0.0) {
        for (double& v : data.y.data()) v += opts.noise * noise_stream.normal();
    }
    data.descriptor = {"planted",
                       rng.seed(),
                       {{"layers", std::to_string(shape.layers)},
                        {"model_dim", std::to_string(shape.model_dim)},
                        {"ffn_dim", std::to_string(shape.ffn_dim)},
                        {"seq_len", std::to_string(shape.seq_len)},
                        {"k_star", std::to_string(per_layer)},
                        {"n", std::to_string(opts.n)},
                        {"noise", format_double(opts.noise)},
                        {"teacher_rank", std::to_string(opts.teacher_rank)},
                        {"teacher_scale", format_double(opts.teacher_scale)},
                        {"calibration", opts.calibration == TeacherCalibration::output ? "output" : "weight"}}};
    return task;
}

// ---------------------------------------------------------------------------
// CSV

Dataset ingest_csv(const std::filesystem::path& path, const std::string& label_column, bool unit_normalize) {
    const auto rows = csv::split(read_file(path));
    if (rows.empty()) throw ParseError("missing header row", 1);
    const auto& header = rows.front().cells;
    const auto label_it = std::find(header.begin(), header.end(), label_column);
    if (label_it == header.end()) {
        throw ParseError("label column '" + label_column + "' not in header", rows.front().line);
    }
    const std::size_t label_idx = static_cast<std::size_t>(label_it - header.begin());
    const std::size_t width = header.size();
    const std::size_t n = rows.size() - 1;
    if (n == 0) throw ParseError("no data rows", rows.front().line);

    Dataset data;
    data.x = Matrix(width - 1, n);
    data.y = Matrix(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        const csv::Row& row = rows[i + 1];
        if (row.cells.size() != width) {
            throw ParseError("expected " + std::to_string(width) + " cells, found " + std::to_string(row.cells.size()),
                             row.line);
        }
        std::size_t f = 0;
        for (std::size_t c = 0; c < width; ++c) {
            const double v = csv::parse_number(row.cells[c], row.line);
            if (c == label_idx) data.y(i, 0) = v; else data.x(f++, i) = v;
        }
    }
    if (unit_normalize) {
        for (std::size_t c = 0; c < n; ++c) {
            double s = 0.0;
            for (std::size_t r = 0; r < data.dim(); ++r) s += data.x(r, c) * data.x(r, c);
            if (s == 0.0) throw ParseError("zero feature vector cannot be normalized", rows[c + 1].line);
            normalize_column(data.x, c);
        }
    }
    data.descriptor = {"csv", 0, {{"label", label_column}, {"path", path.filename().string()}}};
    return data;
}

void export_csv(const std::filesystem::path& path, const Dataset& data) {
    std::string out = "# " + data.descriptor.to_string() + "\n";
    for (std::size_t f = 0; f < data.dim(); ++f) out += "f" + std::to_string(f + 1) + ",";
    out += "y\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
        for (std::size_t f = 0; f < data.dim(); ++f) out += format_double(data.x(f, i)) + ",";
        out += format_double(data.y(i, 0)) + "\n";
    }
    atomic_write(path, out);
}

// ---------------------------------------------------------------------------
// Split

SplitPlan make_split(std::size_t n, double fraction, const SeededRng& rng, double subsample) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw Error(ErrorKind::configuration, "split fraction must lie in (0, 1)");
    if (!(subsample > 0.0 && subsample <= 1.0)) throw Error(ErrorKind::configuration, "subsample must lie in (0, 1]");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    SeededRng stream = rng;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[stream.below(i)]);
    const auto kept = static_cast<std::size_t>(std::floor(subsample * static_cast<double>(n) + 1e-9));
    const auto cut = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(kept) + 1e-9));
    if (cut == 0 || cut >= kept) {
        throw Error(ErrorKind::configuration, "split of " + std::to_string(kept) + " samples at fraction " +
                                                  format_double(fraction) + " leaves an empty part");
    }
    SplitPlan plan;
    plan.fraction = fraction;
    plan.subsample = subsample;
    plan.seed = rng.seed();
    plan.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut));
    plan.valid.assign(order.begin() + static_cast<std::ptrdiff_t>(cut), order.begin() + static_cast<std::ptrdiff_t>(kept));
    return plan;
}

}  // namespace diffora
