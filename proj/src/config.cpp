// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "diffora/config.hpp"

#include <charconv>
#include <cstdlib>
#include <set>

#include "diffora/dam.hpp"
#include "diffora/errors.hpp"
#include "diffora/io.hpp"
#include "json.hpp"

namespace diffora {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& known, const std::string& where) {
    for (const auto& [key, value] : obj.items()) {
        if (!known.contains(key)) throw Error(ErrorKind::configuration, "unknown key '" + key + "' in " + where);
    }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw Error(ErrorKind::configuration, std::string("bad value for '") + key + "': " + e.what());
    }
}

void read_size(const json& obj, const char* key, std::size_t& out) {
    if (!obj.contains(key)) return;
    const json& v = obj.at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
        throw Error(ErrorKind::configuration, std::string("'") + key + "' must be a non-negative integer");
    }
    out = v.get<std::size_t>();
}

void read_double(const json& obj, const char* key, double& out) {
    if (!obj.contains(key)) return;
    if (!obj.at(key).is_number()) throw Error(ErrorKind::configuration, std::string("'") + key + "' must be a number");
    out = obj.at(key).get<double>();
}

DataConfig parse_data(const json& j) {
    reject_unknown(j, {"generator", "layers", "model_dim", "ffn_dim", "seq_len", "out_dim", "n", "noise", "k_star", "planted",
                       "teacher_rank", "teacher_scale", "teacher_calibration", "base_scale", "base_rank", "split_fraction", "subsample"},
                   "data");
    DataConfig d;
    read(j, "generator", d.generator);
    read_size(j, "layers", d.shape.layers);
    read_size(j, "model_dim", d.shape.model_dim);
    read_size(j, "ffn_dim", d.shape.ffn_dim);
    read_size(j, "seq_len", d.shape.seq_len);
    read_size(j, "out_dim", d.shape.out_dim);
    read_size(j, "n", d.n);
    read_double(j, "noise", d.noise);
    read_size(j, "k_star", d.k_star);
    read_size(j, "teacher_rank", d.teacher_rank);
    read_double(j, "teacher_scale", d.teacher_scale);
    read(j, "teacher_calibration", d.teacher_calibration);
    read_double(j, "base_scale", d.base_scale);
    read_size(j, "base_rank", d.base_rank);
    read_double(j, "split_fraction", d.split_fraction);
    read_double(j, "subsample", d.subsample);
    if (j.contains("planted")) {
        const json& p = j.at("planted");
        if (!p.is_array()) throw Error(ErrorKind::configuration, "'planted' must be a list of rows");
        d.planted = Matrix(p.size(), kFamilyCount);
        for (std::size_t l = 0; l < p.size(); ++l) {
            if (!p[l].is_array() || p[l].size() != kFamilyCount) {
                throw Error(ErrorKind::configuration, "each 'planted' row needs 6 entries");
            }
            for (std::size_t f = 0; f < kFamilyCount; ++f) d.planted(l, f) = p[l][f].get<double>();
        }
    }
    return d;
}

TheoryConfig parse_theory(const json& j) {
    reject_unknown(j, {"n", "d", "m", "samples", "w0_scale", "c_label", "gamma", "groups", "active", "steps",
                       "eta_factor", "kappa", "C", "workers"},
                   "theory");
    TheoryConfig t;
    read_size(j, "n", t.n);
    read_size(j, "d", t.d);
    read_size(j, "m", t.m);
    read_size(j, "samples", t.samples);
    read_double(j, "w0_scale", t.w0_scale);
    read_double(j, "c_label", t.c_label);
    read(j, "gamma", t.gamma);
    read_size(j, "groups", t.groups);
    read_size(j, "active", t.active);
    read_size(j, "steps", t.steps);
    read_double(j, "eta_factor", t.eta_factor);
    read_double(j, "kappa", t.kappa);
    read_double(j, "C", t.c_const);
    read_size(j, "workers", t.workers);
    return t;
}

}  // namespace

RunConfig parse_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::configuration, std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw Error(ErrorKind::configuration, "config must be a JSON object");
    reject_unknown(j, {"seed", "architecture", "eta", "eta_dam", "eta_finetune", "V", "T_inner", "T_finetune", "rho", "r_l", "r_s",
                       "alpha", "dropout_p", "sharing", "sharing_auto", "warm_start", "momentum", "data", "theory"},
                   "config");
    RunConfig c;
    if (j.contains("seed")) {
        if (!j.at("seed").is_number_unsigned()) throw Error(ErrorKind::configuration, "'seed' must be unsigned");
        c.seed = j.at("seed").get<std::uint64_t>();
    }
    read(j, "architecture", c.architecture);
    read_double(j, "eta", c.eta);
    read_double(j, "eta_dam", c.eta_dam);
    read_double(j, "eta_finetune", c.eta_finetune);
    read_size(j, "V", c.v_outer);
    read_size(j, "T_inner", c.t_inner);
    read_size(j, "T_finetune", c.t_finetune);
    read_double(j, "rho", c.rho);
    read_size(j, "r_l", c.r_l);
    read_size(j, "r_s", c.r_s);
    read_double(j, "alpha", c.alpha);
    read_double(j, "dropout_p", c.dropout_p);
    read(j, "sharing", c.sharing);
    read(j, "sharing_auto", c.sharing_auto);
    read(j, "warm_start", c.warm_start);
    read_double(j, "momentum", c.momentum);
    if (j.contains("data")) c.data = parse_data(j.at("data"));
    if (j.contains("theory")) c.theory = parse_theory(j.at("theory"));
    validate_config(c);
    return c;
}

RunConfig load_config(const std::filesystem::path& path) { return parse_config(read_file(path)); }

void validate_config(const RunConfig& c) {
    auto fail = [](const std::string& msg) { throw Error(ErrorKind::configuration, msg); };
    if (c.architecture != "modular" && c.architecture != "theory") fail("architecture must be 'modular' or 'theory'");
    if (!(c.eta > 0.0)) fail("eta must be positive");
    if (c.eta_finetune == 0.0) fail("eta_finetune must be positive (or negative for 'same as eta')");
    if (c.eta_dam == 0.0) fail("eta_dam must be positive (or negative for 'same as eta')");
    if (c.v_outer < 1) fail("V must be >= 1");
    if (c.t_finetune < 1) fail("T_finetune must be >= 1");
    if (!(c.rho > 0.0 && c.rho <= 1.0)) fail("rho must lie in (0, 1]");
    if (selection_count(c.rho, kFamilyCount) < 1) {
        fail("rho=" + format_double(c.rho) + " with N=6 gives k = floor(rho*N) = 0");
    }
    if (c.r_l < 1) fail("r_l must be >= 1");
    if (c.r_s < 1) fail("r_s must be >= 1");
    if (!(c.dropout_p >= 0.0 && c.dropout_p < 1.0)) fail("dropout_p must lie in [0, 1)");
    if (!(c.momentum >= 0.0 && c.momentum < 1.0)) fail("momentum must lie in [0, 1)");

    const DataConfig& d = c.data;
    if (d.generator != "planted" && d.generator != "sphere") fail("data.generator must be 'planted' or 'sphere'");
    const ModularShape& s = d.shape;
    if (s.layers < 1 || s.model_dim < 1 || s.ffn_dim < 1 || s.seq_len < 1 || s.out_dim < 1) fail("model shape needs positive sizes");
    const std::size_t min_dim = std::min(s.model_dim, s.ffn_dim);
    if (c.r_l > min_dim) fail("r_l exceeds the smallest module dimension");
    if (c.r_s > min_dim) fail("r_s exceeds the smallest module dimension");
    if (d.n < 2) fail("data.n must be >= 2");
    if (d.noise < 0.0) fail("data.noise must be >= 0");
    if (d.teacher_calibration != "output" && d.teacher_calibration != "weight") {
        fail("data.teacher_calibration must be 'output' or 'weight'");
    }
    if (!(d.teacher_scale > 0.0)) fail("data.teacher_scale must be positive");
    if (!(d.base_scale > 0.0)) fail("data.base_scale must be positive");
    if (d.teacher_rank < 1) fail("data.teacher_rank must be >= 1");
    if (d.k_star < 1 || d.k_star > kFamilyCount) fail("data.k_star must lie in [1, 6]");
    if (!d.planted.empty() && d.planted.rows() != s.layers) fail("data.planted needs one row per layer");
    if (!(d.split_fraction > 0.0 && d.split_fraction < 1.0)) fail("data.split_fraction must lie in (0, 1)");
    if (!(d.subsample > 0.0 && d.subsample <= 1.0)) fail("data.subsample must lie in (0, 1]");

    const TheoryConfig& t = c.theory;
    if (t.n < 1 || t.n > 64) fail("theory.n must lie in [1, 64]");
    if (t.d < 2) fail("theory.d must be >= 2");
    if (t.m < 1) fail("theory.m must be >= 1");
    if (t.samples < 1) fail("theory.samples must be >= 1");
    if (t.gamma != "modules" && t.gamma != "ones") fail("theory.gamma must be 'modules' or 'ones'");
    if (t.gamma == "modules" && (t.groups < 1 || t.groups > t.m || t.active > t.groups)) {
        fail("theory.groups/active are inconsistent");
    }
    if (t.steps < 10) fail("theory.steps must be >= 10");
    if (!(t.eta_factor > 0.0)) fail("theory.eta_factor must be positive");
}

std::string canonical_text(const RunConfig& c) {
    json data = {
        {"generator", c.data.generator},
        {"layers", c.data.shape.layers},
        {"model_dim", c.data.shape.model_dim},
        {"ffn_dim", c.data.shape.ffn_dim},
        {"seq_len", c.data.shape.seq_len},
        {"out_dim", c.data.shape.out_dim},
        {"n", c.data.n},
        {"noise", c.data.noise},
        {"k_star", c.data.k_star},
        {"teacher_rank", c.data.teacher_rank},
        {"teacher_scale", c.data.teacher_scale},
        {"teacher_calibration", c.data.teacher_calibration},
        {"base_scale", c.data.base_scale},
        {"base_rank", c.data.base_rank},
        {"split_fraction", c.data.split_fraction},
        {"subsample", c.data.subsample},
    };
    if (!c.data.planted.empty()) {
        json rows = json::array();
        for (std::size_t l = 0; l < c.data.planted.rows(); ++l) {
            auto row = c.data.planted.row(l);
            rows.push_back(std::vector<double>(row.begin(), row.end()));
        }
        data["planted"] = rows;
    }
    json theory = {
        {"n", c.theory.n},           {"d", c.theory.d},
        {"m", c.theory.m},           {"samples", c.theory.samples},
        {"w0_scale", c.theory.w0_scale}, {"c_label", c.theory.c_label},
        {"gamma", c.theory.gamma},   {"groups", c.theory.groups},
        {"active", c.theory.active}, {"steps", c.theory.steps},
        {"eta_factor", c.theory.eta_factor}, {"kappa", c.theory.kappa},
        {"C", c.theory.c_const},     {"workers", c.theory.workers},
    };
    json j = {
        {"seed", c.seed},
        {"architecture", c.architecture},
        {"eta", c.eta},
        {"eta_dam", c.eta_dam},
        {"eta_finetune", c.eta_finetune},
        {"V", c.v_outer},
        {"T_inner", c.t_inner},
        {"T_finetune", c.t_finetune},
        {"rho", c.rho},
        {"r_l", c.r_l},
        {"r_s", c.r_s},
        {"alpha", c.alpha},
        {"dropout_p", c.dropout_p},
        {"sharing", c.sharing},
        {"sharing_auto", c.sharing_auto},
        {"warm_start", c.warm_start},
        {"momentum", c.momentum},
        {"data", data},
        {"theory", theory},
    };
    return j.dump(2) + "\n";
}

void apply_env_overrides(RunConfig& cfg) {
    const char* env = std::getenv("DIFFORA_SEED");
    if (env == nullptr || *env == '\0') return;
    std::uint64_t seed = 0;
    const char* end = env + std::char_traits<char>::length(env);
    auto [ptr, ec] = std::from_chars(env, end, seed);
    if (ec != std::errc() || ptr != end) {
        throw Error(ErrorKind::configuration, std::string("DIFFORA_SEED is not an unsigned integer: ") + env);
    }
    cfg.seed = seed;
}

}  // namespace diffora
