// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "diffora/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

#include "diffora/errors.hpp"
#include "diffora/io.hpp"
#include "diffora/optim.hpp"
#include "json.hpp"

namespace diffora {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

SeededRng root_rng(const RunConfig& cfg) { return SeededRng(cfg.seed, 0); }

AttachOptions attach_options(const RunConfig& cfg, bool sharing) {
    AttachOptions opts;
    opts.r_l = cfg.r_l;
    opts.r_s = cfg.r_s;
    opts.alpha = cfg.alpha;
    opts.dropout_p = cfg.dropout_p;
    opts.sharing = sharing;
    opts.warm_start = cfg.warm_start;
    return opts;
}

json matrix_json(const Matrix& m) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    return rows;
}

json losses_json(const std::vector<StepLoss>& losses) {
    json j = json::object();
    j["steps"] = losses.size();
    j["train"] = json::array();
    j["valid"] = json::array();
    for (const StepLoss& s : losses) {
        j["train"].push_back(s.train);
        j["valid"].push_back(s.valid);
    }
    return j;
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double sample_sd(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double mu = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - mu) * (x - mu);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

// ---------------------------------------------------------------------------
// Stages

PreparedData prepare_data(const RunConfig& cfg) {
    const SeededRng root = root_rng(cfg);
    const DataConfig& dc = cfg.data;
    PlantedOptions opts;
    opts.shape = dc.shape;
    opts.planted = dc.planted.empty() ? random_planted_set(dc.shape.layers, dc.k_star, root.derive(streams::planted))
                                      : dc.planted;
    opts.noise = dc.noise;
    opts.n = dc.n;
    opts.teacher_rank = dc.teacher_rank;
    opts.teacher_scale = dc.teacher_scale;
    opts.base_scale = dc.base_scale;
    opts.base_rank = dc.base_rank;
    opts.calibration = dc.teacher_calibration == "weight" ? TeacherCalibration::weight : TeacherCalibration::output;

    PreparedData out;
    out.task = gen_planted(opts, root.derive(streams::data));
    out.split = make_split(dc.n, dc.split_fraction, root.derive(streams::split), dc.subsample);
    out.train = select_samples(out.task.data, out.split.train);
    out.valid = select_samples(out.task.data, out.split.valid);
    return out;
}

Stage1Result run_stage1(const RunConfig& cfg, const PreparedData& data) {
    const auto start = Clock::now();
    const SeededRng root = root_rng(cfg);
    Stage1Result res;
    res.net = data.task.base;
    attach_all_adapters(res.net, cfg.r_l, cfg.alpha, root.derive(streams::stage1_adapters), cfg.dropout_p);
    res.dam = init_dam(res.net.layer_count(), kFamilyCount, cfg.rho);

    BilevelOptions opts;
    opts.eta = cfg.eta;
    opts.eta_dam = cfg.eta_dam;
    opts.inner_steps = cfg.t_inner;
    opts.momentum = cfg.momentum;
    MomentumState momentum;
    momentum.momentum = cfg.momentum;
    const SeededRng dropout = root.derive(streams::stage1_dropout);
    res.losses.reserve(cfg.v_outer * (1 + cfg.t_inner));
    for (std::size_t v = 0; v < cfg.v_outer; ++v) {
        opts.step_offset = res.losses.size();
        bilevel_step(res.dam, res.net, {data.train.x, data.train.y}, {data.valid.x, data.valid.y}, opts, &res.losses,
                     cfg.momentum > 0.0 ? &momentum : nullptr, cfg.dropout_p > 0.0 ? &dropout : nullptr);
    }
    res.seconds = seconds_since(start);
    return res;
}

Stage2Result finetune_selection(const RunConfig& cfg, const Matrix& gamma_bin, const PreparedData& data, bool sharing,
                                const ModularNet* warm) {
    const auto start = Clock::now();
    const SeededRng root = root_rng(cfg);
    Stage2Result res;
    res.sharing = sharing;
    res.dam.logits = Matrix(gamma_bin.rows(), gamma_bin.cols());
    res.dam.gamma_bar = gamma_from_logits(res.dam.logits);
    res.dam.gamma_bin = gamma_bin;
    res.dam.rho = cfg.rho;
    res.dam.k = selection_count(cfg.rho, kFamilyCount);

    res.net = (warm && cfg.warm_start) ? *warm : data.task.base;
    attach_sharing(res.dam, res.net, attach_options(cfg, sharing), root.derive(streams::stage2_adapters));

    const Matrix gates = unit_gates(res.net.layer_count());
    res.base_valid_loss = modular_loss(data.task.base, gates, data.valid.x, data.valid.y);
    MomentumState momentum;
    momentum.momentum = cfg.momentum;
    const SeededRng dropout = root.derive(streams::stage2_dropout);
    res.losses.reserve(cfg.t_finetune);
    for (std::size_t t = 0; t < cfg.t_finetune; ++t) {
        std::optional<SeededRng> drop;
        if (cfg.dropout_p > 0.0) drop = dropout.derive(t);
        const LossAndGradients lg =
            modular_loss_grad(res.net, gates, data.train.x, data.train.y, drop ? &*drop : nullptr);
        std::vector<double> last;
        for (auto it = res.losses.rbegin(); it != res.losses.rend() && last.size() < 3; ++it) last.push_back(it->train);
        if (!std::isfinite(lg.loss)) throw DivergenceError("non-finite fine-tuning loss", t, last);
        try {
            apply_adapter_step(res.net, lg.grad, cfg.stage2_eta(), cfg.momentum > 0.0 ? &momentum : nullptr);
        } catch (const DivergenceError&) {
            throw DivergenceError("non-finite fine-tuning gradient", t, last);
        }
        const double tl = modular_loss(res.net, gates, data.train.x, data.train.y);
        const double vl = modular_loss(res.net, gates, data.valid.x, data.valid.y);
        if (!std::isfinite(tl) || !std::isfinite(vl)) throw DivergenceError("non-finite fine-tuning loss", t, last);
        res.losses.push_back({tl, vl});
    }
    res.seconds = seconds_since(start);
    return res;
}

Stage2Result run_stage2(const RunConfig& cfg, const DamState& dam, const PreparedData& data, const ModularNet* warm) {
    if (dam.gamma_bar.empty()) throw Error(ErrorKind::configuration, "stage 2 needs a relaxed DAM");
    const DamState disc = dam.gamma_bin ? dam : discretize(dam);
    const bool sharing = cfg.sharing_auto ? sharing_heuristic(disc.gamma_bar) : cfg.sharing;
    Stage2Result res = finetune_selection(cfg, *disc.gamma_bin, data, sharing, warm);
    res.dam = disc;
    return res;
}

std::size_t expected_parameter_count(const ModularShape& shape, const Matrix& gamma_bin, std::size_t r_l,
                                     std::size_t r_s, bool sharing) {
    std::size_t total = 0;
    for (Family f : kFamilies) {
        const auto [d, k] = shape.weight_shape(f);
        bool unselected = false;
        for (std::size_t l = 0; l < gamma_bin.rows(); ++l) {
            if (gamma_bin(l, index_of(f)) == 1.0) total += r_l * (d + k);
            else unselected = true;
        }
        if (sharing && unselected) total += r_s * (d + k);
    }
    return total;
}

double planted_recovery(const Matrix& gamma_bin, const Matrix& planted) {
    if (!gamma_bin.same_shape(planted)) throw Error(ErrorKind::dimension, "selection and planted set differ in shape");
    double hit = 0.0, total = 0.0;
    for (std::size_t i = 0; i < planted.size(); ++i) {
        if (planted.data()[i] != 1.0) continue;
        total += 1.0;
        hit += gamma_bin.data()[i] == 1.0 ? 1.0 : 0.0;
    }
    return total == 0.0 ? 0.0 : hit / total;
}

RunArtifacts run_all(const RunConfig& cfg) {
    validate_config(cfg);
    if (cfg.architecture != "modular") {
        throw Error(ErrorKind::configuration, "run-all drives the modular architecture; use verify-theory for 'theory'");
    }
    RunArtifacts run;
    run.data = prepare_data(cfg);
    run.stage1 = run_stage1(cfg, run.data);
    run.stage2 = run_stage2(cfg, run.stage1.dam, run.data, &run.stage1.net);

    RunReport& rep = run.report;
    rep.config_text = canonical_text(cfg);
    rep.stage1 = run.stage1.losses;
    rep.stage2 = run.stage2.losses;
    rep.gamma_bar = run.stage2.dam.gamma_bar;
    rep.gamma_bin = *run.stage2.dam.gamma_bin;
    rep.planted = run.data.task.planted;
    rep.row_entropy = row_entropy(rep.gamma_bar);
    rep.stage1_seconds = run.stage1.seconds;
    rep.stage2_seconds = run.stage2.seconds;
    rep.base_valid_loss = run.stage2.base_valid_loss;
    rep.final_train_loss = rep.stage2.back().train;
    rep.final_valid_loss = rep.stage2.back().valid;
    rep.trainable_parameters = run.stage2.net.trainable_parameter_count();
    rep.expected_parameters =
        expected_parameter_count(cfg.data.shape, rep.gamma_bin, cfg.r_l, cfg.r_s, run.stage2.sharing);
    rep.planted_recovery = planted_recovery(rep.gamma_bin, run.data.task.planted);
    rep.sharing = run.stage2.sharing;
    return run;
}

std::string report_text(const RunReport& r) {
    json j;
    j["config"] = json::parse(r.config_text);
    j["stage1"] = losses_json(r.stage1);
    j["stage2"] = losses_json(r.stage2);
    j["dam"] = {{"gamma_bar", matrix_json(r.gamma_bar)},
                {"gamma_bin", matrix_json(r.gamma_bin)},
                {"planted", matrix_json(r.planted)},
                {"row_entropy", r.row_entropy},
                {"sharing", r.sharing}};
    j["metrics"] = {{"base_valid_loss", r.base_valid_loss},
                    {"final_train_loss", r.final_train_loss},
                    {"final_valid_loss", r.final_valid_loss},
                    {"trainable_parameters", r.trainable_parameters},
                    {"expected_parameters", r.expected_parameters},
                    {"planted_recovery", r.planted_recovery}};
    return j.dump(2) + "\n";
}

std::string loss_csv(const RunReport& r) {
    std::string out = "step,train_loss,valid_loss\n";
    std::size_t step = 0;
    for (const auto* part : {&r.stage1, &r.stage2})
        for (const StepLoss& s : *part) {
            out += std::to_string(step++) + "," + format_double(s.train) + "," + format_double(s.valid) + "\n";
        }
    return out;
}

void write_run_outputs(const std::filesystem::path& dir, const RunArtifacts& run) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
    write_checkpoint(dir / "checkpoint.dfra", snapshot(run.report.config_text, run.stage2.dam, run.stage2.net));
    atomic_write(dir / "report.json", report_text(run.report));
    atomic_write(dir / "losses.csv", loss_csv(run.report));
    write_dam_csv(dir / "gamma_bar.csv", run.report.gamma_bar);
    write_dam_csv(dir / "gamma_bin.csv", run.report.gamma_bin);
}

// ---------------------------------------------------------------------------
// Comparison

std::vector<StrategyRow> run_compare(const RunConfig& base_cfg, const std::vector<std::string>& strategies,
                                     std::size_t seeds) {
    if (seeds < 1) throw Error(ErrorKind::configuration, "compare needs at least one seed");
    if (strategies.empty()) throw Error(ErrorKind::configuration, "compare needs at least one strategy");
    for (const std::string& s : strategies) {
        if (s != "diffora" && s != "random" && s != "all" && s != "none") {
            throw Error(ErrorKind::configuration, "unknown strategy '" + s + "'");
        }
    }
    validate_config(base_cfg);
    const std::size_t k = selection_count(base_cfg.rho, kFamilyCount);
    std::vector<StrategyRow> rows(strategies.size());
    std::vector<double> recovery_sum(strategies.size(), 0.0);
    for (std::size_t i = 0; i < strategies.size(); ++i) {
        rows[i].strategy = strategies[i];
        rows[i].rho = base_cfg.rho;
        rows[i].k = strategies[i] == "all" ? kFamilyCount : strategies[i] == "none" ? 0 : k;
    }

    for (std::size_t s = 0; s < seeds; ++s) {
        RunConfig cfg = base_cfg;
        cfg.seed = base_cfg.seed + s;
        const PreparedData data = prepare_data(cfg);
        const std::size_t layers = cfg.data.shape.layers;
        std::optional<std::size_t> budget;
        for (std::size_t i = 0; i < strategies.size(); ++i) {
            const std::string& name = strategies[i];
            Stage2Result res;
            if (name == "diffora") {
                const Stage1Result s1 = run_stage1(cfg, data);
                res = run_stage2(cfg, s1.dam, data, &s1.net);
            } else if (name == "random") {
                const Matrix pick = random_planted_set(layers, k, root_rng(cfg).derive(streams::random_selection));
                res = finetune_selection(cfg, pick, data, cfg.sharing);
            } else if (name == "all") {
                res = finetune_selection(cfg, Matrix(layers, kFamilyCount, 1.0), data, false);
            } else {
                res = finetune_selection(cfg, Matrix(layers, kFamilyCount, 0.0), data, false);
            }
            const std::size_t params = res.net.trainable_parameter_count();
            if (name == "diffora" || name == "random") {
                const std::size_t selected =
                    expected_parameter_count(cfg.data.shape, *res.dam.gamma_bin, cfg.r_l, cfg.r_s, false);
                if (budget && *budget != selected) {
                    throw Error(ErrorKind::configuration, "selected-adapter budgets differ across strategies (" +
                                                              std::to_string(*budget) + " vs " +
                                                              std::to_string(selected) + ")");
                }
                budget = selected;
            }
            rows[i].parameters = params;
            rows[i].final_losses.push_back(res.losses.back().valid);
            recovery_sum[i] += planted_recovery(*res.dam.gamma_bin, data.task.planted);
        }
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        rows[i].mean_loss = mean(rows[i].final_losses);
        rows[i].sd_loss = sample_sd(rows[i].final_losses);
        rows[i].recovery = recovery_sum[i] / static_cast<double>(seeds);
    }
    return rows;
}

std::string compare_table(const std::vector<StrategyRow>& rows) {
    std::string out = "strategy,rho,k,mean_final_loss,sd_final_loss,planted_recovery,parameters\n";
    for (const StrategyRow& r : rows) {
        out += r.strategy + "," + format_double(r.rho) + "," + std::to_string(r.k) + "," + format_double(r.mean_loss) +
               "," + format_double(r.sd_loss) + "," + format_double(r.recovery) + "," + std::to_string(r.parameters) +
               "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Theory verification

bool TheoryReport::all_passed() const {
    for (const TheoryCheck& c : checks)
        if (!c.passed) return false;
    return true;
}

namespace {

TheoryRun train_and_fit(TheoryNet net, const Matrix& x, const Matrix& y, double eta, std::size_t steps) {
    TheoryRun run;
    run.eta = eta;
    run.residuals = train_theory_net(net, x, y, eta, steps);
    run.slope = fit_convergence_rate(run.residuals, eta);
    run.decay_orders = std::log10(run.residuals.front() / run.residuals.back());
    return run;
}

// Trains the full effective weight w0 + gamma∘w from its gated starting point,
// the dynamics whose kernel is the gated Gram.
TheoryNet effective_weight_net(const TheoryNet& net, const Matrix& gamma) {
    TheoryNet eff = net;
    eff.w0 = net.w0 + hadamard(gamma, net.w);
    eff.w = Matrix(net.w.rows(), net.w.cols());
    eff.gamma = Matrix(net.w.rows(), net.w.cols(), 1.0);
    return eff;
}

// First step at which either run's relative residual reaches `floor`, else
// the last step.
std::size_t comparison_step(const TheoryRun& a, const TheoryRun& b, double floor) {
    const std::size_t n = std::min(a.residuals.size(), b.residuals.size());
    for (std::size_t t = 0; t < n; ++t) {
        if (a.residuals[t] <= floor * a.residuals.front() || b.residuals[t] <= floor * b.residuals.front()) return t;
    }
    return n - 1;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

}  // namespace

TheoryReport verify_theory(const TheoryConfig& cfg, std::uint64_t seed) {
    const SeededRng root = SeededRng(seed, 0).derive(streams::theory);
    const Dataset data = gen_sphere(cfg.n, cfg.d, cfg.c_label, root.derive(1));
    TheoryNet net = make_theory_net(cfg.d, cfg.m, cfg.w0_scale, root.derive(2));
    const Matrix gamma = cfg.gamma == "ones" ? Matrix(cfg.d, cfg.m, 1.0)
                                             : module_gamma(cfg.d, cfg.m, cfg.groups, cfg.active, root.derive(3));

    TheoryReport rep;
    const CoupledGram coupled = estimate_coupled_gram(data.x, net.w0, gamma, cfg.samples, root.derive(4), cfg.workers);
    rep.gated = coupled.gated;
    rep.ungated = coupled.ungated;
    rep.eigen = eigen_compare(coupled, data.x);
    const EigenComparison& e = rep.eigen;

    rep.checks.push_back({"gram_psd", e.lambda_gamma >= -e.noise_floor && e.lambda_0 >= -e.noise_floor,
                          "lambda_gamma=" + fmt(e.lambda_gamma) + " lambda_0=" + fmt(e.lambda_0) +
                              " floor=" + fmt(-e.noise_floor)});
    rep.checks.push_back({"eigen_dominance", !e.premise_holds || e.dominance_holds,
                          std::string(e.premise_holds ? "premise holds" : "premise fails, not asserted") +
                              ": lambda_gamma - lambda_0 = " + fmt(e.lambda_gamma - e.lambda_0) +
                              " (tolerance " + fmt(e.noise_floor) + ")"});

    if (!(e.lambda_gamma > 0.0)) {
        rep.checks.push_back({"convergence", false, "lambda_gamma is not positive; no step size can be derived"});
    } else {
        const double eta = cfg.eta_factor / e.lambda_gamma;
        TheoryNet gated = net;
        gated.gamma = gamma;
        TheoryNet ungated = net;
        ungated.gamma = Matrix(cfg.d, cfg.m, 1.0);
        rep.gated_run = train_and_fit(gated, data.x, data.y, eta, cfg.steps);
        rep.ungated_run = train_and_fit(ungated, data.x, data.y, eta, cfg.steps);
        const double need = 0.5 * e.lambda_gamma;
        rep.checks.push_back({"convergence_rate", std::abs(rep.gated_run.slope) >= need && rep.gated_run.slope < 0.0,
                              "slope=" + fmt(rep.gated_run.slope) + " required |slope| >= " + fmt(need)});
        rep.checks.push_back({"residual_decay", rep.gated_run.decay_orders >= 4.0,
                              "decayed " + fmt(rep.gated_run.decay_orders) + " orders in " +
                                  std::to_string(cfg.steps) + " steps (need 4)"});
        rep.gated_kernel_run = train_and_fit(effective_weight_net(net, gamma), data.x, data.y, eta, cfg.steps);
        rep.ungated_kernel_run =
            train_and_fit(effective_weight_net(net, Matrix(cfg.d, cfg.m, 1.0)), data.x, data.y, eta, cfg.steps);
        rep.dominance_step = comparison_step(rep.gated_kernel_run, rep.ungated_kernel_run, 1e-12);
        const auto& gr = rep.gated_kernel_run.residuals;
        const auto& ur = rep.ungated_kernel_run.residuals;
        const double g_rel = gr[rep.dominance_step] / gr.front();
        const double u_rel = ur[rep.dominance_step] / ur.front();
        // The premise is resolved only to the eigenvalue noise floor, so the
        // rates may differ by that much: allow exp(floor * t) on top of 1.05.
        const double t = static_cast<double>(rep.dominance_step) * eta;
        const double allowed = 1.05 * std::exp(e.noise_floor * t);
        rep.checks.push_back({"convergence_dominance", !e.premise_holds || g_rel <= allowed * u_rel,
                              std::string(e.premise_holds ? "premise holds" : "premise fails, not asserted") +
                                  ": relative residual at step " + std::to_string(rep.dominance_step) +
                                  " gated=" + fmt(g_rel) + " ungated=" + fmt(u_rel) + " ratio=" +
                                  fmt(g_rel / u_rel) + " allowed=" + fmt(allowed)});
    }

    rep.generalization = generalization_term(data.y, rep.gated.h, cfg.n);
    rep.checks.push_back({"generalization_order", rep.generalization.tight <= rep.generalization.loose + 1e-8,
                          "tight=" + fmt(rep.generalization.tight) + " loose=" + fmt(rep.generalization.loose)});
    try {
        rep.theorem_eta = theorem_step_size(data.y, rep.gated.h, cfg.n, cfg.m, cfg.kappa, cfg.c_const);
    } catch (const Error&) {
        rep.theorem_eta = std::nan("");
    }
    return rep;
}

std::string theory_report_text(const TheoryReport& r) {
    json j;
    j["lambda_gamma"] = r.eigen.lambda_gamma;
    j["lambda_0"] = r.eigen.lambda_0;
    j["premise_lambda_min"] = r.eigen.premise_lambda_min;
    j["noise_floor"] = r.eigen.noise_floor;
    j["premise_holds"] = r.eigen.premise_holds;
    j["dominance_holds"] = r.eigen.dominance_holds;
    j["samples"] = r.gated.samples;
    auto run_json = [](const TheoryRun& run) {
        return json{{"eta", run.eta},
                    {"slope", run.slope},
                    {"decay_orders", run.decay_orders},
                    {"initial_residual", run.residuals.empty() ? 0.0 : run.residuals.front()},
                    {"final_residual", run.residuals.empty() ? 0.0 : run.residuals.back()}};
    };
    j["gated_run"] = run_json(r.gated_run);
    j["ungated_run"] = run_json(r.ungated_run);
    j["gated_kernel_run"] = run_json(r.gated_kernel_run);
    j["ungated_kernel_run"] = run_json(r.ungated_kernel_run);
    j["dominance_step"] = r.dominance_step;
    j["generalization"] = {{"tight", r.generalization.tight},
                           {"loose", r.generalization.loose},
                           {"lambda_min", r.generalization.lambda_min},
                           {"regularization", r.generalization.regularization}};
    j["theorem_step_size"] = std::isfinite(r.theorem_eta) ? json(r.theorem_eta) : json(nullptr);
    json checks = json::array();
    for (const TheoryCheck& c : r.checks) checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
    j["checks"] = checks;
    j["all_passed"] = r.all_passed();
    return j.dump(2) + "\n";
}

}  // namespace diffora
