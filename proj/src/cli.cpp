// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "diffora/cli.hpp"

#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "diffora/checkpoint.hpp"
#include "diffora/config.hpp"
#include "diffora/errors.hpp"
#include "diffora/io.hpp"
#include "diffora/pipeline.hpp"

namespace diffora {

namespace {

RunConfig load(const std::filesystem::path& path) {
    RunConfig cfg = load_config(path);
    apply_env_overrides(cfg);
    return cfg;
}

void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
}

int cmd_gen_data(const Command& cmd, std::ostream& out) {
    const RunConfig cfg = load(cmd.config);
    Dataset data;
    if (cfg.data.generator == "sphere") {
        const TheoryConfig& t = cfg.theory;
        data = gen_sphere(t.n, t.d, t.c_label, SeededRng(cfg.seed, 0).derive(streams::theory).derive(1));
    } else {
        data = prepare_data(cfg).task.data;
    }
    export_csv(cmd.out, data);
    out << "wrote " << data.size() << " samples to " << cmd.out.string() << "\n";
    return exit_code::ok;
}

int cmd_relax(const Command& cmd, std::ostream& out) {
    const RunConfig cfg = load(cmd.config);
    const PreparedData data = prepare_data(cfg);
    const Stage1Result s1 = run_stage1(cfg, data);
    ensure_dir(cmd.out);
    write_checkpoint(cmd.out / "stage1.dfra", snapshot(canonical_text(cfg), s1.dam, s1.net));
    write_dam_csv(cmd.out / "gamma_bar.csv", s1.dam.gamma_bar);
    RunReport partial;
    partial.stage1 = s1.losses;
    atomic_write(cmd.out / "stage1_losses.csv", loss_csv(partial));
    out << "stage 1: " << s1.losses.size() << " updates in " << s1.seconds << " s\n";
    return exit_code::ok;
}

int cmd_discretize(const Command& cmd, std::ostream& out) {
    Checkpoint ckpt = read_checkpoint(cmd.checkpoint);
    ckpt.dam = discretize(ckpt.dam);
    ensure_dir(cmd.out);
    write_checkpoint(cmd.out / "discretized.dfra", ckpt);
    write_dam_csv(cmd.out / "gamma_bin.csv", *ckpt.dam.gamma_bin);
    out << "selected k=" << ckpt.dam.k << " modules per layer\n";
    return exit_code::ok;
}

int cmd_finetune(const Command& cmd, std::ostream& out) {
    const Checkpoint ckpt = read_checkpoint(cmd.checkpoint);
    RunConfig cfg = parse_config(ckpt.config_text);
    apply_env_overrides(cfg);
    RunArtifacts run;
    run.data = prepare_data(cfg);
    ModularNet warm = run.data.task.base;
    restore_adapters(ckpt, warm);
    run.stage2 = run_stage2(cfg, ckpt.dam, run.data, &warm);
    RunReport& rep = run.report;
    rep.config_text = canonical_text(cfg);
    rep.stage2 = run.stage2.losses;
    rep.gamma_bar = run.stage2.dam.gamma_bar;
    rep.gamma_bin = *run.stage2.dam.gamma_bin;
    rep.planted = run.data.task.planted;
    rep.row_entropy = row_entropy(rep.gamma_bar);
    rep.base_valid_loss = run.stage2.base_valid_loss;
    rep.final_train_loss = rep.stage2.back().train;
    rep.final_valid_loss = rep.stage2.back().valid;
    rep.trainable_parameters = run.stage2.net.trainable_parameter_count();
    rep.expected_parameters =
        expected_parameter_count(cfg.data.shape, rep.gamma_bin, cfg.r_l, cfg.r_s, run.stage2.sharing);
    rep.planted_recovery = planted_recovery(rep.gamma_bin, run.data.task.planted);
    rep.sharing = run.stage2.sharing;
    write_run_outputs(cmd.out, run);
    out << "final valid loss " << format_double(rep.final_valid_loss) << "\n";
    return exit_code::ok;
}

int cmd_run_all(const Command& cmd, std::ostream& out) {
    const RunConfig cfg = load(cmd.config);
    const RunArtifacts run = run_all(cfg);
    write_run_outputs(cmd.out, run);
    const RunReport& r = run.report;
    out << "stage 1: " << r.stage1.size() << " updates, " << r.stage1_seconds << " s\n"
        << "stage 2: " << r.stage2.size() << " updates, " << r.stage2_seconds << " s\n"
        << "final valid loss " << format_double(r.final_valid_loss) << " (base " << format_double(r.base_valid_loss)
        << "), planted recovery " << r.planted_recovery << ", trainable parameters " << r.trainable_parameters
        << "\n";
    return exit_code::ok;
}

int cmd_verify_theory(const Command& cmd, std::ostream& out, std::ostream& err) {
    const RunConfig cfg = load(cmd.config);
    const TheoryReport rep = verify_theory(cfg.theory, cfg.seed);
    const std::string text = theory_report_text(rep);
    if (!cmd.out.empty()) atomic_write(cmd.out, text);
    out << text;
    if (rep.all_passed()) return exit_code::ok;
    for (const TheoryCheck& c : rep.checks)
        if (!c.passed) err << "FAILED " << c.name << ": " << c.detail << "\n";
    return exit_code::assertion;
}

int cmd_compare(const Command& cmd, std::ostream& out) {
    const RunConfig cfg = load(cmd.config);
    std::vector<StrategyRow> rows;
    if (cmd.rho_sweep.empty()) {
        rows = run_compare(cfg, cmd.strategies, cmd.seeds);
    } else {
        for (double rho : cmd.rho_sweep) {
            RunConfig c = cfg;
            c.rho = rho;
            auto part = run_compare(c, cmd.strategies, cmd.seeds);
            rows.insert(rows.end(), part.begin(), part.end());
        }
    }
    const std::string table = compare_table(rows);
    if (!cmd.out.empty()) atomic_write(cmd.out, table);
    out << table;
    return exit_code::ok;
}

int cmd_dump_dam(const Command& cmd, std::ostream& out) {
    const Checkpoint ckpt = read_checkpoint(cmd.checkpoint);
    ensure_dir(cmd.out);
    write_dam_csv(cmd.out / "gamma_bar.csv", ckpt.dam.gamma_bar);
    const Matrix bin = ckpt.dam.gamma_bin ? *ckpt.dam.gamma_bin : top_k_rows(ckpt.dam.gamma_bar, ckpt.dam.k);
    write_dam_csv(cmd.out / "gamma_bin.csv", bin);
    out << "wrote " << ckpt.dam.layers() << "x" << ckpt.dam.modules() << " DAM to " << cmd.out.string() << "\n";
    return exit_code::ok;
}

}  // namespace

ParseResult parse_args(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Selective module-wise low-rank adaptation experiments", "diffora"};
    app.require_subcommand(1);
    Command cmd;
    std::string strategies = "diffora,random";

    auto* gen = app.add_subcommand("gen-data", "Generate the configured dataset as CSV");
    gen->add_option("--config", cmd.config, "Run config (JSON)")->required();
    gen->add_option("--out", cmd.out, "Output CSV path")->required();

    auto* relax = app.add_subcommand("relax", "Stage 1: continuous relaxation");
    relax->add_option("--config", cmd.config, "Run config (JSON)")->required();
    relax->add_option("--out", cmd.out, "Output directory")->default_val("diffora_out");

    auto* disc = app.add_subcommand("discretize", "Top-k discretization of a Stage 1 checkpoint");
    disc->add_option("--checkpoint", cmd.checkpoint, "Stage 1 checkpoint")->required();
    disc->add_option("--out", cmd.out, "Output directory")->default_val("diffora_out");

    auto* fine = app.add_subcommand("finetune", "Stage 2: fine-tune the selected modules");
    fine->add_option("--checkpoint", cmd.checkpoint, "Stage 1 or discretized checkpoint")->required();
    fine->add_option("--out", cmd.out, "Output directory")->default_val("diffora_out");

    auto* all = app.add_subcommand("run-all", "Stage 1, discretization and Stage 2");
    all->add_option("--config", cmd.config, "Run config (JSON)")->required();
    all->add_option("--out", cmd.out, "Output directory")->default_val("diffora_out");

    auto* theory = app.add_subcommand("verify-theory", "Gram-matrix and convergence checks");
    theory->add_option("--config", cmd.config, "Run config (JSON) with a theory block")->required();
    theory->add_option("--out", cmd.out, "Optional report path");

    auto* cmp = app.add_subcommand("compare", "Compare selection strategies on the planted task");
    cmp->add_option("--config", cmd.config, "Run config (JSON)")->required();
    cmp->add_option("--strategies", strategies, "Comma list of diffora,random,all,none")
        ->default_val("diffora,random");
    cmp->add_option("--seeds", cmd.seeds, "Number of seeds")->default_val(5)->check(CLI::PositiveNumber);
    cmp->add_option("--rho-sweep", cmd.rho_sweep, "Sample rates to sweep")->delimiter(',');
    cmp->add_option("--out", cmd.out, "Optional CSV table path");

    auto* dump = app.add_subcommand("dump-dam", "Write the DAM of a checkpoint as CSV");
    dump->add_option("--checkpoint", cmd.checkpoint, "Checkpoint")->required();
    dump->add_option("--out", cmd.out, "Output directory")->default_val("diffora_out");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    if (!reversed.empty()) reversed.pop_back();  // program name
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e, out, err);
        return {std::nullopt, exit_code::ok};
    } catch (const CLI::CallForAllHelp& e) {
        app.exit(e, out, err);
        return {std::nullopt, exit_code::ok};
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return {std::nullopt, exit_code::usage};
    }

    cmd.name = app.get_subcommands().front()->get_name();
    if (cmd.name == "compare") {
        cmd.strategies.clear();
        std::stringstream ss(strategies);
        for (std::string item; std::getline(ss, item, ',');)
            if (!item.empty()) cmd.strategies.push_back(item);
        for (const std::string& s : cmd.strategies) {
            if (s != "diffora" && s != "random" && s != "all" && s != "none") {
                err << "--strategies: unknown strategy '" << s << "'\n";
                return {std::nullopt, exit_code::usage};
            }
        }
        if (cmd.strategies.empty()) {
            err << "--strategies: at least one strategy is required\n";
            return {std::nullopt, exit_code::usage};
        }
    }
    return {cmd, exit_code::ok};
}

int run_command(const Command& cmd, std::ostream& out, std::ostream& err) {
    try {
        if (cmd.name == "gen-data") return cmd_gen_data(cmd, out);
        if (cmd.name == "relax") return cmd_relax(cmd, out);
        if (cmd.name == "discretize") return cmd_discretize(cmd, out);
        if (cmd.name == "finetune") return cmd_finetune(cmd, out);
        if (cmd.name == "run-all") return cmd_run_all(cmd, out);
        if (cmd.name == "verify-theory") return cmd_verify_theory(cmd, out, err);
        if (cmd.name == "compare") return cmd_compare(cmd, out);
        if (cmd.name == "dump-dam") return cmd_dump_dam(cmd, out);
        err << "unknown command '" << cmd.name << "'\n";
        return exit_code::usage;
    } catch (const DivergenceError& e) {
        err << e.what();
        if (!e.last_finite_losses().empty()) {
            err << "; last finite losses:";
            for (double v : e.last_finite_losses()) err << " " << format_double(v);
        }
        err << "\n";
        return exit_code::divergence;
    } catch (const Error& e) {
        err << e.what() << "\n";
        return e.kind() == ErrorKind::io ? exit_code::io : exit_code::usage;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return exit_code::internal;
    }
}

int cli_main(int argc, const char* const* argv) {
    std::vector<std::string> args(argv, argv + argc);
    const ParseResult parsed = parse_args(args, std::cout, std::cerr);
    if (!parsed.command) return parsed.exit_code;
    return run_command(*parsed.command, std::cout, std::cerr);
}

}  // namespace diffora
