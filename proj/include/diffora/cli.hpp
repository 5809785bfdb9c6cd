// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace diffora {

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int internal = 1;
inline constexpr int usage = 2;
inline constexpr int divergence = 3;
inline constexpr int io = 4;
inline constexpr int assertion = 5;
}  // namespace exit_code

struct Command {
    std::string name;  // gen-data | relax | discretize | finetune | run-all | verify-theory | compare | dump-dam
    std::filesystem::path config;
    std::filesystem::path checkpoint;
    std::filesystem::path out;
    std::vector<std::string> strategies{"diffora", "random"};
    std::size_t seeds = 5;
    std::vector<double> rho_sweep;
};

struct ParseResult {
    std::optional<Command> command;
    int exit_code = exit_code::ok;  // meaningful when command is empty
};

/// Parses argv (argv[0] is the program name). Usage and error text go to
/// `out` / `err`; a returned command has passed flag validation.
ParseResult parse_args(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Executes a parsed command and maps failures to the documented exit codes.
int run_command(const Command& cmd, std::ostream& out, std::ostream& err);

int cli_main(int argc, const char* const* argv);

}  // namespace diffora
