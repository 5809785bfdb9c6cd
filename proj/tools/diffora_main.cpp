// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "diffora/cli.hpp"

int main(int argc, char** argv) { return diffora::cli_main(argc, argv); }
