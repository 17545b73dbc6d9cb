// SPDX-License-Identifier: Apache-2.0
#include "audiotoolagent/cli.hpp"

int main(int argc, char** argv) { return ata::cli::run_cli(argc, argv); }
