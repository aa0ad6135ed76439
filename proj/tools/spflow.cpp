// SPDX-License-Identifier: Apache-2.0
#include <spflow/cli.hpp>

int main(int argc, char** argv) { return spflow::cli::run(argc, argv); }
