// SPDX-License-Identifier: Apache-2.0

#include <condnet/cli.hpp>

#include <iostream>

int main(int argc, char **argv) { return condnet::run_cli(argc, argv, std::cout, std::cerr); }
