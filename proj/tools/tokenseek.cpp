// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "tokenseek/cli.hpp"

int main(int argc, char** argv) { return tokenseek::cli::run(argc, argv, std::cout, std::cerr); }
