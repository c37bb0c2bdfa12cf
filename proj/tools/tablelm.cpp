// Copyright (c) 2026 The tablelm Authors
// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "tablelm/cli.hpp"

int main(int argc, char** argv) { return tablelm::cli::run(argc, argv, std::cout, std::cerr); }
