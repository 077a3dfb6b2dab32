// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "clickseg/cli/commands.hpp"

int main(int argc, char** argv) { return clickseg::run_cli(argc, argv); }
