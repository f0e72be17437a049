// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#include "sadq/cli.hpp"

int main(int argc, char** argv) { return sadq::run_cli(argc, argv); }
