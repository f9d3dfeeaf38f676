// Copyright Contributors to the cosplat project
// SPDX-License-Identifier: Apache-2.0

#include "cosplat/scene.hpp"

#include <cstdio>

int main() {
    std::puts("cosplat: subcommands not wired yet");
    return 2;
}
