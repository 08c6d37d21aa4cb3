// SPDX-License-Identifier: Apache-2.0
#include <iostream>
#include <string>
#include <vector>

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "dreamcatcher/cli.hpp"

int main(int argc, char** argv) {
    auto logger = std::make_shared<spdlog::logger>("dreamcatcher", std::make_shared<spdlog::sinks::stderr_sink_mt>());
    spdlog::set_default_logger(logger);
    std::vector<std::string> args(argv + 1, argv + argc);
    return dreamcatcher::run_command(args, std::cout, std::cerr);
}
