// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <span>
#include <string>

namespace dreamcatcher {

enum ExitCode : int { kExitOk = 0, kExitValidation = 1, kExitIoOrConfig = 2 };

/// `dreamcatcher <subcommand> --config <path> [--jobs N] [--seed S]`.
/// `args` excludes the program name. Subcommands: validate, embed,
/// probe-train, probe-eval, score, label, rm-train, rm-eval, ppo, synth,
/// report. Every output goes under the config's output directory (synth
/// writes a corpus directory instead).
int run_command(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace dreamcatcher
