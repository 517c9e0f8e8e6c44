#pragma once

#include <iosfwd>

namespace unifuse {

/// Exit codes of run_cli.
enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitIo = 2, kExitNumeric = 3 };

/// Entry point of the `unifuse` command. Commands: gen-corpus,
/// pretrain-decoder, train, eval, decode, sweep-noise. Progress goes to `err`,
/// machine-readable output to files under --out (and decode results to `out`).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace unifuse
