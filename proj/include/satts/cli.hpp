#pragma once

#include <string>
#include <vector>

namespace satts::cli {

// Command-line front end. Every command is a pure function of its resolved
// configuration and input file hashes; a manifest.jsonl line per run records
// both so outputs stay auditable. Exposed as a function so tests can drive
// the binary in process.
//
// Exit codes: 0 ok, 2 validation/usage, 3 numeric failure, 4 file/format.
int run(const std::vector<std::string>& args);
int run(int argc, const char* const* argv);

}  // namespace satts::cli
