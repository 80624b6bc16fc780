// Command-line front end. Exit codes: 0 ok, 2 bad arguments or inputs,
// 3 I/O or format failures, 4 non-finite training numerics, 5 solver
// failures.
#pragma once

namespace tivode {

int run_cli(int argc, const char* const* argv);

}  // namespace tivode
