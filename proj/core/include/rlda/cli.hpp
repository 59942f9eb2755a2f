#pragma once

namespace rlda {

// Entry point behind the rlda binary; returns the process exit code
// (0 ok, 2 config/usage error, 3 numeric failure).
int cli_main(int argc, const char* const* argv);

}  // namespace rlda
