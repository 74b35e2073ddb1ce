#pragma once

namespace contourseg {

// Parses argv and runs one toolkit command. Returns the process exit code:
// 0 success, 2 usage error, 3 data error, 4 numeric error, 5 internal error.
// Errors are reported as a single JSON line on stderr.
int cli_run(int argc, const char* const* argv);

}  // namespace contourseg
