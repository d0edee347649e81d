#pragma once

#include <ostream>

namespace metaturtle {

// Entry point of the `metaturtle` command (train, grid, verify, plot).
// Exit codes: 0 ok, 1 usage or configuration error, 2 failed run or check.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace metaturtle
