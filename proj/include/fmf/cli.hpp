#pragma once

#include <string>
#include <vector>

namespace fmf {

// Entry point shared by the fmf binary and the CLI tests.
int run_cli(const std::vector<std::string>& args);

}  // namespace fmf
