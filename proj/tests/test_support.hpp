#pragma once

#include <filesystem>
#include <string>

namespace clipin::test {

// Fresh empty directory under the build tree's scratch area.
std::filesystem::path scratch_dir(const std::string& name);

std::string read_file(const std::filesystem::path& path);

struct CommandResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr, interleaved
};
// Runs the clipin binary with the given argument string.
CommandResult run_cli(const std::string& args);

}  // namespace clipin::test
