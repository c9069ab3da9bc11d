#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

namespace regmerge {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

/// Runs the `regmerge` command line in-process. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// train ×2 → collect-stats → merge → eval through the command line, under
/// `workdir`. Returns the hashes of every produced file and the final score.
nlohmann::json run_golden_pipeline(const std::filesystem::path& workdir);

const char* version();

}  // namespace regmerge
