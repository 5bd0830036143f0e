#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace etchvm {

/// Exit codes: 0 success, 1 threshold/assertion failure, 2 usage or config error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Entry point shared by the `etchvm` binary and the tests. args[0] is the
/// program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

const char* version_string();

/// FNV-1a over relative paths and file contents under `root`, in sorted
/// order. run_manifest.json files are skipped since they carry timestamps.
std::uint64_t tree_checksum(const std::filesystem::path& root);

}  // namespace etchvm
