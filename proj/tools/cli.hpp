#pragma once

// Command-line front end. `run` takes the arguments after the program name
// and returns the process exit code:
//   0 success, 2 input validation, 3 missing upstream artifact,
//   4 checkpoint/config compatibility, 1 anything else.

#include <exception>
#include <filesystem>
#include <string>
#include <vector>

namespace megalab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitMissing = 3;
inline constexpr int kExitCompatibility = 4;

[[nodiscard]] int run(const std::vector<std::string>& args);

[[nodiscard]] int exit_code(const std::exception& e);

// $MEGA_LAB_HOME, or ./megalab_home when unset.
[[nodiscard]] std::filesystem::path artifact_root();

}  // namespace megalab::cli
