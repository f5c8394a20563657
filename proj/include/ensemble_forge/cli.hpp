#pragma once

#include <ostream>

namespace ensemble_forge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitBackend = 2;

/// The ensemble_forge command line. Subcommands: gen-candidates, train-dqn,
/// train-rm, eval, oracle, probe-table1, serve-stub. Returns 0 on success,
/// 1 for usage and configuration errors (usage text goes to err) and 2 when
/// a backend fails.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ensemble_forge::cli
