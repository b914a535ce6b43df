#pragma once

// Shared scalar aliases, error types, solve reports and logging.

#include <complex>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>

namespace direl {

inline constexpr const char* kVersion = "0.1.0";

using Complex = std::complex<double>;
using Rng = std::mt19937_64;

// Numerical failures (exit code 1 territory in the CLI).
struct pole_error : std::domain_error {
  using std::domain_error::domain_error;
};
struct singular_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct convergence_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct train_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Usage / IO failures (exit code 2 territory in the CLI).
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct checkpoint_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class SolveMethod { fixed_point, newton, power_iteration };

inline const char* to_string(SolveMethod m) {
  switch (m) {
    case SolveMethod::fixed_point: return "fixed_point";
    case SolveMethod::newton: return "newton";
    case SolveMethod::power_iteration: return "power_iteration";
  }
  return "?";
}

struct SolveReport {
  int iterations = 0;
  double residual = 0.0;
  bool converged = true;
  SolveMethod method = SolveMethod::fixed_point;

  // Batch aggregate: worst residual, most iterations, all-converged.
  void absorb(const SolveReport& other) {
    iterations = std::max(iterations, other.iterations);
    residual = std::max(residual, other.residual);
    converged = converged && other.converged;
    if (other.method == SolveMethod::newton) method = SolveMethod::newton;
  }
};

// Log verbosity from DIREL_LOG: quiet=0, warn=1 (default), info=2, debug=3.
inline int log_level() {
  static const int level = [] {
    const char* env = std::getenv("DIREL_LOG");
    if (!env) return 1;
    const std::string v(env);
    if (v == "quiet") return 0;
    if (v == "warn") return 1;
    if (v == "info") return 2;
    if (v == "debug") return 3;
    return 1;
  }();
  return level;
}

inline void log_warn(const std::string& msg) {
  if (log_level() >= 1) std::fprintf(stderr, "[direl] warning: %s\n", msg.c_str());
}
inline void log_info(const std::string& msg) {
  if (log_level() >= 2) std::fprintf(stderr, "[direl] %s\n", msg.c_str());
}
inline void log_debug(const std::string& msg) {
  if (log_level() >= 3) std::fprintf(stderr, "[direl] %s\n", msg.c_str());
}

}  // namespace direl
