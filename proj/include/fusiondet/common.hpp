#ifndef FUSIONDET_COMMON_HPP
#define FUSIONDET_COMMON_HPP

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace fusiondet {

using Index = Eigen::Index;

// Error taxonomy. The CLI maps these onto exit codes: usage errors are 1,
// everything below except NumericError is 2, NumericError is 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct ValidationError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct GenerationError : Error {
  using Error::Error;
};
struct UndefinedMetricError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

using Rng = std::mt19937_64;

// splitmix64 finalizer; decorrelates seed streams derived from one user seed.
inline std::uint64_t split_mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return split_mix(split_mix(a) ^ (0x9e3779b97f4a7c15ULL + (b << 1)));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return Rng(mix_seed(seed, stream));
}

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

// Level comes from FUSION_DETECT_LOG ({error, info, debug}); default info.
LogLevel log_level();
void log_line(LogLevel level, const std::string& msg);

inline void log_error(const std::string& msg) { log_line(LogLevel::kError, msg); }
inline void log_info(const std::string& msg) { log_line(LogLevel::kInfo, msg); }
inline void log_debug(const std::string& msg) { log_line(LogLevel::kDebug, msg); }

using LogSink = std::function<void(const std::string&)>;

}  // namespace fusiondet

#endif  // FUSIONDET_COMMON_HPP
