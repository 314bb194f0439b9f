#include "fusiondet/common.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace fusiondet {

LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("FUSION_DETECT_LOG");
    if (!env) return LogLevel::kInfo;
    if (std::strcmp(env, "error") == 0) return LogLevel::kError;
    if (std::strcmp(env, "debug") == 0) return LogLevel::kDebug;
    return LogLevel::kInfo;
  }();
  return level;
}

void log_line(LogLevel level, const std::string& msg) {
  if (static_cast<int>(level) > static_cast<int>(log_level())) return;
  std::FILE* stream = level == LogLevel::kError ? stderr : stdout;
  std::fputs(msg.c_str(), stream);
  std::fputc('\n', stream);
  std::fflush(stream);
}

}  // namespace fusiondet
