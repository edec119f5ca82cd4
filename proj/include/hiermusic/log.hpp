#pragma once

#include <functional>
#include <iostream>
#include <string>

namespace hiermusic {

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

/// Process-wide diagnostic sink. Library code reports lossy or recoverable
/// situations here instead of failing.
struct Log {
  static LogLevel& level() {
    static LogLevel lvl = LogLevel::warn;
    return lvl;
  }
  static std::function<void(LogLevel, const std::string&)>& sink() {
    static std::function<void(LogLevel, const std::string&)> s = [](LogLevel l, const std::string& m) {
      static const char* names[] = {"debug", "info", "warn", "error"};
      std::cerr << "[hiermusic " << names[static_cast<int>(l)] << "] " << m << '\n';
    };
    return s;
  }
  static void write(LogLevel l, const std::string& msg) {
    if (l >= level() && sink()) sink()(l, msg);
  }
};

inline void log_debug(const std::string& m) { Log::write(LogLevel::debug, m); }
inline void log_info(const std::string& m) { Log::write(LogLevel::info, m); }
inline void log_warn(const std::string& m) { Log::write(LogLevel::warn, m); }

}  // namespace hiermusic
