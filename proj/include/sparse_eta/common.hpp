#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sparse_eta {

// Half-hour slots per day.
inline constexpr int kTimeSteps = 48;
inline constexpr int kSecondsPerStep = 1800;
inline constexpr int kSecondsPerDay = 86400;

inline constexpr double kKphToMps = 1000.0 / 3600.0;

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NoNodeInRange : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NoPathError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TapeConsumedError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NonFiniteLossError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Time step of a unix timestamp, by local time-of-day.
inline int time_step_of(double unix_ts) {
    double tod = unix_ts - static_cast<int64_t>(unix_ts / kSecondsPerDay) * static_cast<double>(kSecondsPerDay);
    if (tod < 0) tod += kSecondsPerDay;
    int ts = static_cast<int>(tod / kSecondsPerStep);
    return ts < 0 ? 0 : (ts >= kTimeSteps ? kTimeSteps - 1 : ts);
}

// 0 = Monday .. 6 = Sunday. Unix epoch fell on a Thursday.
inline int day_of_week_of(double unix_ts) {
    int64_t days = static_cast<int64_t>(unix_ts) / kSecondsPerDay;
    return static_cast<int>((days + 3) % 7);
}

enum class LogLevel { Debug = 0, Info = 1, Warn = 2, Error = 3, Off = 4 };

LogLevel log_level();
void set_log_level(LogLevel lvl);
void log_line(LogLevel lvl, const std::string& msg);

inline void log_debug(const std::string& m) { log_line(LogLevel::Debug, m); }
inline void log_info(const std::string& m) { log_line(LogLevel::Info, m); }
inline void log_warn(const std::string& m) { log_line(LogLevel::Warn, m); }
inline void log_error(const std::string& m) { log_line(LogLevel::Error, m); }

} // namespace sparse_eta
