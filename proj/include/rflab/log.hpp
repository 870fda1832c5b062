#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <utility>

namespace rflab {

enum class LogLevel { Debug, Info, Warn, Error };

using LogHandler = std::function<void(LogLevel, const std::string&)>;

namespace detail {

inline std::mutex& log_mutex() {
    static std::mutex m;
    return m;
}

inline LogHandler& log_handler() {
    static LogHandler handler = [](LogLevel level, const std::string& msg) {
        const char* tag = "info";
        switch (level) {
            case LogLevel::Debug: tag = "debug"; break;
            case LogLevel::Info: tag = "info"; break;
            case LogLevel::Warn: tag = "warn"; break;
            case LogLevel::Error: tag = "error"; break;
        }
        std::cerr << "[" << tag << "] " << msg << "\n";
    };
    return handler;
}

}  // namespace detail

/// Replace the process-wide log sink. Pass nullptr to silence all output.
/// Tests install a capturing handler; the CLI keeps the stderr default.
inline void set_log_handler(LogHandler handler) {
    std::lock_guard<std::mutex> lock(detail::log_mutex());
    detail::log_handler() = std::move(handler);
}

inline void log_message(LogLevel level, const std::string& msg) {
    std::lock_guard<std::mutex> lock(detail::log_mutex());
    if (auto& handler = detail::log_handler()) {
        handler(level, msg);
    }
}

inline void log_warn(const std::string& msg) { log_message(LogLevel::Warn, msg); }
inline void log_info(const std::string& msg) { log_message(LogLevel::Info, msg); }
inline void log_error(const std::string& msg) { log_message(LogLevel::Error, msg); }

}  // namespace rflab
