#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>

namespace trm {

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

/// Process-wide diagnostics sink. Defaults to stderr at warn level.
class Log {
public:
    using Sink = std::function<void(LogLevel, const std::string&)>;

    static Log& instance() {
        static Log log;
        return log;
    }

    void set_level(LogLevel lvl) { level_ = lvl; }
    LogLevel level() const { return level_; }
    void set_sink(Sink s) {
        std::lock_guard<std::mutex> lk(mu_);
        sink_ = std::move(s);
    }

    void write(LogLevel lvl, const std::string& msg) {
        if (lvl < level_) return;
        std::lock_guard<std::mutex> lk(mu_);
        if (sink_) {
            sink_(lvl, msg);
            return;
        }
        static const char* names[] = {"debug", "info", "warn", "error"};
        std::cerr << "[trm " << names[static_cast<int>(lvl)] << "] " << msg << '\n';
    }

private:
    LogLevel level_ = LogLevel::warn;
    Sink sink_;
    std::mutex mu_;
};

inline void log_info(const std::string& m) { Log::instance().write(LogLevel::info, m); }
inline void log_warn(const std::string& m) { Log::instance().write(LogLevel::warn, m); }
inline void log_debug(const std::string& m) { Log::instance().write(LogLevel::debug, m); }

}  // namespace trm
