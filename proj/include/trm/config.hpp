#pragma once

// Flat key-value configuration files.
//
//   # comment
//   key = <value>
//
// A value is a JSON literal (number, string, true/false, possibly nested
// arrays) or a bare word, which is read as a string. One key per line; keys
// may not repeat. Errors carry "file:line:" context.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace trm {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Config {
public:
    struct Entry {
        nlohmann::json value;
        int line = 0;
    };

    Config() = default;

    static Config parse(const std::string& text, const std::string& source = "<string>") {
        Config cfg;
        cfg.source_ = source;
        std::istringstream in(text);
        std::string raw;
        int lineno = 0;
        while (std::getline(in, raw)) {
            ++lineno;
            std::string line = strip_comment(raw);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
            std::string key = trim(line.substr(0, eq));
            std::string val = trim(line.substr(eq + 1));
            if (key.empty() || !valid_key(key))
                throw ConfigError(source + ":" + std::to_string(lineno) + ": invalid key '" + key + "'");
            if (val.empty())
                throw ConfigError(source + ":" + std::to_string(lineno) + ": missing value for '" + key + "'");
            if (cfg.entries_.count(key))
                throw ConfigError(source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(val);
            } catch (const nlohmann::json::parse_error&) {
                if (!bare_word(val))
                    throw ConfigError(source + ":" + std::to_string(lineno) + ": malformed value for '" + key +
                                      "': " + val);
                j = val;
            }
            cfg.entries_[key] = Entry{std::move(j), lineno};
        }
        return cfg;
    }

    static Config load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError(path + ": cannot open config file");
        std::stringstream ss;
        ss << f.rdbuf();
        return parse(ss.str(), path);
    }

    const std::string& source() const { return source_; }
    bool has(const std::string& key) const { return entries_.count(key) > 0; }
    const std::map<std::string, Entry>& entries() const { return entries_; }

    void set(const std::string& key, nlohmann::json value) { entries_[key] = Entry{std::move(value), 0}; }

    void reject_unknown(const std::set<std::string>& allowed) const {
        for (const auto& [k, e] : entries_)
            if (!allowed.count(k)) throw ConfigError(where(k) + ": unknown key '" + k + "'");
    }

    void require(const std::string& key) const {
        if (!has(key)) throw ConfigError(source_ + ": missing required key '" + key + "'");
    }

    std::string where(const std::string& key) const {
        auto it = entries_.find(key);
        if (it == entries_.end() || it->second.line == 0) return source_;
        return source_ + ":" + std::to_string(it->second.line);
    }

    [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
        throw ConfigError(where(key) + ": '" + key + "' " + msg);
    }

    const nlohmann::json& raw(const std::string& key) const {
        require(key);
        return entries_.at(key).value;
    }

    double get_double(const std::string& key) const {
        const auto& j = raw(key);
        if (!j.is_number()) fail(key, "must be a number");
        return j.get<double>();
    }
    double get_double(const std::string& key, double dflt) const { return has(key) ? get_double(key) : dflt; }

    std::int64_t get_int(const std::string& key) const {
        const auto& j = raw(key);
        if (!j.is_number_integer()) fail(key, "must be an integer");
        return j.get<std::int64_t>();
    }
    std::int64_t get_int(const std::string& key, std::int64_t dflt) const { return has(key) ? get_int(key) : dflt; }

    bool get_bool(const std::string& key, bool dflt) const {
        if (!has(key)) return dflt;
        const auto& j = raw(key);
        if (!j.is_boolean()) fail(key, "must be true or false");
        return j.get<bool>();
    }

    std::string get_string(const std::string& key) const {
        const auto& j = raw(key);
        if (!j.is_string()) fail(key, "must be a string");
        return j.get<std::string>();
    }
    std::string get_string(const std::string& key, const std::string& dflt) const {
        return has(key) ? get_string(key) : dflt;
    }

    std::vector<double> get_doubles(const std::string& key) const {
        const auto& j = raw(key);
        if (j.is_number()) return {j.get<double>()};
        if (!j.is_array()) fail(key, "must be a number or an array of numbers");
        std::vector<double> out;
        for (const auto& v : j) {
            if (!v.is_number()) fail(key, "must contain only numbers");
            out.push_back(v.get<double>());
        }
        return out;
    }

    std::vector<std::vector<double>> get_matrix(const std::string& key) const {
        const auto& j = raw(key);
        if (!j.is_array()) fail(key, "must be an array");
        std::vector<std::vector<double>> out;
        for (const auto& row : j) {
            if (row.is_number()) {
                out.push_back({row.get<double>()});
                continue;
            }
            if (!row.is_array()) fail(key, "must be an array of numbers or of arrays");
            std::vector<double> r;
            for (const auto& v : row) {
                if (!v.is_number()) fail(key, "must contain only numbers");
                r.push_back(v.get<double>());
            }
            out.push_back(std::move(r));
        }
        return out;
    }

    /// Canonical text: sorted keys, compact JSON values. Hashing this gives the config hash.
    std::string canonical() const {
        std::string out;
        for (const auto& [k, e] : entries_) out += k + "=" + e.value.dump() + "\n";
        return out;
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    static std::string strip_comment(const std::string& s) {
        bool in_str = false;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) in_str = !in_str;
            if (s[i] == '#' && !in_str) return s.substr(0, i);
        }
        return s;
    }

    static bool valid_key(const std::string& k) {
        for (char c : k)
            if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.')) return false;
        return true;
    }

    static bool bare_word(const std::string& v) {
        for (char c : v)
            if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.' || c == '/'))
                return false;
        return true;
    }

    std::string source_ = "<string>";
    std::map<std::string, Entry> entries_;
};

/// 64-bit FNV-1a, used for config hashes in manifests.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    return s;
}

}  // namespace trm
