#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bridgeseg/errors.hpp"

namespace bridgeseg {

// Flat key-value run configuration. File format: one `key = value` pair per
// line, '#' starts a comment, blank lines ignored. Keys are dotted paths
// (train.steps, loss.lambda_c). Typed getters mark keys as consumed;
// require_all_consumed() then rejects anything unrecognized, so a typo in a
// config file fails loudly instead of silently using a default.
class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig from_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError(path.string() + ": cannot open config file");
        std::stringstream ss;
        ss << in.rdbuf();
        return from_string(ss.str(), path.string());
    }

    static KeyValueConfig from_string(const std::string& text,
                                      const std::string& context = "<config>") {
        KeyValueConfig cfg;
        std::istringstream in(text);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            std::string stripped = strip(line.substr(0, line.find('#')));
            if (stripped.empty()) continue;
            std::size_t eq = stripped.find('=');
            if (eq == std::string::npos)
                throw ConfigError(context + ":" + std::to_string(line_no) +
                                  ": expected key = value, got '" + stripped + "'");
            std::string key = strip(stripped.substr(0, eq));
            std::string value = strip(stripped.substr(eq + 1));
            if (key.empty())
                throw ConfigError(context + ":" + std::to_string(line_no) + ": empty key");
            if (cfg.find(key))
                throw ConfigError(context + ":" + std::to_string(line_no) +
                                  ": duplicate key '" + key + "'");
            cfg.entries_.emplace_back(key, value);
        }
        return cfg;
    }

    // `--set key=value` overrides; replaces an existing key or appends.
    void set(const std::string& assignment) {
        std::size_t eq = assignment.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override '" + assignment + "' is not of the form key=value");
        set(strip(assignment.substr(0, eq)), strip(assignment.substr(eq + 1)));
    }

    void set(const std::string& key, const std::string& value) {
        if (key.empty()) throw ConfigError("override with empty key");
        for (auto& [k, v] : entries_)
            if (k == key) {
                v = value;
                return;
            }
        entries_.emplace_back(key, value);
    }

    bool has(const std::string& key) const { return find(key) != nullptr; }

    std::string get_string(const std::string& key, const std::string& dflt) const {
        const std::string* v = consume(key);
        return v ? *v : dflt;
    }

    double get_double(const std::string& key, double dflt) const {
        const std::string* v = consume(key);
        return v ? parse_double(key, *v) : dflt;
    }

    std::size_t get_count(const std::string& key, std::size_t dflt) const {
        const std::string* v = consume(key);
        return v ? parse_count(key, *v) : dflt;
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t dflt) const {
        const std::string* v = consume(key);
        return v ? parse_count(key, *v) : dflt;
    }

    bool get_bool(const std::string& key, bool dflt) const {
        const std::string* v = consume(key);
        if (!v) return dflt;
        if (*v == "true" || *v == "1") return true;
        if (*v == "false" || *v == "0") return false;
        throw ConfigError("key '" + key + "': expected true/false, got '" + *v + "'");
    }

    std::vector<double> get_double_list(const std::string& key,
                                        std::vector<double> dflt) const {
        const std::string* v = consume(key);
        if (!v) return dflt;
        std::vector<double> out;
        for (const std::string& piece : split_commas(*v))
            out.push_back(parse_double(key, piece));
        return out;
    }

    std::vector<std::size_t> get_count_list(const std::string& key,
                                            std::vector<std::size_t> dflt) const {
        const std::string* v = consume(key);
        if (!v) return dflt;
        std::vector<std::size_t> out;
        for (const std::string& piece : split_commas(*v))
            out.push_back(parse_count(key, piece));
        return out;
    }

    void require_all_consumed() const {
        std::vector<std::string> unknown;
        for (const auto& [k, v] : entries_)
            if (!consumed_.count(k)) unknown.push_back(k);
        if (!unknown.empty()) {
            std::string msg = "unknown config key(s):";
            for (const std::string& k : unknown) msg += " " + k;
            throw ConfigError(msg);
        }
    }

    const std::vector<std::pair<std::string, std::string>>& entries() const {
        return entries_;
    }

private:
    static std::string strip(const std::string& s) {
        std::size_t a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        std::size_t b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    static std::vector<std::string> split_commas(const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        std::istringstream in(s);
        while (std::getline(in, cur, ',')) out.push_back(strip(cur));
        return out;
    }

    static double parse_double(const std::string& key, const std::string& s) {
        try {
            std::size_t used = 0;
            double v = std::stod(s, &used);
            if (used != s.size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "': expected a number, got '" + s + "'");
        }
    }

    static std::uint64_t parse_count(const std::string& key, const std::string& s) {
        try {
            std::size_t used = 0;
            if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
            std::uint64_t v = std::stoull(s, &used);
            if (used != s.size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "': expected a non-negative integer, got '" +
                              s + "'");
        }
    }

    const std::string* find(const std::string& key) const {
        for (const auto& [k, v] : entries_)
            if (k == key) return &v;
        return nullptr;
    }

    const std::string* consume(const std::string& key) const {
        const std::string* v = find(key);
        if (v) consumed_.insert(key);
        return v;
    }

    std::vector<std::pair<std::string, std::string>> entries_;
    mutable std::set<std::string> consumed_;
};

} // namespace bridgeseg
