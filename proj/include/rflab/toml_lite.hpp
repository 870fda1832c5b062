#pragma once

#include <cctype>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "rflab/errors.hpp"

namespace rflab {

/// A deliberately small TOML subset, enough for flat experiment configs:
/// [section] and [a.b] headers, `key = value` pairs with string, integer,
/// float, boolean, and string-array values, and `#` comments. Keys are
/// exposed flattened as "section.key".
class TomlTable {
public:
    using Value = std::variant<std::string, long long, double, bool, std::vector<std::string>>;

    static TomlTable parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) {
            throw ConfigError("cannot open config file \"" + path + "\"");
        }
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return parse(text, path);
    }

    static TomlTable parse(std::string_view text, const std::string& path = "<config>") {
        TomlTable table;
        std::string prefix;
        std::size_t line_no = 0;
        std::size_t pos = 0;
        while (pos <= text.size()) {
            auto eol = text.find('\n', pos);
            std::string_view line = text.substr(pos, eol == std::string_view::npos ? std::string_view::npos
                                                                                   : eol - pos);
            pos = eol == std::string_view::npos ? text.size() + 1 : eol + 1;
            ++line_no;

            line = strip_comment(line);
            line = trim(line);
            if (line.empty()) continue;

            if (line.front() == '[') {
                if (line.back() != ']') {
                    throw ParseError(path, line_no, "unterminated section header");
                }
                prefix = std::string(trim(line.substr(1, line.size() - 2)));
                if (prefix.empty()) {
                    throw ParseError(path, line_no, "empty section name");
                }
                continue;
            }

            auto eq = line.find('=');
            if (eq == std::string_view::npos) {
                throw ParseError(path, line_no, "expected key = value");
            }
            std::string key(trim(line.substr(0, eq)));
            if (key.empty()) {
                throw ParseError(path, line_no, "empty key");
            }
            if (!prefix.empty()) {
                key = prefix + "." + key;
            }
            if (table.values_.count(key)) {
                throw ParseError(path, line_no, "duplicate key \"" + key + "\"");
            }
            table.values_.emplace(std::move(key),
                                  parse_value(trim(line.substr(eq + 1)), path, line_no));
        }
        return table;
    }

    bool contains(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_string(const std::string& key, const std::string& fallback = {}) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (const auto* s = std::get_if<std::string>(&it->second)) return *s;
        throw ConfigError("config key \"" + key + "\" is not a string");
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (const auto* d = std::get_if<double>(&it->second)) return *d;
        if (const auto* i = std::get_if<long long>(&it->second)) return static_cast<double>(*i);
        throw ConfigError("config key \"" + key + "\" is not a number");
    }

    long long get_int(const std::string& key, long long fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (const auto* i = std::get_if<long long>(&it->second)) return *i;
        throw ConfigError("config key \"" + key + "\" is not an integer");
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (const auto* b = std::get_if<bool>(&it->second)) return *b;
        throw ConfigError("config key \"" + key + "\" is not a boolean");
    }

    std::vector<std::string> get_string_array(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) return {};
        if (const auto* v = std::get_if<std::vector<std::string>>(&it->second)) return *v;
        throw ConfigError("config key \"" + key + "\" is not a string array");
    }

    const std::map<std::string, Value>& values() const { return values_; }

private:
    static std::string_view trim(std::string_view s) {
        while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
        while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
        return s;
    }

    static std::string_view strip_comment(std::string_view line) {
        bool in_string = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') in_string = !in_string;
            if (line[i] == '#' && !in_string) return line.substr(0, i);
        }
        return line;
    }

    static std::string parse_quoted(std::string_view raw, const std::string& path,
                                    std::size_t line_no) {
        if (raw.size() < 2 || raw.back() != '"') {
            throw ParseError(path, line_no, "unterminated string");
        }
        std::string out;
        for (std::size_t i = 1; i + 1 < raw.size(); ++i) {
            if (raw[i] == '\\' && i + 2 < raw.size()) {
                ++i;
                switch (raw[i]) {
                    case 'n': out.push_back('\n'); break;
                    case 't': out.push_back('\t'); break;
                    case '"': out.push_back('"'); break;
                    case '\\': out.push_back('\\'); break;
                    default:
                        throw ParseError(path, line_no,
                                         std::string("unsupported escape \\") + raw[i]);
                }
            } else {
                out.push_back(raw[i]);
            }
        }
        return out;
    }

    static Value parse_value(std::string_view raw, const std::string& path, std::size_t line_no) {
        if (raw.empty()) {
            throw ParseError(path, line_no, "empty value");
        }
        if (raw.front() == '"') {
            return parse_quoted(raw, path, line_no);
        }
        if (raw.front() == '[') {
            if (raw.back() != ']') {
                throw ParseError(path, line_no, "unterminated array");
            }
            std::vector<std::string> items;
            std::string_view body = trim(raw.substr(1, raw.size() - 2));
            while (!body.empty()) {
                auto comma = find_toplevel_comma(body);
                std::string_view item = trim(body.substr(0, comma));
                if (item.empty() || item.front() != '"') {
                    throw ParseError(path, line_no, "arrays may only hold strings");
                }
                items.push_back(parse_quoted(item, path, line_no));
                if (comma == std::string_view::npos) break;
                body = trim(body.substr(comma + 1));
            }
            return items;
        }
        if (raw == "true") return true;
        if (raw == "false") return false;
        std::string token(raw);
        if (token.find('.') == std::string::npos && token.find('e') == std::string::npos &&
            token.find('E') == std::string::npos) {
            try {
                std::size_t used = 0;
                long long value = std::stoll(token, &used);
                if (used == token.size()) return value;
            } catch (const std::exception&) {
            }
        }
        try {
            std::size_t used = 0;
            double value = std::stod(token, &used);
            if (used == token.size()) return value;
        } catch (const std::exception&) {
        }
        throw ParseError(path, line_no, "cannot parse value \"" + token + "\"");
    }

    static std::size_t find_toplevel_comma(std::string_view body) {
        bool in_string = false;
        for (std::size_t i = 0; i < body.size(); ++i) {
            if (body[i] == '"' && (i == 0 || body[i - 1] != '\\')) in_string = !in_string;
            if (body[i] == ',' && !in_string) return i;
        }
        return std::string_view::npos;
    }

    std::map<std::string, Value> values_;
};

}  // namespace rflab
