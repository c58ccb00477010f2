// SPDX-License-Identifier: Apache-2.0
#include "ada/kv.hpp"

#include <cstdio>
#include <fstream>

namespace ada {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": unterminated section header");
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected key = value, got '" + t + "'");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        if (!section.empty()) key = section + "." + key;
        if (kv.values_.count(key))
            throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" +
                              key + "'");
        kv.values_[key] = value;
    }
    return kv;
}

KeyValues KeyValues::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse(buffer.str());
}

std::string KeyValues::get_string(const std::string& key, const std::string& fallback) const {
    used_.insert(key);
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

std::string KeyValues::require_string(const std::string& key) const {
    used_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing required config key '" + key + "'");
    return it->second;
}

long long KeyValues::get_int(const std::string& key, long long fallback) const {
    used_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        std::size_t used = 0;
        const long long v = std::stoll(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + it->second + "' is not an integer");
    }
}

double KeyValues::get_double(const std::string& key, double fallback) const {
    used_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        std::size_t used = 0;
        const double v = std::stod(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + it->second + "' is not a number");
    }
}

bool KeyValues::get_bool(const std::string& key, bool fallback) const {
    used_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
    if (it->second == "false" || it->second == "0" || it->second == "no") return false;
    throw ConfigError("config key '" + key + "': '" + it->second + "' is not a boolean");
}

std::vector<std::string> KeyValues::get_list(const std::string& key) const {
    used_.insert(key);
    const auto it = values_.find(key);
    std::vector<std::string> out;
    if (it == values_.end()) return out;
    std::string cell;
    for (char c : it->second + ",") {
        if (c == ',') {
            const std::string t = trim(cell);
            if (!t.empty()) out.push_back(t);
            cell.clear();
        } else {
            cell.push_back(c);
        }
    }
    return out;
}

void KeyValues::set(const std::string& key, const std::string& value) { values_[key] = value; }

void KeyValues::set_int(const std::string& key, long long value) {
    values_[key] = std::to_string(value);
}

void KeyValues::set_double(const std::string& key, double value) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    values_[key] = buf;
}

std::vector<std::string> KeyValues::unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [key, value] : values_)
        if (!used_.count(key)) out.push_back(key);
    return out;
}

void KeyValues::ensure_all_used(const std::string& what) const {
    const auto leftover = unused_keys();
    if (leftover.empty()) return;
    std::string names;
    for (const auto& k : leftover) names += (names.empty() ? "" : ", ") + k;
    throw ConfigError(what + ": unknown key(s): " + names);
}

std::string KeyValues::serialize() const {
    // Group by section; keys without a dot go first.
    std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
    for (const auto& [key, value] : values_) {
        const std::size_t dotpos = key.find('.');
        if (dotpos == std::string::npos)
            sections[""].emplace_back(key, value);
        else
            sections[key.substr(0, dotpos)].emplace_back(key.substr(dotpos + 1), value);
    }
    std::ostringstream os;
    for (const auto& [section, pairs] : sections) {
        if (!section.empty()) os << "[" << section << "]\n";
        for (const auto& [key, value] : pairs) os << key << " = " << value << "\n";
        os << "\n";
    }
    return os.str();
}

}  // namespace ada
