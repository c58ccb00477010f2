// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ada/error.hpp"

namespace ada {

/// Flat key-value text with INI-style sections. A key inside [model] is
/// addressed as "model.key". Lines starting with '#' and blank lines are
/// ignored. Typed getters record which keys were consumed so a caller can
/// reject unknown keys by name afterwards.
class KeyValues {
public:
    static KeyValues parse(const std::string& text);
    static KeyValues parse_file(const std::string& path);

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) const;
    std::string require_string(const std::string& key) const;
    long long get_int(const std::string& key, long long fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    /// Comma-separated list, whitespace trimmed.
    std::vector<std::string> get_list(const std::string& key) const;

    void set(const std::string& key, const std::string& value);
    void set_int(const std::string& key, long long value);
    void set_double(const std::string& key, double value);

    /// Keys present in the file but never read through a getter.
    std::vector<std::string> unused_keys() const;
    void ensure_all_used(const std::string& what) const;

    /// Deterministic text form: keys grouped by section, sorted.
    std::string serialize() const;

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
    mutable std::set<std::string> used_;
};

}  // namespace ada
