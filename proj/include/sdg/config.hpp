#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "sdg/common.hpp"

namespace sdg {

// Flat key=value configuration. '#' starts a comment; blank lines ignored.
// Consumers declare their known keys; unknown keys are hard errors so typos
// never silently fall back to defaults.
class Config {
public:
    Config() = default;

    static Config from_file(const std::string& path);
    static Config from_string(const std::string& text);

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& dflt) const;
    int64_t get_int(const std::string& key, int64_t dflt) const;
    double get_double(const std::string& key, double dflt) const;
    bool get_bool(const std::string& key, bool dflt) const;

    // Throws ValidationError when a key outside `known` is present.
    void check_known_keys(const std::set<std::string>& known) const;

    // Serialization is sorted by key: diff-able and stable.
    std::string to_string() const;
    void save(const std::string& path) const;

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

} // namespace sdg
