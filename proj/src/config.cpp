#include "sdg/config.hpp"

#include <fstream>
#include <sstream>

namespace sdg {

namespace {
std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}
} // namespace

Config Config::from_file(const std::string& path) {
    std::ifstream f(path);
    validate(f.good(), "config: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return from_string(ss.str());
}

Config Config::from_string(const std::string& text) {
    Config cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string s = trim(line);
        if (s.empty() || s[0] == '#') continue;
        size_t eq = s.find('=');
        validate(eq != std::string::npos, "config: line " + std::to_string(lineno) + " is not key=value: " + s);
        std::string key = trim(s.substr(0, eq));
        std::string val = trim(s.substr(eq + 1));
        validate(!key.empty(), "config: empty key at line " + std::to_string(lineno));
        validate(cfg.kv_.count(key) == 0, "config: duplicate key '" + key + "'");
        cfg.kv_[key] = val;
    }
    return cfg;
}

std::string Config::get_str(const std::string& key, const std::string& dflt) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? dflt : it->second;
}

int64_t Config::get_int(const std::string& key, int64_t dflt) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    try {
        size_t pos = 0;
        int64_t v = std::stoll(it->second, &pos);
        validate(pos == it->second.size(), "config: '" + key + "' is not an integer: " + it->second);
        return v;
    } catch (const std::invalid_argument&) {
        throw ValidationError("config: '" + key + "' is not an integer: " + it->second);
    }
}

double Config::get_double(const std::string& key, double dflt) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    try {
        size_t pos = 0;
        double v = std::stod(it->second, &pos);
        validate(pos == it->second.size(), "config: '" + key + "' is not a number: " + it->second);
        return v;
    } catch (const std::invalid_argument&) {
        throw ValidationError("config: '" + key + "' is not a number: " + it->second);
    }
}

bool Config::get_bool(const std::string& key, bool dflt) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ValidationError("config: '" + key + "' is not a boolean: " + v);
}

void Config::check_known_keys(const std::set<std::string>& known) const {
    for (const auto& [k, v] : kv_) {
        validate(known.count(k) != 0, "config: unknown key '" + k + "'");
    }
}

std::string Config::to_string() const {
    std::string out;
    for (const auto& [k, v] : kv_) out += k + "=" + v + "\n";
    return out;
}

void Config::save(const std::string& path) const {
    std::ofstream f(path);
    require(f.good(), "config: cannot write " + path);
    f << to_string();
}

} // namespace sdg
