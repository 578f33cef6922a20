#include "sapiens/config.hpp"

#include <openssl/evp.h>

#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace sapiens {

namespace {
std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}
}  // namespace

ConfigMap ConfigMap::parse_string(const std::string& text) {
    ConfigMap m;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": unterminated section header");
            }
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        }
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
            value = value.substr(1, value.size() - 2);
        }
        if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
        m.kv_[key] = value;
    }
    return m;
}

ConfigMap ConfigMap::parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_string(ss.str());
}

void ConfigMap::set(const std::string& key, const std::string& value) { kv_[key] = value; }

void ConfigMap::set_kv(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override must look like key=value, got: " + assignment);
    }
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string ConfigMap::get_str(const std::string& key, const std::string& fallback) const {
    used_.insert(key);
    const auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
}

double ConfigMap::get_real(const std::string& key, double fallback) const {
    used_.insert(key);
    const auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        size_t pos = 0;
        const double v = std::stod(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not a real number: " + it->second);
    }
}

int64_t ConfigMap::get_int(const std::string& key, int64_t fallback) const {
    used_.insert(key);
    const auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        size_t pos = 0;
        const int64_t v = std::stoll(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not an integer: " + it->second);
    }
}

bool ConfigMap::get_bool(const std::string& key, bool fallback) const {
    used_.insert(key);
    const auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key " + key + ": not a boolean: " + v);
}

std::string ConfigMap::require_str(const std::string& key) const {
    used_.insert(key);
    const auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("missing required config key: " + key);
    return it->second;
}

std::vector<std::string> ConfigMap::unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : kv_) {
        if (!used_.count(k)) out.push_back(k);
    }
    return out;
}

void ConfigMap::reject_unused() const {
    const auto bad = unused_keys();
    if (bad.empty()) return;
    std::string msg = "unknown config keys:";
    for (const auto& k : bad) msg += " " + k;
    throw ConfigError(msg);
}

std::string ConfigMap::serialize() const {
    // Sectionless keys first so they never fall under a section header on
    // re-parse; std::map ordering then groups dotted keys by section.
    std::ostringstream out;
    bool any = false;
    for (const auto& [k, v] : kv_) {
        if (k.find('.') != std::string::npos) continue;
        out << k << " = " << v << "\n";
        any = true;
    }
    std::string section;
    for (const auto& [k, v] : kv_) {
        const auto dot = k.find('.');
        if (dot == std::string::npos) continue;
        const std::string sec = k.substr(0, dot);
        const std::string leaf = k.substr(dot + 1);
        if (sec != section) {
            if (any) out << "\n";
            out << "[" << sec << "]\n";
            section = sec;
        }
        // a leaf with its own dot stays fully qualified, which re-parses as-is
        if (leaf.find('.') != std::string::npos) {
            out << k << " = " << v << "\n";
        } else {
            out << leaf << " = " << v << "\n";
        }
        any = true;
    }
    return out.str();
}

std::string sha256_hex(const void* data, size_t n) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data, n, md, &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("sha256 digest failed");
    }
    std::string hex(static_cast<size_t>(len) * 2, '0');
    static const char* digits = "0123456789abcdef";
    for (unsigned int i = 0; i < len; ++i) {
        hex[2 * i] = digits[md[i] >> 4];
        hex[2 * i + 1] = digits[md[i] & 0xf];
    }
    return hex;
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string format_real(double v) {
    char buf[64];
    for (int prec = 15; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

}  // namespace sapiens
