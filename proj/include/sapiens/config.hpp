#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace sapiens {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Flat key-value store behind the text config format. Files use INI-style
// sections; a key inside [optimizer] is addressed as "optimizer.lr". Keys are
// tracked on read so unknown keys can be rejected before any compute starts.
class ConfigMap {
public:
    static ConfigMap parse_string(const std::string& text);
    static ConfigMap parse_file(const std::string& path);

    void set(const std::string& key, const std::string& value);
    // "key=value" form used by --set overrides
    void set_kv(const std::string& assignment);

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& fallback) const;
    double get_real(const std::string& key, double fallback) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::string require_str(const std::string& key) const;

    // Keys present in the store but never read through a getter.
    std::vector<std::string> unused_keys() const;
    void reject_unused() const;

    // Canonical text form: sections alphabetized, keys sorted within each.
    std::string serialize() const;

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
    mutable std::set<std::string> used_;
};

std::string sha256_hex(const void* data, size_t n);
std::string sha256_hex(const std::string& s);

// shortest decimal form that parses back to the same double
std::string format_real(double v);

}  // namespace sapiens
