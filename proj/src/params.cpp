#include "sapiens/params.hpp"

#include <cstring>

#include "sapiens/config.hpp"

namespace sapiens {

std::string ParamStore::fingerprint() const {
    std::string buf;
    for (const auto& name : order_) {
        const Tensor& t = map_.at(name);
        buf += name;
        buf += t.shape_str();
        const size_t off = buf.size();
        buf.resize(off + t.data.size() * sizeof(double));
        std::memcpy(buf.data() + off, t.data.data(), t.data.size() * sizeof(double));
    }
    return sha256_hex(buf.data(), buf.size());
}

std::string fingerprint_excluding(const ParamStore& store, const std::string& skip_prefix) {
    std::string buf;
    for (const auto& name : store.names()) {
        if (name.rfind(skip_prefix, 0) == 0) continue;
        const Tensor& t = store.at(name);
        buf += name;
        buf += t.shape_str();
        const size_t off = buf.size();
        buf.resize(off + t.data.size() * sizeof(double));
        std::memcpy(buf.data() + off, t.data.data(), t.data.size() * sizeof(double));
    }
    return sha256_hex(buf.data(), buf.size());
}

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Tensor& init_normal(ParamStore& store, const std::string& name, std::vector<int> shape,
                    double stddev, const Rng& root) {
    Rng rng = root.fork(fnv1a(name));
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.normal(0.0, stddev);
    return store.add(name, std::move(t));
}

Tensor& init_const(ParamStore& store, const std::string& name, std::vector<int> shape,
                   double value) {
    return store.add(name, Tensor(std::move(shape), value));
}

}  // namespace sapiens
