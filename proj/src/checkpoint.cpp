#include "sapiens/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "sapiens/config.hpp"

namespace sapiens {

namespace {

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64(const std::string& in, size_t pos) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    return v;
}

}  // namespace

const Tensor* CheckpointData::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

void save_checkpoint(const std::string& path, const CheckpointData& data) {
    nlohmann::ordered_json header;
    header["version"] = 1;
    header["iter"] = data.iter;
    header["config_hash"] = data.config_hash;
    // decimal strings keep the full 64 bits out of JSON number territory
    auto rng = nlohmann::ordered_json::array();
    for (uint64_t w : data.rng_state) rng.push_back(std::to_string(w));
    header["rng"] = rng;
    header["teacher"] = data.has_teacher;
    header["opt_step"] = data.opt_step;
    auto table = nlohmann::ordered_json::array();
    int64_t offset = 0;  // in elements, from the payload start
    for (const auto& [name, t] : data.tensors) {
        nlohmann::ordered_json row;
        row["name"] = name;
        row["shape"] = t.shape;
        row["offset"] = offset;
        table.push_back(row);
        offset += t.numel();
    }
    header["tensors"] = table;
    const std::string hbytes = header.dump();

    std::string out;
    out.reserve(4 + 8 + hbytes.size() + 8 * static_cast<size_t>(offset));
    out += "SPCK";
    put_u64(out, hbytes.size());
    out += hbytes;
    for (const auto& [name, t] : data.tensors) {
        for (double v : t.data) {
            uint64_t bits;
            std::memcpy(&bits, &v, 8);
            put_u64(out, bits);
        }
    }

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        check(f.good(), "checkpoint: cannot open " + tmp + " for writing");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        f.flush();
        check(f.good(), "checkpoint: short write to " + tmp);
    }
    check(std::rename(tmp.c_str(), path.c_str()) == 0,
          "checkpoint: cannot move " + tmp + " into place");
}

CheckpointData load_checkpoint(const std::string& path, const std::string& expect_config_hash) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "checkpoint: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string bytes = ss.str();

    check(bytes.size() >= 12, "checkpoint: truncated file " + path);
    check(bytes.compare(0, 4, "SPCK") == 0, "checkpoint: bad magic in " + path);
    const uint64_t hlen = get_u64(bytes, 4);
    check(bytes.size() >= 12 + hlen, "checkpoint: truncated header in " + path);
    const nlohmann::json header = nlohmann::json::parse(bytes.substr(12, hlen));
    check(header.at("version").get<int>() == 1, "checkpoint: unsupported version in " + path);

    CheckpointData d;
    d.iter = header.at("iter").get<int64_t>();
    d.config_hash = header.at("config_hash").get<std::string>();
    if (!expect_config_hash.empty() && d.config_hash != expect_config_hash) {
        throw ConfigError("checkpoint: config hash mismatch, file " + path + " was written for " +
                          d.config_hash + " but the run resolves to " + expect_config_hash);
    }
    const auto& rng = header.at("rng");
    check(rng.size() == 4, "checkpoint: bad rng state in " + path);
    for (int i = 0; i < 4; ++i)
        d.rng_state[static_cast<size_t>(i)] = std::stoull(rng.at(i).get<std::string>());
    d.has_teacher = header.at("teacher").get<bool>();
    d.opt_step = header.at("opt_step").get<int64_t>();

    const size_t payload = 12 + hlen;
    for (const auto& row : header.at("tensors")) {
        const std::string name = row.at("name").get<std::string>();
        const std::vector<int> shape = row.at("shape").get<std::vector<int>>();
        const int64_t offset = row.at("offset").get<int64_t>();
        Tensor t(shape);
        const size_t start = payload + 8 * static_cast<size_t>(offset);
        check(bytes.size() >= start + 8 * static_cast<size_t>(t.numel()),
              "checkpoint: truncated payload in " + path);
        for (int64_t i = 0; i < t.numel(); ++i) {
            const uint64_t bits = get_u64(bytes, start + 8 * static_cast<size_t>(i));
            double v;
            std::memcpy(&v, &bits, 8);
            t.data[static_cast<size_t>(i)] = v;
        }
        d.tensors.emplace_back(name, std::move(t));
    }
    return d;
}

}  // namespace sapiens
