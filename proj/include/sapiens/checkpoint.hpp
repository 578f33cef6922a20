#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sapiens/tensor.hpp"

namespace sapiens {

// Bit-exact named tensor container: "SPCK", a little-endian u64 header
// length, a JSON table of contents, then raw little-endian float64 payloads
// in table order. Saves write a temp file and rename it into place.
struct CheckpointData {
    int64_t iter = 0;
    std::string config_hash;
    std::array<uint64_t, 4> rng_state{0, 0, 0, 0};
    bool has_teacher = false;
    int64_t opt_step = 0;
    std::vector<std::pair<std::string, Tensor>> tensors;  // insertion order

    const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const CheckpointData& data);

// A nonempty expect_config_hash makes loading refuse checkpoints written
// under a different run config.
CheckpointData load_checkpoint(const std::string& path,
                               const std::string& expect_config_hash = "");

}  // namespace sapiens
