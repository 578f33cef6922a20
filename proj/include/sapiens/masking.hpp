#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sapiens/rng.hpp"
#include "sapiens/token_grid.hpp"

namespace sapiens {

struct MaskSpec {
    double ratio = 0.75;
    double blockwise_prob = 0.4;
    int block_side_min = 2;
    int block_side_max = 8;
};

struct Mask {
    std::vector<uint8_t> bits;  // 1 = masked
    int grid_h = 0;
    int grid_w = 0;

    int popcount() const {
        int n = 0;
        for (uint8_t b : bits) n += b;
        return n;
    }
    int size() const { return static_cast<int>(bits.size()); }
};

// Exactly floor(ratio * N) bits are set. With probability blockwise_prob the
// mask is grown from random rectangles and trimmed down; otherwise bits are
// placed uniformly.
Mask sample_mask(int grid_h, int grid_w, const MaskSpec& spec, Rng& rng);

TokenGrid gather_visible(const TokenGrid& grid, const Mask& mask);
TokenGrid scatter_with_mask_tokens(const TokenGrid& z_vis, const Mask& mask,
                                   const Tensor& mask_token, const Tensor& pos_table);

// Compact text fixture form: "HxW:n0,n1,n2,..." with alternating run lengths,
// first run counting zeros.
std::string mask_to_rle(const Mask& mask);
Mask mask_from_rle(const std::string& text);

// Number of 4-connected components among set bits.
int mask_components4(const Mask& mask);

}  // namespace sapiens
