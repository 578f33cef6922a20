#pragma once

#include <vector>

#include "sapiens/tensor.hpp"

namespace sapiens {

// A set of token rows tied to a 2D patch grid. Dense grids hold one row per
// grid position in row-major order; sparse grids keep index_map to record each
// row's origin position.
struct TokenGrid {
    Tensor tokens;  // [rows, D]
    int grid_h = 0;
    int grid_w = 0;
    std::vector<int> index_map;  // empty for dense grids
    Tensor cls;                  // [D], empty when absent

    int positions() const { return grid_h * grid_w; }
    int rows() const { return tokens.ndim() == 2 ? tokens.rows() : 0; }
    bool dense() const { return index_map.empty(); }
    bool has_cls() const { return cls.numel() > 0; }
};

}  // namespace sapiens
