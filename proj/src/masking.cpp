#include "sapiens/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace sapiens {

Mask sample_mask(int grid_h, int grid_w, const MaskSpec& spec, Rng& rng) {
    check(grid_h > 0 && grid_w > 0, "sample_mask: empty grid");
    check(spec.ratio >= 0.0 && spec.ratio < 1.0, "sample_mask: ratio must be in [0,1)");
    check(spec.block_side_min >= 1 && spec.block_side_max >= spec.block_side_min,
          "sample_mask: bad block side range");
    const int n = grid_h * grid_w;
    const int target = static_cast<int>(std::floor(spec.ratio * n));
    Mask m{std::vector<uint8_t>(static_cast<size_t>(n), 0), grid_h, grid_w};
    if (spec.ratio == 0.0) return m;
    check(target >= 1, "sample_mask: ratio * N below one token");

    if (rng.bernoulli(spec.blockwise_prob)) {
        int set = 0;
        while (set < target) {
            const int bh = std::min(
                grid_h, spec.block_side_min +
                            rng.uniform_int(spec.block_side_max - spec.block_side_min + 1));
            const int bw = std::min(
                grid_w, spec.block_side_min +
                            rng.uniform_int(spec.block_side_max - spec.block_side_min + 1));
            const int y0 = rng.uniform_int(grid_h - bh + 1);
            const int x0 = rng.uniform_int(grid_w - bw + 1);
            for (int y = y0; y < y0 + bh; ++y) {
                for (int x = x0; x < x0 + bw; ++x) {
                    uint8_t& b = m.bits[static_cast<size_t>(y) * grid_w + x];
                    if (!b) {
                        b = 1;
                        ++set;
                    }
                }
            }
        }
        if (set > target) {
            std::vector<int> on;
            on.reserve(static_cast<size_t>(set));
            for (int i = 0; i < n; ++i) {
                if (m.bits[static_cast<size_t>(i)]) on.push_back(i);
            }
            // partial Fisher-Yates picks the bits to clear
            for (int i = 0; i < set - target; ++i) {
                const int j = i + rng.uniform_int(static_cast<int>(on.size()) - i);
                std::swap(on[static_cast<size_t>(i)], on[static_cast<size_t>(j)]);
                m.bits[static_cast<size_t>(on[static_cast<size_t>(i)])] = 0;
            }
        }
    } else {
        std::vector<int> idx(static_cast<size_t>(n));
        std::iota(idx.begin(), idx.end(), 0);
        for (int i = 0; i < target; ++i) {
            const int j = i + rng.uniform_int(n - i);
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
            m.bits[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
        }
    }
    return m;
}

TokenGrid gather_visible(const TokenGrid& grid, const Mask& mask) {
    check(grid.dense(), "gather_visible: input must be dense");
    check(grid.grid_h == mask.grid_h && grid.grid_w == mask.grid_w,
          "gather_visible: geometry mismatch");
    check(grid.rows() == mask.size(), "gather_visible: row count mismatch");
    const int d = grid.tokens.cols();
    TokenGrid out;
    out.grid_h = grid.grid_h;
    out.grid_w = grid.grid_w;
    const int vis = mask.size() - mask.popcount();
    out.tokens = Tensor({vis, d});
    out.index_map.reserve(static_cast<size_t>(vis));
    int r = 0;
    for (int p = 0; p < mask.size(); ++p) {
        if (mask.bits[static_cast<size_t>(p)]) continue;
        for (int j = 0; j < d; ++j) out.tokens.at2(r, j) = grid.tokens.at2(p, j);
        out.index_map.push_back(p);
        ++r;
    }
    return out;
}

TokenGrid scatter_with_mask_tokens(const TokenGrid& z_vis, const Mask& mask,
                                   const Tensor& mask_token, const Tensor& pos_table) {
    const int n = mask.size();
    const int d = static_cast<int>(mask_token.numel());
    check(z_vis.rows() == n - mask.popcount(), "scatter: visible row count mismatch");
    check(z_vis.tokens.ndim() == 2 && z_vis.tokens.cols() == d, "scatter: width mismatch");
    check(pos_table.ndim() == 2 && pos_table.rows() == n && pos_table.cols() == d,
          "scatter: pos table must be [N,D]");
    TokenGrid out;
    out.grid_h = mask.grid_h;
    out.grid_w = mask.grid_w;
    out.tokens = Tensor({n, d});
    int r = 0;
    for (int p = 0; p < n; ++p) {
        if (mask.bits[static_cast<size_t>(p)]) {
            for (int j = 0; j < d; ++j) out.tokens.at2(p, j) = mask_token[j] + pos_table.at2(p, j);
        } else {
            for (int j = 0; j < d; ++j) out.tokens.at2(p, j) = z_vis.tokens.at2(r, j);
            ++r;
        }
    }
    return out;
}

std::string mask_to_rle(const Mask& mask) {
    std::ostringstream out;
    out << mask.grid_h << "x" << mask.grid_w << ":";
    uint8_t cur = 0;
    int run = 0;
    bool first = true;
    for (int i = 0; i < mask.size(); ++i) {
        if (mask.bits[static_cast<size_t>(i)] == cur) {
            ++run;
        } else {
            if (!first) out << ",";
            out << run;
            first = false;
            cur = mask.bits[static_cast<size_t>(i)];
            run = 1;
        }
    }
    if (!first) out << ",";
    out << run;
    return out.str();
}

Mask mask_from_rle(const std::string& text) {
    std::istringstream in(text);
    int h = 0, w = 0;
    char sep = 0;
    in >> h >> sep >> w;
    check(in.good() && sep == 'x' && h > 0 && w > 0, "mask rle: bad header");
    in >> sep;
    check(sep == ':', "mask rle: missing colon");
    Mask m{std::vector<uint8_t>(static_cast<size_t>(h) * w, 0), h, w};
    uint8_t cur = 0;
    int pos = 0;
    int run = 0;
    while (in >> run) {
        check(run >= 0 && pos + run <= m.size(), "mask rle: runs exceed grid");
        for (int i = 0; i < run; ++i) m.bits[static_cast<size_t>(pos++)] = cur;
        cur = 1 - cur;
        if (in.peek() == ',') in.get();
    }
    check(pos == m.size(), "mask rle: runs do not cover grid");
    return m;
}

int mask_components4(const Mask& mask) {
    const int h = mask.grid_h, w = mask.grid_w;
    std::vector<uint8_t> seen(mask.bits.size(), 0);
    std::vector<int> stack;
    int comps = 0;
    for (int start = 0; start < mask.size(); ++start) {
        if (!mask.bits[static_cast<size_t>(start)] || seen[static_cast<size_t>(start)]) continue;
        ++comps;
        stack.assign(1, start);
        seen[static_cast<size_t>(start)] = 1;
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            const int y = p / w, x = p % w;
            const int nb[4] = {y > 0 ? p - w : -1, y + 1 < h ? p + w : -1, x > 0 ? p - 1 : -1,
                               x + 1 < w ? p + 1 : -1};
            for (int q : nb) {
                if (q < 0 || seen[static_cast<size_t>(q)] || !mask.bits[static_cast<size_t>(q)]) {
                    continue;
                }
                seen[static_cast<size_t>(q)] = 1;
                stack.push_back(q);
            }
        }
    }
    return comps;
}

}  // namespace sapiens
