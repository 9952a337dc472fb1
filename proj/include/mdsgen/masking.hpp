#pragma once

#include <vector>

#include "mdsgen/ops.hpp"

namespace mds {

struct TokenGrid {
    int rows = 0;  // freq-axis token count (F/p)
    int cols = 0;  // time-axis token count (T/p)
    int total() const { return rows * cols; }
};

enum class MaskStrategy { TAM, SAM, FAM, None };

inline MaskStrategy mask_strategy_from_string(const std::string& s) {
    if (s == "TAM") return MaskStrategy::TAM;
    if (s == "SAM") return MaskStrategy::SAM;
    if (s == "FAM") return MaskStrategy::FAM;
    if (s == "none") return MaskStrategy::None;
    throw ConfigError("unknown mask strategy: " + s);
}

inline std::string to_string(MaskStrategy s) {
    switch (s) {
        case MaskStrategy::TAM: return "TAM";
        case MaskStrategy::SAM: return "SAM";
        case MaskStrategy::FAM: return "FAM";
        default: return "none";
    }
}

struct TokenMask {
    TokenGrid grid;
    std::vector<char> mask;  // row-major rows x cols, true = masked
    MaskStrategy strategy = MaskStrategy::SAM;
    float ratio = 0.0f;

    bool masked(int r, int c) const { return mask[(size_t)r * grid.cols + c] != 0; }
    int masked_count() const {
        int n = 0;
        for (char m : mask) n += m != 0;
        return n;
    }
    int visible_count() const { return grid.total() - masked_count(); }

    std::vector<int> visible_indices() const {
        std::vector<int> idx;
        idx.reserve(grid.total());
        for (int i = 0; i < grid.total(); ++i)
            if (!mask[i]) idx.push_back(i);
        return idx;
    }
};

namespace mask_detail {

// round-half-up of ratio*units, clamped so at least one unit stays visible
inline int quantize(float ratio, int units) {
    int n = (int)std::floor((double)ratio * units + 0.5);
    return std::min(std::max(n, 0), units - 1);
}

// choose k distinct values from [0, n) via partial Fisher-Yates
inline std::vector<int> choose(int n, int k, Rng& rng) {
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    for (int i = 0; i < k; ++i) std::swap(pool[i], pool[i + (int)rng.randint(n - i)]);
    pool.resize(k);
    return pool;
}

}  // namespace mask_detail

inline TokenMask make_mask(const TokenGrid& grid, MaskStrategy strategy, float ratio, Rng& rng) {
    if (ratio < 0.0f || ratio >= 1.0f) throw ConfigError("make_mask: ratio must be in [0, 1)");
    if (grid.rows <= 0 || grid.cols <= 0) throw ShapeError("make_mask: empty grid");
    TokenMask m;
    m.grid = grid;
    m.strategy = strategy;
    m.ratio = ratio;
    m.mask.assign(grid.total(), 0);
    switch (strategy) {
        case MaskStrategy::None:
            break;
        case MaskStrategy::TAM: {
            int k = mask_detail::quantize(ratio, grid.cols);
            for (int c : mask_detail::choose(grid.cols, k, rng))
                for (int r = 0; r < grid.rows; ++r) m.mask[(size_t)r * grid.cols + c] = 1;
            break;
        }
        case MaskStrategy::FAM: {
            int k = mask_detail::quantize(ratio, grid.rows);
            for (int r : mask_detail::choose(grid.rows, k, rng))
                for (int c = 0; c < grid.cols; ++c) m.mask[(size_t)r * grid.cols + c] = 1;
            break;
        }
        case MaskStrategy::SAM: {
            int k = mask_detail::quantize(ratio, grid.total());
            for (int i : mask_detail::choose(grid.total(), k, rng)) m.mask[i] = 1;
            break;
        }
    }
    return m;
}

// order-preserving selection of visible token rows; the index map is returned
// alongside so callers can scatter back
inline TensorPtr gather_visible(const TensorPtr& tokens, const TokenMask& m,
                                std::vector<int>& index_map) {
    if (tokens->ndim() != 2 || tokens->shape[0] != m.grid.total())
        throw ShapeError("gather_visible: token count does not match grid");
    index_map = m.visible_indices();
    return gather_rows(tokens, index_map);
}

inline TensorPtr scatter_full(const TensorPtr& visible, const TokenMask& m,
                              const TensorPtr& mask_token) {
    if (visible->ndim() != 2 || visible->shape[0] != m.visible_count())
        throw ShapeError("scatter_full: visible count does not match mask");
    return scatter_rows_fill(visible, m.visible_indices(), m.grid.total(), mask_token);
}

}  // namespace mds
