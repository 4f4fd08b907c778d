#pragma once

#include <utility>
#include <vector>

#include "tensor.hpp"
#include "types.hpp"

namespace unisot {

// Search-grid geometry: g x g cells of p pixels, patch index row-major.

inline std::pair<double, double> patch_center(int row, int col, int p) {
    return {col * p + p / 2.0, row * p + p / 2.0};
}

inline int clamp_cell(int v, int g) { return v < 0 ? 0 : (v >= g ? g - 1 : v); }

// Cell that holds the box center: (row, col).
inline std::pair<int, int> center_cell(const Box& box, int g, int p) {
    return {clamp_cell(static_cast<int>(std::floor(box.cy / p)), g),
            clamp_cell(static_cast<int>(std::floor(box.cx / p)), g)};
}

// A patch is in-box iff its center lies inside the (closed) box.
inline std::vector<bool> in_box_mask(const Box& box, int g, int p) {
    std::vector<bool> m(static_cast<size_t>(g) * g, false);
    for (int r = 0; r < g; ++r)
        for (int c = 0; c < g; ++c) {
            auto [px, py] = patch_center(r, c, p);
            m[static_cast<size_t>(r) * g + c] = box.contains(px, py);
        }
    return m;
}

inline Tensor indicator_from_mask(const std::vector<bool>& m) {
    Tensor t({static_cast<int>(m.size())});
    for (size_t i = 0; i < m.size(); ++i) t.data[i] = m[i] ? 1.0 : 0.0;
    return t;
}

// Gaussian bump centered on the box-center cell, value exactly 1 there;
// sigma is one sixth of the box extent measured in cells.
inline Tensor gaussian_center_target(const Box& box, int g, int p) {
    auto [gr, gc] = center_cell(box, g, p);
    double extent_cells = 0.5 * (box.w + box.h) / p;
    double sigma = std::max(extent_cells / 6.0, 1e-3);
    Tensor y({g, g});
    for (int r = 0; r < g; ++r)
        for (int c = 0; c < g; ++c) {
            double d2 = (r - gr) * static_cast<double>(r - gr) + (c - gc) * static_cast<double>(c - gc);
            y.at(r, c) = std::exp(-d2 / (2.0 * sigma * sigma));
        }
    y.at(gr, gc) = 1.0;
    return y;
}

}  // namespace unisot
