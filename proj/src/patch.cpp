#include "kvreuse/patch.hpp"

#include <algorithm>
#include <cmath>

namespace kvreuse {

TokenIndexSet TokenIndexSet::from_unsorted(std::vector<int> indices) {
    std::sort(indices.begin(), indices.end());
    indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
    TokenIndexSet s;
    s.indices_ = std::move(indices);
    return s;
}

TokenIndexSet TokenIndexSet::from_sorted(std::vector<int> indices) {
    for (size_t i = 1; i < indices.size(); ++i)
        require(indices[i - 1] < indices[i], "TokenIndexSet: indices not strictly ascending");
    TokenIndexSet s;
    s.indices_ = std::move(indices);
    return s;
}

bool TokenIndexSet::contains(int index) const {
    return std::binary_search(indices_.begin(), indices_.end(), index);
}

bool TokenIndexSet::subset_of(const TokenIndexSet& other) const {
    return std::includes(other.indices_.begin(), other.indices_.end(), indices_.begin(),
                         indices_.end());
}

TokenIndexSet TokenIndexSet::set_difference(const TokenIndexSet& a, const TokenIndexSet& b) {
    std::vector<int> out;
    std::set_difference(a.indices_.begin(), a.indices_.end(), b.indices_.begin(),
                        b.indices_.end(), std::back_inserter(out));
    return from_sorted(std::move(out));
}

TokenIndexSet TokenIndexSet::set_intersection(const TokenIndexSet& a, const TokenIndexSet& b) {
    std::vector<int> out;
    std::set_intersection(a.indices_.begin(), a.indices_.end(), b.indices_.begin(),
                          b.indices_.end(), std::back_inserter(out));
    return from_sorted(std::move(out));
}

PatchGrid patchify(const FrameTensor& frame, int patch) {
    require_config(patch > 0, "patchify: patch size must be positive");
    require_config(frame.height % patch == 0 && frame.width % patch == 0,
                   "patchify: frame dimensions must be divisible by the patch size");
    PatchGrid grid;
    grid.rows = frame.height / patch;
    grid.cols = frame.width / patch;
    grid.patch = patch;
    grid.channels = frame.channels;
    grid.patches = Matrix(grid.rows * grid.cols, grid.patch_len());
    for (int i = 0; i < grid.rows; ++i) {
        for (int j = 0; j < grid.cols; ++j) {
            float* dst = grid.patches.row(i * grid.cols + j);
            size_t n = 0;
            for (int py = 0; py < patch; ++py) {
                for (int px = 0; px < patch; ++px) {
                    for (int c = 0; c < frame.channels; ++c)
                        dst[n++] = frame.at(i * patch + py, j * patch + px, c);
                }
            }
        }
    }
    return grid;
}

FrameTensor reassemble(const PatchGrid& grid) {
    FrameTensor frame(grid.rows * grid.patch, grid.cols * grid.patch, grid.channels);
    for (int i = 0; i < grid.rows; ++i) {
        for (int j = 0; j < grid.cols; ++j) {
            const float* src = grid.patches.row(i * grid.cols + j);
            size_t n = 0;
            for (int py = 0; py < grid.patch; ++py) {
                for (int px = 0; px < grid.patch; ++px) {
                    for (int c = 0; c < grid.channels; ++c)
                        frame.at(i * grid.patch + py, j * grid.patch + px, c) = src[n++];
                }
            }
        }
    }
    return frame;
}

SimilarityMap patch_similarity(const PatchGrid& current, const PatchGrid& previous) {
    require(current.rows == previous.rows && current.cols == previous.cols &&
                current.patch_len() == previous.patch_len(),
            "patch_similarity: grid shapes differ");
    SimilarityMap map;
    map.rows = current.rows;
    map.cols = current.cols;
    map.values.resize(static_cast<size_t>(map.count()));
    const int len = current.patch_len();
    for (int idx = 0; idx < map.count(); ++idx) {
        const float* a = current.patches.row(idx);
        const float* b = previous.patches.row(idx);
        double dot = 0.0, aa = 0.0, bb = 0.0;
        for (int n = 0; n < len; ++n) {
            dot += static_cast<double>(a[n]) * b[n];
            aa += static_cast<double>(a[n]) * a[n];
            bb += static_cast<double>(b[n]) * b[n];
        }
        float sim;
        if (aa == 0.0 && bb == 0.0) {
            sim = 1.0f;  // two black patches are visually identical
        } else if (aa == 0.0 || bb == 0.0) {
            sim = 0.0f;
        } else {
            sim = static_cast<float>(dot / std::sqrt(aa * bb));
        }
        map.values[static_cast<size_t>(idx)] = std::clamp(sim, -1.0f, 1.0f);
    }
    return map;
}

TokenIndexSet select_static(const SimilarityMap& sim, float tau, int k) {
    require(k >= 0, "select_static: k must be >= 0");
    std::vector<int> qualifying;
    qualifying.reserve(static_cast<size_t>(sim.count()));
    for (int idx = 0; idx < sim.count(); ++idx)
        if (sim.at(idx) >= tau) qualifying.push_back(idx);
    std::stable_sort(qualifying.begin(), qualifying.end(), [&](int a, int b) {
        if (sim.at(a) != sim.at(b)) return sim.at(a) > sim.at(b);
        return a < b;
    });
    if (static_cast<int>(qualifying.size()) > k) qualifying.resize(static_cast<size_t>(k));
    return TokenIndexSet::from_unsorted(std::move(qualifying));
}

}  // namespace kvreuse
