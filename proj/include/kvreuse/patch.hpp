#pragma once

#include <vector>

#include "kvreuse/common.hpp"
#include "kvreuse/scene.hpp"

namespace kvreuse {

/// Non-overlapping p x p tiling of a frame. Patch (i, j) maps to vision token
/// index i * cols + j and stores the raw pixels it tiles, flattened in the
/// same row-major channel-minor order as the frame.
struct PatchGrid {
    int rows = 0;
    int cols = 0;
    int patch = 0;
    int channels = 0;
    Matrix patches;  // (rows*cols) x (patch*patch*channels)

    int patch_len() const { return patch * patch * channels; }
    int count() const { return rows * cols; }
    std::span<const float> patch_at(int index) const { return patches.row_span(index); }
    std::span<const float> patch_at(int i, int j) const { return patches.row_span(i * cols + j); }
};

/// Per-cell cosine similarity between two grids of identical shape.
struct SimilarityMap {
    int rows = 0;
    int cols = 0;
    std::vector<float> values;

    int count() const { return rows * cols; }
    float at(int index) const { return values[static_cast<size_t>(index)]; }
};

/// Ordered set of distinct vision-token indices, kept ascending.
class TokenIndexSet {
public:
    TokenIndexSet() = default;
    /// Sorts and dedups.
    static TokenIndexSet from_unsorted(std::vector<int> indices);
    /// Input must already be strictly ascending.
    static TokenIndexSet from_sorted(std::vector<int> indices);

    size_t size() const { return indices_.size(); }
    bool empty() const { return indices_.empty(); }
    bool contains(int index) const;
    const std::vector<int>& values() const { return indices_; }
    int operator[](size_t i) const { return indices_[i]; }
    auto begin() const { return indices_.begin(); }
    auto end() const { return indices_.end(); }
    bool operator==(const TokenIndexSet&) const = default;

    /// True when every member of this set is also in `other`.
    bool subset_of(const TokenIndexSet& other) const;

    static TokenIndexSet set_difference(const TokenIndexSet& a, const TokenIndexSet& b);
    static TokenIndexSet set_intersection(const TokenIndexSet& a, const TokenIndexSet& b);

private:
    std::vector<int> indices_;
};

/// Splits a frame into p x p patches. H and W must be divisible by p.
PatchGrid patchify(const FrameTensor& frame, int patch);

/// Inverse of patchify; bit-exact.
FrameTensor reassemble(const PatchGrid& grid);

/// Cosine similarity of corresponding patches. Zero-norm handling: both
/// patches zero -> 1, exactly one zero -> 0 (the quotient is undefined there).
SimilarityMap patch_similarity(const PatchGrid& current, const PatchGrid& previous);

/// Indices with similarity >= tau, keeping the k most similar; ties resolve
/// by ascending index. Returns fewer than k when fewer qualify.
TokenIndexSet select_static(const SimilarityMap& sim, float tau, int k);

}  // namespace kvreuse
