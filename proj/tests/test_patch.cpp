#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "kvreuse/common.hpp"
#include "kvreuse/patch.hpp"
#include "kvreuse/scene.hpp"

using namespace kvreuse;

namespace {

FrameTensor ramp_frame(int h, int w, int c) {
    FrameTensor f(h, w, c);
    for (size_t i = 0; i < f.data.size(); ++i)
        f.data[i] = static_cast<float>((i * 37 + 11) % 101) / 101.0f;
    return f;
}

PatchGrid grid_from_patches(int rows, int cols, const std::vector<std::vector<float>>& cells) {
    PatchGrid g;
    g.rows = rows;
    g.cols = cols;
    g.channels = 1;
    const int len = static_cast<int>(cells[0].size());
    g.patch = static_cast<int>(std::round(std::sqrt(static_cast<double>(len))));
    g.patches = Matrix(rows * cols, len);
    for (int i = 0; i < rows * cols; ++i)
        std::copy(cells[static_cast<size_t>(i)].begin(), cells[static_cast<size_t>(i)].end(),
                  g.patches.row(i));
    return g;
}

}  // namespace

TEST_CASE("patchify shape arithmetic") {
    FrameTensor f(4, 4, 1);
    for (size_t i = 0; i < f.data.size(); ++i) f.data[i] = static_cast<float>(i);
    const PatchGrid g = patchify(f, 2);
    CHECK(g.rows == 2);
    CHECK(g.cols == 2);
    CHECK(g.patch_len() == 4);
    // patch (0,0) tiles pixels (0,0),(0,1),(1,0),(1,1)
    const auto p00 = g.patch_at(0, 0);
    CHECK(p00[0] == 0.0f);
    CHECK(p00[1] == 1.0f);
    CHECK(p00[2] == 4.0f);
    CHECK(p00[3] == 5.0f);
}

TEST_CASE("single-patch tiling equals the flattened frame") {
    const FrameTensor f = ramp_frame(6, 6, 3);
    const PatchGrid g = patchify(f, 6);
    CHECK(g.count() == 1);
    CHECK(std::vector<float>(g.patch_at(0).begin(), g.patch_at(0).end()) == f.data);
}

TEST_CASE("patchify then reassemble is the identity") {
    const FrameTensor f = ramp_frame(12, 8, 3);
    const FrameTensor back = reassemble(patchify(f, 4));
    CHECK(back.data == f.data);
    CHECK(back.height == f.height);
    CHECK(back.width == f.width);
}

TEST_CASE("non-divisible dimensions are a configuration error") {
    CHECK_THROWS_AS(patchify(ramp_frame(10, 8, 1), 4), ConfigError);
}

TEST_CASE("cosine similarity basics") {
    // identical grids -> exactly 1
    const FrameTensor f = ramp_frame(8, 8, 1);
    const PatchGrid g = patchify(f, 4);
    const SimilarityMap self = patch_similarity(g, g);
    for (float v : self.values) CHECK(v == 1.0f);

    // orthogonal vectors -> exactly 0; hand-computed pair -> exactly 1
    const PatchGrid a = grid_from_patches(1, 2, {{1, 0, 0, 0}, {1, 2, 2, 0}});
    const PatchGrid b = grid_from_patches(1, 2, {{0, 1, 0, 0}, {2, 4, 4, 0}});
    const SimilarityMap m = patch_similarity(a, b);
    CHECK(m.at(0) == 0.0f);
    CHECK(m.at(1) == 1.0f);  // dot 18, norms 3 and 6
}

TEST_CASE("zero-norm patches") {
    const PatchGrid a = grid_from_patches(1, 2, {{0, 0, 0, 0}, {0, 0, 0, 0}});
    const PatchGrid b = grid_from_patches(1, 2, {{0, 0, 0, 0}, {1, 1, 1, 1}});
    const SimilarityMap m = patch_similarity(a, b);
    CHECK(m.at(0) == 1.0f);  // both black
    CHECK(m.at(1) == 0.0f);  // one black
}

TEST_CASE("similarity is symmetric and NaN-free") {
    Rng rng(5);
    PatchGrid a, b;
    a.rows = b.rows = 3;
    a.cols = b.cols = 3;
    a.patch = b.patch = 2;
    a.channels = b.channels = 1;
    a.patches = Matrix(9, 4);
    b.patches = Matrix(9, 4);
    for (float& v : a.patches.data) v = rng.next_uniform();
    for (float& v : b.patches.data) v = rng.next_uniform();
    const SimilarityMap ab = patch_similarity(a, b);
    const SimilarityMap ba = patch_similarity(b, a);
    for (int i = 0; i < ab.count(); ++i) {
        CHECK(ab.at(i) == ba.at(i));
        CHECK(!std::isnan(ab.at(i)));
        CHECK(ab.at(i) >= -1.0f);
        CHECK(ab.at(i) <= 1.0f);
    }
}

TEST_CASE("select_static ranking and budget") {
    SimilarityMap m;
    m.rows = 2;
    m.cols = 2;
    m.values = {0.99f, 0.997f, 1.0f, 0.5f};
    CHECK(select_static(m, 0.996f, 1).values() == std::vector<int>{2});
    CHECK(select_static(m, 0.996f, 2).values() == std::vector<int>{1, 2});
    CHECK(select_static(m, 0.996f, 0).empty());
    // k exceeding the qualifying count returns all qualifying
    CHECK(select_static(m, 0.996f, 10).values() == std::vector<int>{1, 2});
}

TEST_CASE("select_static ties break by ascending index") {
    SimilarityMap m;
    m.rows = 1;
    m.cols = 4;
    m.values = {0.9f, 0.9f, 0.9f, 0.9f};
    CHECK(select_static(m, 0.5f, 2).values() == std::vector<int>{0, 1});
}

TEST_CASE("select_static monotonicity properties") {
    Rng rng(17);
    for (int rep = 0; rep < 200; ++rep) {
        SimilarityMap m;
        m.rows = 4;
        m.cols = 4;
        m.values.resize(16);
        for (float& v : m.values) v = rng.next_uniform() * 2.0f - 1.0f;
        const float tau = rng.next_uniform() * 2.0f - 1.0f;
        const float tau_hi = std::min(1.0f, tau + rng.next_uniform() * 0.3f);
        const int k = rng.next_int(0, 16);
        const int k_lo = rng.next_int(0, k);

        const TokenIndexSet base = select_static(m, tau, k);
        CHECK(static_cast<int>(base.size()) <= k);
        for (int idx : base) CHECK(m.at(idx) >= tau);
        int qualifying = 0;
        for (float v : m.values) qualifying += v >= tau ? 1 : 0;
        CHECK(static_cast<int>(base.size()) == std::min(k, qualifying));

        // raising tau or lowering k never adds an index
        CHECK(select_static(m, tau_hi, k).subset_of(base));
        CHECK(select_static(m, tau, k_lo).subset_of(base));
    }
}

TEST_CASE("zero-noise identical frames select every patch") {
    SceneSpec spec;
    spec.height = 16;
    spec.width = 16;
    spec.channels = 1;
    spec.patch = 4;
    spec.num_frames = 2;
    const auto frames = generate_episode(spec, 1);
    const SimilarityMap m =
        patch_similarity(patchify(frames[1], 4), patchify(frames[0], 4));
    const TokenIndexSet all = select_static(m, 1.0f, 16);
    CHECK(all.size() == 16);
}

TEST_CASE("token index set algebra") {
    const auto a = TokenIndexSet::from_unsorted({3, 1, 2});
    const auto b = TokenIndexSet::from_unsorted({2});
    CHECK(TokenIndexSet::set_difference(a, b).values() == std::vector<int>{1, 3});
    CHECK(TokenIndexSet::set_intersection(a, b).values() == std::vector<int>{2});
    CHECK(b.subset_of(a));
    CHECK(!a.subset_of(b));
    CHECK_THROWS_AS(TokenIndexSet::from_sorted({2, 2}), ContractError);
}
