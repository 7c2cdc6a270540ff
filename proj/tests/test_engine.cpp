#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "kvreuse/engine.hpp"
#include "kvreuse/report.hpp"

using namespace kvreuse;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.num_layers = 3;
    cfg.num_heads = 2;
    cfg.model_dim = 24;
    cfg.ffn_dim = 48;
    cfg.vocab_size = 16;
    cfg.max_seq_len = 512;
    return cfg;
}

Matrix random_rows(int n, int d, uint64_t seed) {
    Rng rng(seed);
    Matrix m(n, d);
    for (float& v : m.data) v = rng.next_normal() * 0.5f;
    return m;
}

TokenSequence sequence_from(Matrix rows, int vision_len) {
    TokenSequence seq;
    seq.embeddings = std::move(rows);
    seq.v_start = 0;
    seq.v_end = vision_len;
    seq.t_start = vision_len;
    seq.t_end = seq.embeddings.rows;
    return seq;
}

double max_abs(std::span<const float> a, std::span<const float> b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

SimilarityMap uniform_sim(int count) {
    SimilarityMap sim;
    sim.rows = 1;
    sim.cols = count;
    sim.values.assign(static_cast<size_t>(count), 1.0f);
    return sim;
}

/// Plan that reuses the given vision-token indices at every layer.
ReusePlan flat_plan(const std::vector<int>& indices, int vision_len, int layers) {
    const TokenIndexSet set = TokenIndexSet::from_unsorted(indices);
    ReusePlan plan = assemble_plan(
        set, uniform_sim(vision_len),
        std::vector<float>(static_cast<size_t>(layers), set.empty() ? 0.0f : 1.0f));
    return plan;
}

}  // namespace

TEST_CASE("build_position_map splits recompute and reuse") {
    const TokenSequence seq = sequence_from(random_rows(6, 24, 1), 4);

    const ReusePlan none = flat_plan({}, 4, 2);
    const CachePositionMap m0 = build_position_map(none, seq);
    CHECK(m0.recompute[0] == std::vector<int>{0, 1, 2, 3, 4, 5});
    CHECK(m0.reuse[0].empty());

    const ReusePlan all = flat_plan({0, 1, 2, 3}, 4, 2);
    const CachePositionMap m1 = build_position_map(all, seq);
    CHECK(m1.recompute[0] == std::vector<int>{4, 5});  // text positions only
    CHECK(m1.reuse[0] == std::vector<int>{0, 1, 2, 3});

    const ReusePlan some = flat_plan({0, 2}, 4, 2);
    const CachePositionMap m2 = build_position_map(some, seq);
    CHECK(m2.recompute[0] == std::vector<int>{1, 3, 4, 5});
    CHECK(m2.reuse[0] == std::vector<int>{0, 2});
}

TEST_CASE("prune_attention_inputs keeps the full key set") {
    const TokenSequence seq = sequence_from(random_rows(6, 24, 1), 4);
    const CachePositionMap map = build_position_map(flat_plan({0, 2}, 4, 2), seq);
    const AttentionInputs in = prune_attention_inputs(map, 1);
    CHECK(in.query_positions == std::vector<int>{1, 3, 4, 5});
    CHECK(in.key_positions == std::vector<int>{0, 1, 2, 3, 4, 5});
}

TEST_CASE("merge_caches case split") {
    LayerKVCache prev(1, 2), fresh(1, 2);
    const std::vector<float> k0 = {1, 1}, v0 = {9, 9};
    const std::vector<float> k1 = {2, 2}, v1 = {8, 8};
    prev.append(0, k0, v0);
    prev.append(1, k1, v1);

    // reuse {0}: fresh covers position 1
    fresh.append(1, std::vector<float>{5, 5}, std::vector<float>{6, 6});
    const std::vector<int> reuse = {0};
    const LayerKVCache merged = merge_caches(prev, fresh, reuse);
    REQUIRE(merged.size() == 2);
    CHECK(merged.position(0) == 0);
    CHECK(merged.key(0)[0] == 1.0f);
    CHECK(merged.key(1)[0] == 5.0f);
    CHECK(merged.value(1)[0] == 6.0f);

    // empty reuse set: merged equals fresh (given full coverage)
    LayerKVCache both(1, 2);
    both.append(0, k0, v0);
    both.append(1, k1, v1);
    const LayerKVCache same = merge_caches(prev, both, std::vector<int>{});
    CHECK(same.key(0)[0] == 1.0f);
    CHECK(same.size() == 2);

    // full reuse: merged equals prev
    const LayerKVCache empty_fresh(1, 2);
    const std::vector<int> all = {0, 1};
    const LayerKVCache copy = merge_caches(prev, empty_fresh, all);
    CHECK(copy.size() == 2);
    CHECK(copy.value(1)[0] == 8.0f);
}

TEST_CASE("merge_caches rejects overlap and gaps") {
    LayerKVCache prev(1, 2), fresh(1, 2);
    prev.append(0, std::vector<float>{1, 1}, std::vector<float>{1, 1});
    prev.append(1, std::vector<float>{2, 2}, std::vector<float>{2, 2});

    fresh.append(0, std::vector<float>{3, 3}, std::vector<float>{3, 3});
    const std::vector<int> overlap = {0};
    CHECK_THROWS_AS(merge_caches(prev, fresh, overlap), ContractError);

    const LayerKVCache nothing(1, 2);
    const std::vector<int> partial = {0};  // position 1 uncovered
    CHECK_THROWS_AS(merge_caches(prev, nothing, partial), ContractError);
}

TEST_CASE("empty reuse plan reproduces the full prefill exactly") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = ModelWeights::random(cfg, 4, 3);
    const TokenSequence a = sequence_from(random_rows(9, cfg.model_dim, 4), 6);
    const TokenSequence b = sequence_from(random_rows(9, cfg.model_dim, 5), 6);

    const PrefillResult first = prefill_full(a, w, TraceMode::None);
    const ReusePlan none = flat_plan({}, 6, cfg.num_layers);
    const FrameStepResult reuse =
        prefill_with_reuse(b, none, &first.caches, w, TraceMode::Full);
    const PrefillResult oracle = prefill_full(b, w, TraceMode::Full);

    CHECK(reuse.logits == oracle.logits);  // same arithmetic path
    for (int l = 0; l < cfg.num_layers; ++l) {
        CHECK(reuse.caches[static_cast<size_t>(l)].positions() ==
              oracle.caches[static_cast<size_t>(l)].positions());
        CHECK(reuse.reused_per_layer[static_cast<size_t>(l)] == 0);
        CHECK(reuse.recomputed_per_layer[static_cast<size_t>(l)] == 9);
    }
    for (size_t l = 0; l < reuse.trace.layers.size(); ++l)
        CHECK(reuse.trace.layers[l].weights == oracle.trace.layers[l].weights);
}

TEST_CASE("missing previous caches fall back to a full prefill") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = ModelWeights::random(cfg, 4, 3);
    const TokenSequence seq = sequence_from(random_rows(7, cfg.model_dim, 4), 5);
    const ReusePlan plan = flat_plan({1, 2}, 5, cfg.num_layers);
    const FrameStepResult step = prefill_with_reuse(seq, plan, nullptr, w, TraceMode::None);
    const PrefillResult oracle = prefill_full(seq, w, TraceMode::None);
    CHECK(step.logits == oracle.logits);
    CHECK(step.reused_per_layer == std::vector<int>(3, 0));
}

TEST_CASE("identical frames with full reuse keep the oracle logits") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = ModelWeights::random(cfg, 4, 6);
    const TokenSequence seq = sequence_from(random_rows(10, cfg.model_dim, 9), 8);

    PrefillResult state = prefill_full(seq, w, TraceMode::None);
    const ReusePlan all = flat_plan({0, 1, 2, 3, 4, 5, 6, 7}, 8, cfg.num_layers);
    for (int t = 0; t < 3; ++t) {
        const FrameStepResult step =
            prefill_with_reuse(seq, all, &state.caches, w, TraceMode::None);
        CHECK(max_abs(step.logits, state.logits) < 1e-4);
        CHECK(step.reused_per_layer == std::vector<int>(3, 8));
        CHECK(step.recomputed_per_layer == std::vector<int>(3, 2));
        state.caches = step.caches;
    }
}

TEST_CASE("unchanged-prefix reuse is exact against a full recompute") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = ModelWeights::random(cfg, 4, 8);
    Matrix rows = random_rows(8, cfg.model_dim, 10);
    const TokenSequence frame1 = sequence_from(rows, 6);
    const PrefillResult first = prefill_full(frame1, w, TraceMode::None);

    // frame 2 differs only at vision tokens 4 and 5 (indices > reused prefix)
    Matrix rows2 = rows;
    for (int r = 4; r <= 5; ++r)
        for (int c = 0; c < cfg.model_dim; ++c) rows2.at(r, c) += 0.25f;
    const TokenSequence frame2 = sequence_from(rows2, 6);

    const ReusePlan prefix = flat_plan({0, 1, 2, 3}, 6, cfg.num_layers);
    const FrameStepResult step =
        prefill_with_reuse(frame2, prefix, &first.caches, w, TraceMode::None);
    const PrefillResult oracle = prefill_full(frame2, w, TraceMode::None);

    CHECK(max_abs(step.logits, oracle.logits) < 1e-5);
    for (int l = 0; l < cfg.num_layers; ++l) {
        const LayerKVCache& got = step.caches[static_cast<size_t>(l)];
        const LayerKVCache& want = oracle.caches[static_cast<size_t>(l)];
        REQUIRE(got.size() == want.size());
        for (size_t e = 0; e < got.size(); ++e) {
            CHECK(got.position(e) == want.position(e));
            CHECK(max_abs(got.key(e), want.key(e)) < 1e-5);
            CHECK(max_abs(got.value(e), want.value(e)) < 1e-5);
        }
    }
}

TEST_CASE("a reused token's merged entries change iff its embedding changed") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = ModelWeights::random(cfg, 4, 12);
    const Matrix rows = random_rows(6, cfg.model_dim, 2);
    const TokenSequence frame1 = sequence_from(rows, 4);
    const PrefillResult first = prefill_full(frame1, w, TraceMode::None);

    // recompute only vision token 2, reuse {0,1,3}
    const ReusePlan plan = flat_plan({0, 1, 3}, 4, cfg.num_layers);

    // identical frame: the recomputed token's entries match frame 1 exactly
    const FrameStepResult same =
        prefill_with_reuse(frame1, plan, &first.caches, w, TraceMode::None);
    for (int l = 0; l < cfg.num_layers; ++l) {
        const LayerKVCache& got = same.caches[static_cast<size_t>(l)];
        const LayerKVCache& want = first.caches[static_cast<size_t>(l)];
        const int e = got.find(2);
        REQUIRE(e >= 0);
        CHECK(max_abs(got.key(static_cast<size_t>(e)),
                      want.key(static_cast<size_t>(want.find(2)))) == 0.0);
    }

    // perturbed embedding: the recomputed token's entries move at every layer
    Matrix rows2 = rows;
    rows2.at(2, 0) += 1.0f;
    const TokenSequence frame2 = sequence_from(rows2, 4);
    const FrameStepResult moved =
        prefill_with_reuse(frame2, plan, &first.caches, w, TraceMode::None);
    for (int l = 0; l < cfg.num_layers; ++l) {
        const LayerKVCache& got = moved.caches[static_cast<size_t>(l)];
        const LayerKVCache& want = first.caches[static_cast<size_t>(l)];
        const int e = got.find(2);
        CHECK(max_abs(got.key(static_cast<size_t>(e)),
                      want.key(static_cast<size_t>(want.find(2)))) > 0.0);
        // reused tokens stay bit-identical
        const int r0 = got.find(0);
        CHECK(max_abs(got.key(static_cast<size_t>(r0)),
                      want.key(static_cast<size_t>(want.find(0)))) == 0.0);
    }
}

TEST_CASE("plan and cache mismatches are contract errors") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = ModelWeights::random(cfg, 4, 3);
    const TokenSequence seq = sequence_from(random_rows(6, cfg.model_dim, 4), 4);
    const PrefillResult first = prefill_full(seq, w, TraceMode::None);

    // plan index outside the vision span
    const ReusePlan bad = flat_plan({9}, 10, cfg.num_layers);
    CHECK_THROWS_AS(prefill_with_reuse(seq, bad, &first.caches, w, TraceMode::None),
                    ContractError);

    // previous caches that do not cover the sequence
    const TokenSequence shorter = sequence_from(random_rows(4, cfg.model_dim, 4), 2);
    const PrefillResult small = prefill_full(shorter, w, TraceMode::None);
    const ReusePlan plan = flat_plan({0, 1}, 4, cfg.num_layers);
    CHECK_THROWS_AS(prefill_with_reuse(seq, plan, &small.caches, w, TraceMode::None),
                    ContractError);
}

TEST_CASE("one-frame episode runs a single full prefill") {
    SceneSpec spec;
    spec.height = 16;
    spec.width = 16;
    spec.channels = 1;
    spec.patch = 4;
    spec.num_frames = 1;
    const auto frames = generate_episode(spec, 1);

    const ModelConfig cfg = small_config();
    const ModelWeights w = ModelWeights::random(cfg, 16, 3);
    EpisodeParams params;
    params.mode = RunMode::LayerAdaptive;
    params.k_alpha = 10.0f;
    params.patch = 4;
    params.text_len = 3;
    const auto records = run_episode(frames, w, params);
    REQUIRE(records.size() == 1);
    CHECK(records[0].step.reused_per_layer == std::vector<int>(3, 0));
    CHECK(records[0].stats.final_count == 0);
}

TEST_CASE("episodes are deterministic given seeds") {
    SceneSpec spec;
    spec.height = 16;
    spec.width = 16;
    spec.channels = 1;
    spec.patch = 4;
    spec.num_frames = 4;
    MoverSpec m;
    m.extent_h = 8;
    m.extent_w = 8;
    m.vel_x = 1;
    spec.movers.push_back(m);
    const auto frames = generate_episode(spec, 5);

    const ModelConfig cfg = small_config();
    const ModelWeights w = ModelWeights::random(cfg, 16, 3);
    EpisodeParams params;
    params.mode = RunMode::Evicted;
    params.top_k = 16;
    params.patch = 4;
    params.text_len = 4;
    params.oracle_check = true;
    const auto a = run_episode(frames, w, params);
    const auto b = run_episode(frames, w, params);
    REQUIRE(a.size() == b.size());
    for (size_t t = 0; t < a.size(); ++t) {
        CHECK(a[t].step.logits == b[t].step.logits);
        CHECK(a[t].step.reused_per_layer == b[t].step.reused_per_layer);
        CHECK(a[t].stats.divergence == b[t].stats.divergence);
    }
}

TEST_CASE("recomputed counts complement the reuse counts") {
    SceneSpec spec;
    spec.height = 16;
    spec.width = 16;
    spec.channels = 1;
    spec.patch = 4;
    spec.num_frames = 3;
    const auto frames = generate_episode(spec, 2);

    const ModelConfig cfg = small_config();
    const ModelWeights w = ModelWeights::random(cfg, 16, 3);
    EpisodeParams params;
    params.mode = RunMode::StaticOnly;
    params.top_k = 16;
    params.patch = 4;
    params.text_len = 5;
    const auto records = run_episode(frames, w, params);
    const int lv = 16, lt = 5;
    for (const FrameRecord& rec : records) {
        for (int l = 0; l < cfg.num_layers; ++l) {
            CHECK(rec.step.recomputed_per_layer[static_cast<size_t>(l)] ==
                  lv - rec.step.reused_per_layer[static_cast<size_t>(l)] + lt);
        }
    }
    // constant scene in static-only mode reuses everything after frame 1
    CHECK(records[1].step.reused_per_layer == std::vector<int>(3, 16));
}

TEST_CASE("mover patches never enter the reuse candidates") {
    const SceneSpec spec = standard_scene();
    const auto frames = generate_episode(spec, 21);
    const ModelConfig cfg = small_config();
    const ModelWeights w =
        ModelWeights::random(cfg, spec.patch * spec.patch * spec.channels, 7);
    EpisodeParams params;
    params.mode = RunMode::Evicted;
    params.top_k = 100;
    params.tau = 0.996f;
    params.patch = spec.patch;
    params.text_len = 8;
    const auto records = run_episode(frames, w, params);

    const int cols = spec.width / spec.patch;
    for (size_t t = 1; t < records.size(); ++t) {
        const PixelRect prev = mover_rect(spec, 0, static_cast<int>(t) - 1);
        const PixelRect curr = mover_rect(spec, 0, static_cast<int>(t));
        for (int idx : records[t].stats.final_set) {
            const int py = (idx / cols) * spec.patch;
            const int px = (idx % cols) * spec.patch;
            // patch rectangle must not intersect either footprint
            auto intersects = [&](const PixelRect& r) {
                return px < r.x1 && px + spec.patch > r.x0 && py < r.y1 &&
                       py + spec.patch > r.y0;
            };
            CHECK(!intersects(prev));
            CHECK(!intersects(curr));
        }
    }
}

TEST_CASE("constant episode saturates late-layer reuse under the schedule") {
    SceneSpec spec;
    spec.height = 32;
    spec.width = 32;
    spec.channels = 1;
    spec.patch = 8;
    spec.num_frames = 4;
    const auto frames = generate_episode(spec, 2);

    const ModelConfig cfg = small_config();
    const ModelWeights w = ModelWeights::random(cfg, 64, 42);
    EpisodeParams params;
    params.mode = RunMode::LayerAdaptive;
    params.top_k = 16;
    params.tau_task = 1.0f;  // evict only the top-scoring token
    params.k_alpha = 1e6f;   // saturate wherever attention sharpened at all
    params.patch = 8;
    params.text_len = 4;
    const auto records = run_episode(frames, w, params);
    for (size_t t = 1; t < records.size(); ++t) {
        CHECK(records[t].stats.final_count == 15);
        // deepest layer reuses the whole candidate set
        CHECK(records[t].step.reused_per_layer.back() == 15);
        // first layer has no entropy predecessor, so it recomputes everything
        CHECK(records[t].step.reused_per_layer.front() == 0);
    }
}

TEST_CASE("reuse budgets cap the per-layer counts") {
    SceneSpec spec;
    spec.height = 16;
    spec.width = 16;
    spec.channels = 1;
    spec.patch = 4;
    spec.num_frames = 3;
    const auto frames = generate_episode(spec, 2);

    const ModelConfig cfg = small_config();
    const ModelWeights w = ModelWeights::random(cfg, 16, 3);
    EpisodeParams params;
    params.mode = RunMode::StaticOnly;
    params.top_k = 16;
    params.patch = 4;
    params.text_len = 5;
    params.reuse_budget_per_layer = std::vector<int>{2, 5, 5};
    const auto records = run_episode(frames, w, params);
    CHECK(records[1].step.reused_per_layer == std::vector<int>{2, 5, 5});
}
