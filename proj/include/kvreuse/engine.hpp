#pragma once

#include <optional>
#include <vector>

#include "kvreuse/decoder.hpp"
#include "kvreuse/relevance.hpp"
#include "kvreuse/scene.hpp"

namespace kvreuse {

/// Per-layer split of the current frame's token positions into tokens that
/// are recomputed and tokens served from the previous frame's cache. Reused
/// tokens keep the position ids they were cached under.
struct CachePositionMap {
    int seq_len = 0;
    std::vector<std::vector<int>> recompute;  // per layer, ascending positions
    std::vector<std::vector<int>> reuse;      // per layer, ascending positions
};

CachePositionMap build_position_map(const ReusePlan& plan, const TokenSequence& seq);

/// Attention operands for one layer after pruning: only recomputed tokens
/// issue queries; keys and values span every position (reused entries come
/// from the cache).
struct AttentionInputs {
    std::vector<int> query_positions;
    std::vector<int> key_positions;
};

AttentionInputs prune_attention_inputs(const CachePositionMap& map, int layer);

/// Combines reused entries of `prev` with freshly computed `fresh` entries.
/// `reuse_positions` selects what to copy from prev; fresh must cover exactly
/// the remaining positions of prev (gap or overlap is a contract error).
LayerKVCache merge_caches(const LayerKVCache& prev, const LayerKVCache& fresh,
                          std::span<const int> reuse_positions);

struct FrameStepResult {
    std::vector<float> logits;
    std::vector<LayerKVCache> caches;   // merged, canonical order, full coverage
    AttentionTrace trace;
    std::vector<int> reused_per_layer;
    std::vector<int> recomputed_per_layer;
    double wall_seconds = 0.0;
};

/// Selective prefill per the cross-frame reuse rule: reused vision tokens
/// keep their previous K/V at every layer, everything else (always including
/// text) is recomputed against the merged key/value set. Falls back to a
/// full prefill when prev_caches is null (first frame).
FrameStepResult prefill_with_reuse(const TokenSequence& seq, const ReusePlan& plan,
                                   const std::vector<LayerKVCache>* prev_caches,
                                   const ModelWeights& weights, TraceMode trace_mode);

enum class RunMode { Oracle, StaticOnly, Evicted, LayerAdaptive };

struct EpisodeParams {
    RunMode mode = RunMode::LayerAdaptive;
    float tau = 0.996f;
    int top_k = 100;
    float tau_task = 0.5f;
    bool tau_task_quantile = true;
    float k_alpha = 10.0f;
    std::vector<int> layer_set;  // 0-based layers for relevance; empty = all
    bool oracle_check = false;
    int text_len = 8;
    uint64_t text_seed = 1;
    TraceMode trace_mode = TraceMode::TextQueries;
    int patch = 8;
    /// Optional per-layer cap on |reuse set|, for budget-matched comparisons.
    std::optional<std::vector<int>> reuse_budget_per_layer;
};

struct FrameStats {
    int frame_index = 0;
    int static_count = 0;
    int relevant_count = 0;
    int final_count = 0;
    std::vector<float> alpha;
    std::optional<double> divergence;  // max-abs logit gap vs the oracle pass
    TokenIndexSet static_set;
    TokenIndexSet relevant_set;
    TokenIndexSet final_set;
};

struct FrameRecord {
    FrameStepResult step;
    FrameStats stats;
};

/// Closed-loop episode: frame 1 is a full prefill; each later frame runs
/// static selection against the previous frame, relevance and entropy
/// scheduling on the previous frame's trace, then the selective prefill.
std::vector<FrameRecord> run_episode(const std::vector<FrameTensor>& frames,
                                     const ModelWeights& weights, const EpisodeParams& params);

}  // namespace kvreuse
