#pragma once

#include <vector>

#include "kvreuse/decoder.hpp"
#include "kvreuse/patch.hpp"

namespace kvreuse {

/// Token spans handed to the attention slicers.
struct SpanInfo {
    int v_start = 0, v_end = 0;
    int t_start = 0, t_end = 0;

    int vision_len() const { return v_end - v_start; }
    int text_len() const { return t_end - t_start; }
    static SpanInfo of(const TokenSequence& seq) {
        return {seq.v_start, seq.v_end, seq.t_start, seq.t_end};
    }
};

/// Per-head text-query x vision-key attention block for one layer. Under a
/// causal mask with vision ahead of text, cross-modal information lives in
/// the (text query, vision key) entries, so that is the orientation sliced.
struct VisTextAttention {
    int num_heads = 0;
    int text_len = 0;
    int vision_len = 0;
    std::vector<float> weights;  // [head][text query][vision key]

    float at(int head, int tq, int vk) const {
        return weights[(static_cast<size_t>(head) * text_len + tq) * vision_len + vk];
    }
};

VisTextAttention extract_vis_text_attention(const AttentionTrace& trace, int layer,
                                            const SpanInfo& spans);

/// Mean text-to-vision attention per vision token: mean over heads and text
/// queries within a layer, then mean over the layer set.
struct RelevanceScores {
    std::vector<float> scores;      // one per vision token
    std::vector<int> layers_used;   // the layer set that was aggregated
};

RelevanceScores aggregate_relevance(const AttentionTrace& trace,
                                    std::span<const int> layer_set, const SpanInfo& spans);

/// Tokens at or above the tau_task score quantile (default), or above the
/// absolute threshold when quantile_mode is false. Quantile threshold is
/// sorted_scores[min(n-1, floor(tau * n))].
TokenIndexSet select_task_relevant(const RelevanceScores& scores, float tau_task,
                                   bool quantile_mode = true);

/// Static set minus task-relevant set.
TokenIndexSet reuse_candidates(const TokenIndexSet& static_set,
                               const TokenIndexSet& task_relevant);

/// Shannon entropy (natural log) of the layer's mean text-to-vision attention
/// vector, renormalized to sum 1. Range [0, ln vision_len].
float attention_entropy(const AttentionTrace& trace, int layer, const SpanInfo& spans);

/// (prev - curr) / prev; 0 when prev is 0.
float entropy_ratio(float prev_entropy, float curr_entropy);

/// min(k * sum(ratios), 1) clamped below at 0: the reuse fraction for the
/// layer whose ratio ends the prefix.
float reuse_fraction(std::span<const float> ratio_prefix, float k);

/// Frame-level reuse decision: candidate set, per-layer fractions, and the
/// per-layer reuse subsets actually applied.
struct ReusePlan {
    TokenIndexSet candidates;                    // reusable token indices
    std::vector<int> candidate_rank;             // candidates ranked by similarity desc
    std::vector<float> alpha;                    // per layer, in [0,1]
    std::vector<TokenIndexSet> reuse_per_layer;  // nested prefixes of the ranking
    std::vector<float> entropy;                  // per layer (empty when unscheduled)
    std::vector<float> ratios;                   // per layer
    TokenIndexSet static_set;
    TokenIndexSet relevant_set;

    int num_layers() const { return static_cast<int>(alpha.size()); }
    /// Throws ContractError when subset or nesting invariants are broken.
    void validate() const;
};

/// Ranks candidate tokens by descending similarity (ties by ascending index).
std::vector<int> rank_by_similarity(const TokenIndexSet& candidates, const SimilarityMap& sim);

/// Assembles a plan from a candidate set and a per-layer fraction vector:
/// layer l reuses the floor(alpha[l] * |candidates|) most similar candidates.
ReusePlan assemble_plan(const TokenIndexSet& candidates, const SimilarityMap& sim,
                        std::vector<float> alpha);

/// Full scheduling pipeline: evict task-relevant tokens from the static set,
/// derive per-layer fractions from the entropy profile (first layer ratio is
/// 0: it has no predecessor), and take the running maximum of the fractions
/// so a token reused at one layer stays reused at deeper layers.
ReusePlan build_reuse_plan(const TokenIndexSet& static_set, const SimilarityMap& sim,
                           const RelevanceScores& scores, std::span<const float> entropies,
                           float k_alpha, float tau_task, bool quantile_mode = true);

}  // namespace kvreuse
