#include "kvreuse/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace kvreuse {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    require(a.size() == b.size(), "divergence: logit widths differ");
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

/// Reused vision token index -> sequence position.
std::vector<int> reuse_positions_for_layer(const ReusePlan& plan, int layer, int v_start) {
    const TokenIndexSet& set = plan.reuse_per_layer[static_cast<size_t>(layer)];
    std::vector<int> out;
    out.reserve(set.size());
    for (int idx : set) out.push_back(v_start + idx);
    return out;
}

LayerKVCache extract_entries(const LayerKVCache& prev, std::span<const int> positions) {
    LayerKVCache out(prev.num_heads(), prev.head_dim());
    for (int pos : positions) {
        const int i = prev.find(pos);
        require(i >= 0, "reuse: previous cache is missing a reused position");
        out.append(pos, prev.key(static_cast<size_t>(i)), prev.value(static_cast<size_t>(i)));
    }
    return out;
}

}  // namespace

CachePositionMap build_position_map(const ReusePlan& plan, const TokenSequence& seq) {
    seq.validate();
    plan.validate();
    CachePositionMap map;
    map.seq_len = seq.length();
    const int layers = plan.num_layers();
    map.recompute.resize(static_cast<size_t>(layers));
    map.reuse.resize(static_cast<size_t>(layers));
    for (int l = 0; l < layers; ++l) {
        std::vector<int> reuse = reuse_positions_for_layer(plan, l, seq.v_start);
        for (int pos : reuse)
            require(pos >= seq.v_start && pos < seq.v_end,
                    "position map: reuse index outside the vision span");
        std::vector<int>& rec = map.recompute[static_cast<size_t>(l)];
        size_t ri = 0;
        for (int pos = 0; pos < seq.length(); ++pos) {
            if (ri < reuse.size() && reuse[ri] == pos) {
                ++ri;
                continue;
            }
            rec.push_back(pos);  // text positions always land here
        }
        map.reuse[static_cast<size_t>(l)] = std::move(reuse);
    }
    return map;
}

AttentionInputs prune_attention_inputs(const CachePositionMap& map, int layer) {
    require(layer >= 0 && layer < static_cast<int>(map.recompute.size()),
            "prune_attention_inputs: layer out of range");
    AttentionInputs out;
    out.query_positions = map.recompute[static_cast<size_t>(layer)];
    out.key_positions.resize(static_cast<size_t>(map.seq_len));
    std::iota(out.key_positions.begin(), out.key_positions.end(), 0);
    return out;
}

LayerKVCache merge_caches(const LayerKVCache& prev, const LayerKVCache& fresh,
                          std::span<const int> reuse_positions) {
    require(prev.num_heads() == fresh.num_heads() && prev.head_dim() == fresh.head_dim(),
            "merge_caches: cache geometry differs");
    LayerKVCache merged = extract_entries(prev, reuse_positions);
    for (size_t i = 0; i < fresh.size(); ++i) {
        const int pos = fresh.position(i);
        require(std::find(reuse_positions.begin(), reuse_positions.end(), pos) ==
                    reuse_positions.end(),
                "merge_caches: fresh entry overlaps the reuse set");
        merged.append(pos, fresh.key(i), fresh.value(i));
    }
    merged.sort_by_position();  // also rejects duplicate positions
    require(merged.size() == prev.size(), "merge_caches: coverage gap after merge");
    for (size_t i = 0; i < merged.size(); ++i)
        require(prev.find(merged.position(i)) >= 0,
                "merge_caches: merged entry at unknown position");
    return merged;
}

FrameStepResult prefill_with_reuse(const TokenSequence& seq, const ReusePlan& plan,
                                   const std::vector<LayerKVCache>* prev_caches,
                                   const ModelWeights& weights, TraceMode trace_mode) {
    weights.config.validate();
    seq.validate();
    const int layers = weights.config.num_layers;
    require(plan.num_layers() == layers, "prefill_with_reuse: plan layer count mismatch");
    plan.validate();
    for (int idx : plan.candidates)
        require(idx >= 0 && idx < seq.vision_len(),
                "prefill_with_reuse: plan index outside the vision span");

    const auto start = Clock::now();
    FrameStepResult result;
    result.reused_per_layer.resize(static_cast<size_t>(layers), 0);
    result.recomputed_per_layer.resize(static_cast<size_t>(layers), seq.length());

    if (prev_caches == nullptr || prev_caches->empty()) {
        // First frame: nothing to reuse yet.
        PrefillResult full = prefill_full(seq, weights, trace_mode);
        result.logits = std::move(full.logits);
        result.caches = std::move(full.caches);
        result.trace = std::move(full.trace);
        result.wall_seconds = seconds_since(start);
        return result;
    }

    require(static_cast<int>(prev_caches->size()) == layers,
            "prefill_with_reuse: previous cache layer count mismatch");
    for (const LayerKVCache& c : *prev_caches)
        require(static_cast<int>(c.size()) == seq.length(),
                "prefill_with_reuse: previous cache does not cover the sequence");

    const CachePositionMap map = build_position_map(plan, seq);

    std::vector<LayerKVCache> caches;
    caches.reserve(static_cast<size_t>(layers));
    for (int l = 0; l < layers; ++l)
        caches.push_back(extract_entries((*prev_caches)[static_cast<size_t>(l)],
                                         map.reuse[static_cast<size_t>(l)]));

    std::vector<int> positions(static_cast<size_t>(seq.length()));
    std::iota(positions.begin(), positions.end(), 0);

    detail::ForwardRequest req;
    req.rows = &seq.embeddings;
    req.positions = &positions;
    req.active_rows = &map.recompute;
    req.weights = &weights;
    req.trace_mode = trace_mode;
    req.trace_seq_len = seq.length();
    req.text_start = seq.t_start;
    req.text_end = seq.t_end;

    detail::ForwardResult fwd = detail::run_forward(req, caches);

    for (int l = 0; l < layers; ++l) {
        caches[static_cast<size_t>(l)].sort_by_position();
        require(static_cast<int>(caches[static_cast<size_t>(l)].size()) == seq.length(),
                "prefill_with_reuse: merged cache does not cover every token");
        result.reused_per_layer[static_cast<size_t>(l)] =
            static_cast<int>(map.reuse[static_cast<size_t>(l)].size());
        result.recomputed_per_layer[static_cast<size_t>(l)] =
            static_cast<int>(map.recompute[static_cast<size_t>(l)].size());
    }

    result.logits = std::move(fwd.logits);
    result.caches = std::move(caches);
    result.trace = std::move(fwd.trace);
    result.wall_seconds = seconds_since(start);
    return result;
}

namespace {

std::vector<int> all_layers(int layers) {
    std::vector<int> v(static_cast<size_t>(layers));
    std::iota(v.begin(), v.end(), 0);
    return v;
}

/// Per-mode plan construction from the previous frame's trace.
ReusePlan make_plan(const EpisodeParams& params, const ModelConfig& cfg,
                    const TokenIndexSet& static_set, const SimilarityMap& sim,
                    const AttentionTrace& prev_trace, const SpanInfo& spans) {
    const int layers = cfg.num_layers;
    const std::vector<int> layer_set =
        params.layer_set.empty() ? all_layers(layers) : params.layer_set;

    ReusePlan plan;
    switch (params.mode) {
        case RunMode::Oracle: {
            plan = assemble_plan(TokenIndexSet{}, sim,
                                 std::vector<float>(static_cast<size_t>(layers), 0.0f));
            break;
        }
        case RunMode::StaticOnly: {
            plan = assemble_plan(static_set, sim,
                                 std::vector<float>(static_cast<size_t>(layers), 1.0f));
            plan.static_set = static_set;
            break;
        }
        case RunMode::Evicted: {
            const RelevanceScores scores = aggregate_relevance(prev_trace, layer_set, spans);
            const TokenIndexSet relevant =
                select_task_relevant(scores, params.tau_task, params.tau_task_quantile);
            const TokenIndexSet candidates = reuse_candidates(static_set, relevant);
            plan = assemble_plan(candidates, sim,
                                 std::vector<float>(static_cast<size_t>(layers), 1.0f));
            plan.static_set = static_set;
            plan.relevant_set = relevant;
            break;
        }
        case RunMode::LayerAdaptive: {
            const RelevanceScores scores = aggregate_relevance(prev_trace, layer_set, spans);
            std::vector<float> entropies(static_cast<size_t>(layers), 0.0f);
            for (int l = 0; l < layers; ++l)
                entropies[static_cast<size_t>(l)] = attention_entropy(prev_trace, l, spans);
            plan = build_reuse_plan(static_set, sim, scores, entropies, params.k_alpha,
                                    params.tau_task, params.tau_task_quantile);
            break;
        }
    }

    if (params.reuse_budget_per_layer) {
        const std::vector<int>& budget = *params.reuse_budget_per_layer;
        require(static_cast<int>(budget.size()) == layers,
                "episode: reuse budget must cover every layer");
        const size_t n = plan.candidates.size();
        int peak = 0;  // running max keeps prefixes nested even if the budget dips
        for (int l = 0; l < layers; ++l) {
            peak = std::max(peak, std::max(budget[static_cast<size_t>(l)], 0));
            const size_t take = std::min(static_cast<size_t>(peak), n);
            std::vector<int> prefix(plan.candidate_rank.begin(),
                                    plan.candidate_rank.begin() +
                                        static_cast<ptrdiff_t>(take));
            plan.reuse_per_layer[static_cast<size_t>(l)] =
                TokenIndexSet::from_unsorted(std::move(prefix));
            plan.alpha[static_cast<size_t>(l)] =
                n == 0 ? 0.0f : static_cast<float>(take) / static_cast<float>(n);
        }
        plan.validate();
    }
    return plan;
}

}  // namespace

std::vector<FrameRecord> run_episode(const std::vector<FrameTensor>& frames,
                                     const ModelWeights& weights, const EpisodeParams& params) {
    require(!frames.empty(), "run_episode: need at least one frame");
    weights.config.validate();

    const std::vector<int> text_ids =
        make_text_ids(params.text_len, weights.config.vocab_size, params.text_seed);

    std::vector<FrameRecord> records;
    records.reserve(frames.size());

    PatchGrid prev_grid;
    std::vector<LayerKVCache> prev_caches;
    AttentionTrace prev_trace;

    for (size_t t = 0; t < frames.size(); ++t) {
        const auto start = Clock::now();
        const PatchGrid grid = patchify(frames[t], params.patch);
        const TokenSequence seq = build_sequence(grid, weights, text_ids);
        const SpanInfo spans = SpanInfo::of(seq);

        FrameRecord rec;
        rec.stats.frame_index = static_cast<int>(t);
        rec.stats.alpha.assign(static_cast<size_t>(weights.config.num_layers), 0.0f);

        if (t == 0 || params.mode == RunMode::Oracle) {
            PrefillResult full = prefill_full(seq, weights, params.trace_mode);
            rec.step.logits = std::move(full.logits);
            rec.step.caches = std::move(full.caches);
            rec.step.trace = std::move(full.trace);
            rec.step.reused_per_layer.assign(
                static_cast<size_t>(weights.config.num_layers), 0);
            rec.step.recomputed_per_layer.assign(
                static_cast<size_t>(weights.config.num_layers), seq.length());
            rec.step.wall_seconds = seconds_since(start);
        } else {
            const SimilarityMap sim = patch_similarity(grid, prev_grid);
            const TokenIndexSet static_set = select_static(sim, params.tau, params.top_k);
            ReusePlan plan = make_plan(params, weights.config, static_set, sim, prev_trace,
                                       spans);
            rec.step = prefill_with_reuse(seq, plan, &prev_caches, weights, params.trace_mode);
            // Account selection work in the step's wall time as well.
            rec.step.wall_seconds = seconds_since(start);
            rec.stats.static_count = static_cast<int>(static_set.size());
            rec.stats.relevant_count = static_cast<int>(plan.relevant_set.size());
            rec.stats.final_count = static_cast<int>(plan.candidates.size());
            rec.stats.alpha = plan.alpha;
            rec.stats.static_set = static_set;
            rec.stats.relevant_set = plan.relevant_set;
            rec.stats.final_set = plan.candidates;
        }

        if (params.oracle_check) {
            if (params.mode == RunMode::Oracle || t == 0) {
                rec.stats.divergence = 0.0;
            } else {
                const PrefillResult oracle = prefill_full(seq, weights, TraceMode::None);
                rec.stats.divergence = max_abs_diff(rec.step.logits, oracle.logits);
            }
        }

        prev_grid = grid;
        prev_caches = rec.step.caches;
        prev_trace = rec.step.trace;
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace kvreuse
