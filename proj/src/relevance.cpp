#include "kvreuse/relevance.hpp"

#include <algorithm>
#include <cmath>

namespace kvreuse {

namespace {

void validate_spans(const SpanInfo& s, int seq_len) {
    require(s.v_start >= 0 && s.v_start <= s.v_end && s.v_end <= s.t_start &&
                s.t_start <= s.t_end && s.t_end <= seq_len,
            "relevance: spans out of bounds");
}

/// Mean over heads and text queries of the traced attention mass on each
/// vision key; shared by relevance scores and the entropy measure.
std::vector<float> mean_vis_attention(const AttentionTrace& trace, int layer,
                                      const SpanInfo& spans) {
    const VisTextAttention a = extract_vis_text_attention(trace, layer, spans);
    require(a.text_len > 0, "relevance: empty text span");
    require(a.vision_len > 0, "relevance: empty vision span");
    std::vector<float> mean(static_cast<size_t>(a.vision_len), 0.0f);
    for (int h = 0; h < a.num_heads; ++h)
        for (int tq = 0; tq < a.text_len; ++tq)
            for (int vk = 0; vk < a.vision_len; ++vk)
                mean[static_cast<size_t>(vk)] += a.at(h, tq, vk);
    const float denom = static_cast<float>(a.num_heads) * static_cast<float>(a.text_len);
    for (float& m : mean) m /= denom;
    return mean;
}

}  // namespace

VisTextAttention extract_vis_text_attention(const AttentionTrace& trace, int layer,
                                            const SpanInfo& spans) {
    require(!trace.empty(), "extract: empty trace");
    require(layer >= 0 && layer < static_cast<int>(trace.layers.size()),
            "extract: layer out of range");
    validate_spans(spans, trace.seq_len);

    VisTextAttention out;
    out.num_heads = trace.num_heads;
    out.text_len = spans.text_len();
    out.vision_len = spans.vision_len();
    out.weights.assign(static_cast<size_t>(out.num_heads) * out.text_len * out.vision_len,
                       0.0f);
    for (int tq = 0; tq < out.text_len; ++tq) {
        const int qpos = spans.t_start + tq;
        for (int h = 0; h < out.num_heads; ++h) {
            const std::span<const float> row = trace.row(layer, qpos, h);
            for (int vk = 0; vk < out.vision_len; ++vk)
                out.weights[(static_cast<size_t>(h) * out.text_len + tq) * out.vision_len +
                            vk] = row[static_cast<size_t>(spans.v_start + vk)];
        }
    }
    return out;
}

RelevanceScores aggregate_relevance(const AttentionTrace& trace,
                                    std::span<const int> layer_set, const SpanInfo& spans) {
    require(!layer_set.empty(), "aggregate_relevance: empty layer set");
    RelevanceScores out;
    out.scores.assign(static_cast<size_t>(spans.vision_len()), 0.0f);
    out.layers_used.assign(layer_set.begin(), layer_set.end());
    for (int layer : layer_set) {
        const std::vector<float> mean = mean_vis_attention(trace, layer, spans);
        for (size_t i = 0; i < mean.size(); ++i) out.scores[i] += mean[i];
    }
    for (float& s : out.scores) s /= static_cast<float>(layer_set.size());
    return out;
}

TokenIndexSet select_task_relevant(const RelevanceScores& scores, float tau_task,
                                   bool quantile_mode) {
    const int n = static_cast<int>(scores.scores.size());
    if (n == 0) return {};
    float threshold;
    if (quantile_mode) {
        require(tau_task >= 0.0f && tau_task <= 1.0f,
                "select_task_relevant: quantile level must be in [0,1]");
        std::vector<float> sorted = scores.scores;
        std::sort(sorted.begin(), sorted.end());
        const int idx = std::min(n - 1, static_cast<int>(std::floor(
                                            static_cast<double>(tau_task) * n)));
        threshold = sorted[static_cast<size_t>(idx)];
    } else {
        threshold = tau_task;
    }
    std::vector<int> selected;
    for (int i = 0; i < n; ++i)
        if (scores.scores[static_cast<size_t>(i)] >= threshold) selected.push_back(i);
    return TokenIndexSet::from_sorted(std::move(selected));
}

TokenIndexSet reuse_candidates(const TokenIndexSet& static_set,
                               const TokenIndexSet& task_relevant) {
    return TokenIndexSet::set_difference(static_set, task_relevant);
}

float attention_entropy(const AttentionTrace& trace, int layer, const SpanInfo& spans) {
    const std::vector<float> mean = mean_vis_attention(trace, layer, spans);
    double total = 0.0;
    for (float m : mean) {
        require(m >= 0.0f, "attention_entropy: negative attention mass");
        total += m;
    }
    require(total > 0.0, "attention_entropy: all-zero attention slice");
    double entropy = 0.0;
    for (float m : mean) {
        if (m <= 0.0f) continue;
        const double p = m / total;
        entropy -= p * std::log(p);
    }
    return static_cast<float>(entropy);
}

float entropy_ratio(float prev_entropy, float curr_entropy) {
    if (prev_entropy == 0.0f) return 0.0f;
    return (prev_entropy - curr_entropy) / prev_entropy;
}

float reuse_fraction(std::span<const float> ratio_prefix, float k) {
    require(k >= 0.0f, "reuse_fraction: k must be >= 0");
    double cum = 0.0;
    for (float r : ratio_prefix) cum += r;
    const double a = std::min(static_cast<double>(k) * cum, 1.0);
    return static_cast<float>(std::max(a, 0.0));
}

void ReusePlan::validate() const {
    require(static_cast<int>(reuse_per_layer.size()) == num_layers(),
            "reuse plan: per-layer subset count mismatch");
    for (int l = 0; l < num_layers(); ++l) {
        const float a = alpha[static_cast<size_t>(l)];
        require(a >= 0.0f && a <= 1.0f, "reuse plan: alpha out of [0,1]");
        require(reuse_per_layer[static_cast<size_t>(l)].subset_of(candidates),
                "reuse plan: reuse subset escapes the candidate set");
        if (l > 0)
            require(reuse_per_layer[static_cast<size_t>(l - 1)].subset_of(
                        reuse_per_layer[static_cast<size_t>(l)]),
                    "reuse plan: reuse subsets must be nested across layers");
    }
}

std::vector<int> rank_by_similarity(const TokenIndexSet& candidates, const SimilarityMap& sim) {
    std::vector<int> rank(candidates.begin(), candidates.end());
    for (int idx : rank)
        require(idx >= 0 && idx < sim.count(), "rank_by_similarity: index outside map");
    std::stable_sort(rank.begin(), rank.end(), [&](int a, int b) {
        if (sim.at(a) != sim.at(b)) return sim.at(a) > sim.at(b);
        return a < b;
    });
    return rank;
}

ReusePlan assemble_plan(const TokenIndexSet& candidates, const SimilarityMap& sim,
                        std::vector<float> alpha) {
    ReusePlan plan;
    plan.candidates = candidates;
    plan.candidate_rank = rank_by_similarity(candidates, sim);
    plan.alpha = std::move(alpha);
    const size_t n = candidates.size();
    plan.reuse_per_layer.reserve(plan.alpha.size());
    for (float a : plan.alpha) {
        require(a >= 0.0f && a <= 1.0f, "assemble_plan: alpha out of [0,1]");
        const size_t take = static_cast<size_t>(
            std::floor(static_cast<double>(a) * static_cast<double>(n)));
        std::vector<int> prefix(plan.candidate_rank.begin(),
                                plan.candidate_rank.begin() + static_cast<ptrdiff_t>(take));
        plan.reuse_per_layer.push_back(TokenIndexSet::from_unsorted(std::move(prefix)));
    }
    return plan;
}

ReusePlan build_reuse_plan(const TokenIndexSet& static_set, const SimilarityMap& sim,
                           const RelevanceScores& scores, std::span<const float> entropies,
                           float k_alpha, float tau_task, bool quantile_mode) {
    require(!entropies.empty(), "build_reuse_plan: need one entropy per layer");
    const TokenIndexSet relevant = select_task_relevant(scores, tau_task, quantile_mode);
    const TokenIndexSet candidates = reuse_candidates(static_set, relevant);

    const int layers = static_cast<int>(entropies.size());
    std::vector<float> ratios(static_cast<size_t>(layers), 0.0f);
    for (int l = 1; l < layers; ++l)
        ratios[static_cast<size_t>(l)] =
            entropy_ratio(entropies[static_cast<size_t>(l - 1)],
                          entropies[static_cast<size_t>(l)]);

    // Running maximum keeps the per-layer subsets nested: a token whose
    // hidden state was dropped at layer l cannot be recomputed at l+1.
    std::vector<float> alpha(static_cast<size_t>(layers), 0.0f);
    float peak = 0.0f;
    for (int l = 0; l < layers; ++l) {
        const float a = reuse_fraction(std::span<const float>(ratios).first(
                                           static_cast<size_t>(l + 1)),
                                       k_alpha);
        peak = std::max(peak, a);
        alpha[static_cast<size_t>(l)] = peak;
    }

    ReusePlan plan = assemble_plan(candidates, sim, std::move(alpha));
    plan.entropy.assign(entropies.begin(), entropies.end());
    plan.ratios = std::move(ratios);
    plan.static_set = static_set;
    plan.relevant_set = relevant;
    plan.validate();
    return plan;
}

}  // namespace kvreuse
