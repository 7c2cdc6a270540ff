#pragma once

#include <cstdint>
#include <vector>

#include "kvreuse/common.hpp"

namespace kvreuse {

/// Per-layer decoder cost for L tokens: 4LD^2 (q/k/v/o projections) +
/// 2L^2D (score and mix matmuls) + 2LDM (two-matrix feed-forward), counting
/// one unit per multiply-accumulate.
uint64_t layer_flops_baseline(uint64_t seq_len, uint64_t model_dim, uint64_t ffn_dim);

/// Cost avoided at one layer by reusing `reused` token entries; same shape
/// as the baseline formula with L replaced by the reused count.
uint64_t layer_flops_saving(uint64_t reused, uint64_t model_dim, uint64_t ffn_dim);

/// Once-per-frame selection costs: H^2 for patch similarity, Lt*Lv*D for
/// cross-modal score aggregation, L^2*D for the entropy schedule.
struct SelectionOverheads {
    uint64_t static_sim = 0;
    uint64_t task_filter = 0;
    uint64_t entropy = 0;

    uint64_t total() const { return static_sim + task_filter + entropy; }
};

SelectionOverheads selection_overheads(uint64_t image_side, uint64_t text_len,
                                       uint64_t vision_len, uint64_t model_dim,
                                       uint64_t seq_len);

/// Sum of per-layer savings minus the overhead bracket, charged once per
/// frame. May be negative when nothing is reused.
int64_t total_reduction(std::span<const uint64_t> per_layer_savings,
                        const SelectionOverheads& overheads);

struct LedgerParams {
    uint64_t seq_len = 0;       // L
    uint64_t text_len = 0;      // Lt
    uint64_t vision_len = 0;    // Lv
    uint64_t model_dim = 0;     // D
    uint64_t ffn_dim = 0;       // M
    uint64_t image_side = 0;    // H
    uint64_t patch = 0;         // p
    uint64_t num_layers = 0;    // decoder depth
};

/// Exact integer account of an episode: baseline cost, reuse savings per
/// frame and layer, selection overheads (charged once per frame that ran
/// selection), and derived totals.
struct FlopsLedger {
    LedgerParams params;
    uint64_t baseline_per_layer = 0;
    uint64_t baseline_total = 0;                      // frames * layers * per-layer
    std::vector<std::vector<uint64_t>> saving_per_frame_layer;
    SelectionOverheads overheads;                     // one frame's bracket
    uint64_t patch_count = 0;                         // N_patch = (H/p)*(W/p)
    uint64_t patch_dim = 0;                           // D_patch = p*p*C
    uint64_t static_sim_exact = 0;                    // N_patch^2 * D_patch
    uint64_t sort_ops = 0;                            // L*ceil(log2 L), count not FLOPs
    uint64_t frames = 0;
    uint64_t selection_frames = 0;                    // frames charged the bracket
    uint64_t savings_total = 0;
    int64_t reduction_total = 0;                      // savings - selection_frames*bracket
    double relative_reduction = 0.0;                  // reduction_total / baseline_total

    /// Recomputes the derived totals from parts; throws ContractError when a
    /// stored total disagrees (internal-consistency checkpoint).
    void verify() const;
};

/// Builds the episode ledger from the per-frame reuse counts recorded by the
/// engine (frame 1 carries zero reuse and is not charged selection costs).
FlopsLedger build_episode_ledger(const LedgerParams& params, uint64_t patch_count,
                                 uint64_t patch_dim,
                                 const std::vector<std::vector<int>>& reused_per_frame_layer);

}  // namespace kvreuse
