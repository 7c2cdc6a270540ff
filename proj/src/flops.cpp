#include "kvreuse/flops.hpp"

#include <bit>
#include <cmath>

namespace kvreuse {

uint64_t layer_flops_baseline(uint64_t seq_len, uint64_t model_dim, uint64_t ffn_dim) {
    return 4 * seq_len * model_dim * model_dim + 2 * seq_len * seq_len * model_dim +
           2 * seq_len * model_dim * ffn_dim;
}

uint64_t layer_flops_saving(uint64_t reused, uint64_t model_dim, uint64_t ffn_dim) {
    return layer_flops_baseline(reused, model_dim, ffn_dim);
}

SelectionOverheads selection_overheads(uint64_t image_side, uint64_t text_len,
                                       uint64_t vision_len, uint64_t model_dim,
                                       uint64_t seq_len) {
    SelectionOverheads o;
    o.static_sim = image_side * image_side;
    o.task_filter = text_len * vision_len * model_dim;
    o.entropy = seq_len * seq_len * model_dim;
    return o;
}

int64_t total_reduction(std::span<const uint64_t> per_layer_savings,
                        const SelectionOverheads& overheads) {
    uint64_t savings = 0;
    for (uint64_t s : per_layer_savings) savings += s;
    return static_cast<int64_t>(savings) - static_cast<int64_t>(overheads.total());
}

void FlopsLedger::verify() const {
    require(baseline_per_layer ==
                layer_flops_baseline(params.seq_len, params.model_dim, params.ffn_dim),
            "ledger: per-layer baseline mismatch");
    require(baseline_total == frames * params.num_layers * baseline_per_layer,
            "ledger: baseline total mismatch");
    uint64_t savings = 0;
    for (const std::vector<uint64_t>& frame : saving_per_frame_layer) {
        require(frame.size() == params.num_layers, "ledger: per-frame layer count mismatch");
        for (uint64_t s : frame) savings += s;
    }
    require(savings == savings_total, "ledger: savings total mismatch");
    const int64_t expected = static_cast<int64_t>(savings_total) -
                             static_cast<int64_t>(selection_frames) *
                                 static_cast<int64_t>(overheads.total());
    require(reduction_total == expected, "ledger: reduction total mismatch");
}

FlopsLedger build_episode_ledger(const LedgerParams& params, uint64_t patch_count,
                                 uint64_t patch_dim,
                                 const std::vector<std::vector<int>>& reused_per_frame_layer) {
    FlopsLedger ledger;
    ledger.params = params;
    ledger.baseline_per_layer =
        layer_flops_baseline(params.seq_len, params.model_dim, params.ffn_dim);
    ledger.frames = reused_per_frame_layer.size();
    ledger.baseline_total = ledger.frames * params.num_layers * ledger.baseline_per_layer;
    ledger.overheads = selection_overheads(params.image_side, params.text_len,
                                           params.vision_len, params.model_dim,
                                           params.seq_len);
    ledger.patch_count = patch_count;
    ledger.patch_dim = patch_dim;
    ledger.static_sim_exact = patch_count * patch_count * patch_dim;
    if (params.seq_len > 1) {
        const uint64_t bits =
            static_cast<uint64_t>(std::bit_width(params.seq_len - 1));  // ceil(log2 L)
        ledger.sort_ops = params.seq_len * bits;
    }

    for (const std::vector<int>& frame : reused_per_frame_layer) {
        require(frame.size() == params.num_layers,
                "ledger: reuse counts must cover every layer");
        std::vector<uint64_t> savings;
        savings.reserve(frame.size());
        for (int reused : frame) {
            require(reused >= 0 && static_cast<uint64_t>(reused) <= params.seq_len,
                    "ledger: reuse count out of range");
            savings.push_back(
                layer_flops_saving(static_cast<uint64_t>(reused), params.model_dim,
                                   params.ffn_dim));
        }
        for (uint64_t s : savings) ledger.savings_total += s;
        ledger.saving_per_frame_layer.push_back(std::move(savings));
    }
    // Selection runs for every frame after the first regardless of outcome.
    ledger.selection_frames = ledger.frames > 0 ? ledger.frames - 1 : 0;
    ledger.reduction_total = static_cast<int64_t>(ledger.savings_total) -
                             static_cast<int64_t>(ledger.selection_frames) *
                                 static_cast<int64_t>(ledger.overheads.total());
    ledger.relative_reduction =
        ledger.baseline_total == 0
            ? 0.0
            : static_cast<double>(ledger.reduction_total) /
                  static_cast<double>(ledger.baseline_total);
    ledger.verify();
    return ledger;
}

}  // namespace kvreuse
