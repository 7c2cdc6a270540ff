#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "kvreuse/engine.hpp"
#include "kvreuse/flops.hpp"
#include "kvreuse/scene.hpp"

namespace kvreuse {

inline constexpr const char* kVersion = "kvreuse 0.1.0";

/// Everything one benchmark execution needs. Exactly one of scene /
/// frames_path supplies the input stream.
struct RunConfig {
    std::optional<SceneSpec> scene;
    std::optional<std::filesystem::path> frames_path;
    int patch = 8;  // patch size for frames-file input; scenes carry their own
    ModelConfig model;
    std::optional<std::filesystem::path> weights_path;  // random weights when unset
    uint64_t seed = 42;

    RunMode mode = RunMode::LayerAdaptive;
    float tau = 0.996f;
    int top_k = 100;
    float tau_task = 0.5f;
    bool tau_task_quantile = true;
    std::optional<float> k_alpha;     // required for layer-adaptive
    std::vector<int> layer_set;       // 0-based; empty = all layers
    bool oracle_check = false;
    int text_len = 8;
    int repeat = 1;

    std::optional<std::filesystem::path> out_path;
    std::optional<std::filesystem::path> dump_maps_dir;

    void validate() const;
};

RunMode parse_mode(const std::string& name);
std::string mode_name(RunMode mode);

/// Per-frame record plus the medians used for reporting.
struct FrameReport {
    FrameStats stats;
    std::vector<int> reused_per_layer;
    std::vector<int> recomputed_per_layer;
    double wall_seconds_median = 0.0;
    std::vector<float> logits;
};

struct EpisodeReport {
    std::string version;
    RunConfig config;
    int seq_len = 0;
    int vision_len = 0;
    std::vector<FrameReport> frames;
    FlopsLedger ledger;

    // Aggregates; always recomputable from the per-frame records.
    double mean_reuse_rate = 0.0;       // sum reuse / (layers * vision_len), averaged
    double median_wall_seconds = 0.0;   // over frames after the warm-up frame
    double mean_divergence = 0.0;       // when oracle_check was on
    bool has_divergence = false;
};

/// Executes the configured episode `repeat` times (timing varies, outputs do
/// not) and assembles the report. Writes the JSONL report and token maps
/// when paths are configured.
EpisodeReport run(const RunConfig& config);

/// Parameter axes a sweep can vary.
enum class SweepParam { TopK, Tau, TauTask, KAlpha };
SweepParam parse_sweep_param(const std::string& name);

/// One report per grid value; everything else (seeds included) stays fixed.
std::vector<EpisodeReport> sweep(const RunConfig& base, SweepParam param,
                                 std::span<const double> values);

/// Writes the line-delimited report: one frame record per line, then one
/// summary record.
void write_report_jsonl(const EpisodeReport& report, std::ostream& os);
void write_report_jsonl(const EpisodeReport& report, const std::filesystem::path& path);

/// Human-readable per-frame table plus the summary block.
void print_report_table(const EpisodeReport& report, std::ostream& os);

/// Classifies each patch of one frame as static / task-relevant / overlap /
/// recompute and writes a text grid plus a PPM color map.
void dump_token_map(const FrameStats& stats, int grid_rows, int grid_cols, int patch,
                    const std::filesystem::path& text_path,
                    const std::filesystem::path& image_path);

/// Scene description file (JSON). Fields: height, width, channels, patch,
/// background_seed, noise, frames, boundary, movers[].
SceneSpec scene_from_json_file(const std::filesystem::path& path);
std::string scene_to_json(const SceneSpec& spec);

/// The fixed benchmark scene: 64x64x3, 8px patches, one textured 16x16 mover
/// crossing the frame for 30 frames, plus mild per-pixel noise.
SceneSpec standard_scene();

}  // namespace kvreuse
