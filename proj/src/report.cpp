#include "kvreuse/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <json.hpp>

namespace kvreuse {

using nlohmann::json;

namespace {

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

json mode_json(RunMode mode) { return mode_name(mode); }

json config_json(const RunConfig& c) {
    json j;
    j["mode"] = mode_json(c.mode);
    j["tau"] = c.tau;
    j["topk"] = c.top_k;
    j["tau_task"] = c.tau_task;
    j["tau_task_quantile"] = c.tau_task_quantile;
    if (c.k_alpha) j["k_alpha"] = *c.k_alpha;
    j["layers"] = c.layer_set;
    j["seed"] = c.seed;
    j["text_len"] = c.text_len;
    j["repeat"] = c.repeat;
    j["oracle_check"] = c.oracle_check;
    j["model"] = {{"num_layers", c.model.num_layers}, {"num_heads", c.model.num_heads},
                  {"model_dim", c.model.model_dim},   {"ffn_dim", c.model.ffn_dim},
                  {"vocab_size", c.model.vocab_size}, {"max_seq_len", c.model.max_seq_len},
                  {"rotary_base", c.model.rotary_base}};
    if (c.scene) j["scene"] = json::parse(scene_to_json(*c.scene));
    if (c.frames_path) j["frames_path"] = c.frames_path->string();
    if (c.weights_path) j["weights_path"] = c.weights_path->string();
    return j;
}

json ledger_json(const FlopsLedger& l) {
    json j;
    j["params"] = {{"L", l.params.seq_len},     {"Lt", l.params.text_len},
                   {"Lv", l.params.vision_len}, {"D", l.params.model_dim},
                   {"M", l.params.ffn_dim},     {"H", l.params.image_side},
                   {"p", l.params.patch},       {"layers", l.params.num_layers}};
    j["baseline_per_layer"] = l.baseline_per_layer;
    j["baseline_total"] = l.baseline_total;
    j["savings_total"] = l.savings_total;
    j["overheads"] = {{"static_sim", l.overheads.static_sim},
                      {"task_filter", l.overheads.task_filter},
                      {"entropy", l.overheads.entropy}};
    j["static_sim_exact"] = l.static_sim_exact;
    j["patch_count"] = l.patch_count;
    j["patch_dim"] = l.patch_dim;
    j["sort_ops"] = l.sort_ops;
    j["selection_frames"] = l.selection_frames;
    j["reduction_total"] = l.reduction_total;
    j["relative_reduction"] = l.relative_reduction;
    return j;
}

std::vector<FrameTensor> load_frames(const RunConfig& c) {
    if (c.frames_path) return read_frames(*c.frames_path);
    return generate_episode(*c.scene, c.seed);
}

EpisodeParams episode_params(const RunConfig& c, int patch) {
    EpisodeParams p;
    p.mode = c.mode;
    p.tau = c.tau;
    p.top_k = c.top_k;
    p.tau_task = c.tau_task;
    p.tau_task_quantile = c.tau_task_quantile;
    p.k_alpha = c.k_alpha.value_or(10.0f);
    p.layer_set = c.layer_set;
    p.oracle_check = c.oracle_check;
    p.text_len = c.text_len;
    p.text_seed = derive_seed(c.seed, 3);
    p.trace_mode = TraceMode::TextQueries;
    p.patch = patch;
    return p;
}

}  // namespace

void RunConfig::validate() const {
    require_config(scene.has_value() != frames_path.has_value(),
                   "config: provide exactly one of a scene or a frames file");
    if (scene) scene->validate();
    model.validate();
    require_config(top_k >= 0, "config: topk must be >= 0");
    require_config(tau >= -1.0f && tau <= 1.0f, "config: tau must be in [-1,1]");
    if (tau_task_quantile)
        require_config(tau_task >= 0.0f && tau_task <= 1.0f,
                       "config: tau-task quantile must be in [0,1]");
    require_config(patch >= 1, "config: patch size must be >= 1");
    require_config(text_len >= 1, "config: text length must be >= 1");
    require_config(repeat >= 1, "config: repeat must be >= 1");
    if (mode == RunMode::LayerAdaptive)
        require_config(k_alpha.has_value(), "config: layer-adaptive mode requires --k-alpha");
    if (k_alpha) require_config(*k_alpha >= 0.0f, "config: k-alpha must be >= 0");
    for (int l : layer_set)
        require_config(l >= 0 && l < model.num_layers, "config: layer index out of range");
}

RunMode parse_mode(const std::string& name) {
    if (name == "oracle") return RunMode::Oracle;
    if (name == "static-only") return RunMode::StaticOnly;
    if (name == "evicted") return RunMode::Evicted;
    if (name == "layer-adaptive") return RunMode::LayerAdaptive;
    throw ConfigError("unknown mode: " + name);
}

std::string mode_name(RunMode mode) {
    switch (mode) {
        case RunMode::Oracle: return "oracle";
        case RunMode::StaticOnly: return "static-only";
        case RunMode::Evicted: return "evicted";
        case RunMode::LayerAdaptive: return "layer-adaptive";
    }
    return "?";
}

SweepParam parse_sweep_param(const std::string& name) {
    if (name == "topk") return SweepParam::TopK;
    if (name == "tau") return SweepParam::Tau;
    if (name == "tau-task") return SweepParam::TauTask;
    if (name == "k-alpha") return SweepParam::KAlpha;
    throw ConfigError("unknown sweep parameter: " + name);
}

EpisodeReport run(const RunConfig& config) {
    config.validate();

    const std::vector<FrameTensor> frames = load_frames(config);
    require_config(!frames.empty(), "config: the episode has no frames");
    const int patch = config.scene ? config.scene->patch : config.patch;
    require_config(frames[0].height % patch == 0 && frames[0].width % patch == 0,
                   "config: frame dimensions must be divisible by the patch size");
    const int patch_dim = patch * patch * frames[0].channels;

    ModelWeights weights =
        config.weights_path ? read_weights(*config.weights_path)
                            : ModelWeights::random(config.model, patch_dim,
                                                   derive_seed(config.seed, 1));
    require_config(weights.patch_dim == patch_dim,
                   "config: weight file embeds a different patch size");

    const EpisodeParams params = episode_params(config, patch);

    std::vector<FrameRecord> records = run_episode(frames, weights, params);
    std::vector<std::vector<double>> wall(records.size());
    for (size_t f = 0; f < records.size(); ++f)
        wall[f].push_back(records[f].step.wall_seconds);
    for (int rep = 1; rep < config.repeat; ++rep) {
        const std::vector<FrameRecord> again = run_episode(frames, weights, params);
        for (size_t f = 0; f < again.size(); ++f)
            wall[f].push_back(again[f].step.wall_seconds);
    }

    EpisodeReport report;
    report.version = kVersion;
    report.config = config;
    const PatchGrid grid0 = patchify(frames[0], patch);
    report.vision_len = grid0.count();
    report.seq_len = grid0.count() + config.text_len;

    std::vector<std::vector<int>> reuse_counts;
    for (size_t f = 0; f < records.size(); ++f) {
        FrameReport fr;
        fr.stats = records[f].stats;
        fr.reused_per_layer = records[f].step.reused_per_layer;
        fr.recomputed_per_layer = records[f].step.recomputed_per_layer;
        fr.wall_seconds_median = median(wall[f]);
        fr.logits = records[f].step.logits;
        reuse_counts.push_back(fr.reused_per_layer);
        report.frames.push_back(std::move(fr));
    }

    LedgerParams lp;
    lp.seq_len = static_cast<uint64_t>(report.seq_len);
    lp.text_len = static_cast<uint64_t>(config.text_len);
    lp.vision_len = static_cast<uint64_t>(report.vision_len);
    lp.model_dim = static_cast<uint64_t>(config.model.model_dim);
    lp.ffn_dim = static_cast<uint64_t>(config.model.ffn_dim);
    lp.image_side = static_cast<uint64_t>(frames[0].height);
    lp.patch = static_cast<uint64_t>(patch);
    lp.num_layers = static_cast<uint64_t>(config.model.num_layers);
    report.ledger = build_episode_ledger(lp, static_cast<uint64_t>(grid0.count()),
                                         static_cast<uint64_t>(patch_dim), reuse_counts);

    // Aggregates straight from the per-frame records.
    double reuse_sum = 0.0;
    double div_sum = 0.0;
    int div_count = 0;
    std::vector<double> steady_walls;
    for (size_t f = 0; f < report.frames.size(); ++f) {
        const FrameReport& fr = report.frames[f];
        double layer_sum = 0.0;
        for (int r : fr.reused_per_layer) layer_sum += r;
        reuse_sum += layer_sum / (static_cast<double>(config.model.num_layers) *
                                  report.vision_len);
        if (f > 0) steady_walls.push_back(fr.wall_seconds_median);  // frame 1 is warm-up
        if (fr.stats.divergence) {
            div_sum += *fr.stats.divergence;
            ++div_count;
        }
    }
    report.mean_reuse_rate = reuse_sum / static_cast<double>(report.frames.size());
    report.median_wall_seconds = median(std::move(steady_walls));
    report.has_divergence = div_count > 0;
    report.mean_divergence = div_count > 0 ? div_sum / div_count : 0.0;

    if (config.out_path) write_report_jsonl(report, *config.out_path);
    if (config.dump_maps_dir) {
        std::filesystem::create_directories(*config.dump_maps_dir);
        for (const FrameReport& fr : report.frames) {
            std::ostringstream base;
            base << "map_f" << std::setw(3) << std::setfill('0') << fr.stats.frame_index;
            dump_token_map(fr.stats, grid0.rows, grid0.cols, patch,
                           *config.dump_maps_dir / (base.str() + ".txt"),
                           *config.dump_maps_dir / (base.str() + ".ppm"));
        }
    }
    return report;
}

std::vector<EpisodeReport> sweep(const RunConfig& base, SweepParam param,
                                 std::span<const double> values) {
    require_config(!values.empty(), "sweep: empty value grid");
    std::vector<EpisodeReport> reports;
    reports.reserve(values.size());
    for (double v : values) {
        RunConfig point = base;
        switch (param) {
            case SweepParam::TopK: point.top_k = static_cast<int>(v); break;
            case SweepParam::Tau: point.tau = static_cast<float>(v); break;
            case SweepParam::TauTask: point.tau_task = static_cast<float>(v); break;
            case SweepParam::KAlpha: point.k_alpha = static_cast<float>(v); break;
        }
        if (point.out_path) {
            std::ostringstream suffix;
            suffix << point.out_path->stem().string() << "_" << v
                   << point.out_path->extension().string();
            point.out_path = point.out_path->parent_path() / suffix.str();
        }
        reports.push_back(run(point));
    }
    return reports;
}

void write_report_jsonl(const EpisodeReport& report, std::ostream& os) {
    for (const FrameReport& fr : report.frames) {
        json j;
        j["type"] = "frame";
        j["frame"] = fr.stats.frame_index;
        j["reused_per_layer"] = fr.reused_per_layer;
        j["recomputed_per_layer"] = fr.recomputed_per_layer;
        j["static"] = fr.stats.static_count;
        j["relevant"] = fr.stats.relevant_count;
        j["final"] = fr.stats.final_count;
        j["alpha"] = fr.stats.alpha;
        j["wall_seconds"] = fr.wall_seconds_median;
        if (fr.stats.divergence)
            j["divergence"] = *fr.stats.divergence;
        else
            j["divergence"] = nullptr;
        os << j.dump() << '\n';
    }
    json s;
    s["type"] = "summary";
    s["version"] = report.version;
    s["config"] = config_json(report.config);
    s["frames"] = report.frames.size();
    s["seq_len"] = report.seq_len;
    s["vision_len"] = report.vision_len;
    s["mean_reuse_rate"] = report.mean_reuse_rate;
    s["median_wall_seconds"] = report.median_wall_seconds;
    if (report.has_divergence)
        s["mean_divergence"] = report.mean_divergence;
    else
        s["mean_divergence"] = nullptr;
    s["flops"] = ledger_json(report.ledger);
    os << s.dump() << '\n';
}

void write_report_jsonl(const EpisodeReport& report, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("report: cannot open " + path.string());
    write_report_jsonl(report, os);
}

void print_report_table(const EpisodeReport& report, std::ostream& os) {
    os << report.version << "  mode=" << mode_name(report.config.mode)
       << "  frames=" << report.frames.size() << "  L=" << report.seq_len
       << " (vision " << report.vision_len << ")\n";
    os << std::left << std::setw(7) << "frame" << std::setw(9) << "static" << std::setw(9)
       << "relevant" << std::setw(9) << "final" << std::setw(12) << "reuse" << std::setw(12)
       << "wall(ms)" << "divergence\n";
    for (const FrameReport& fr : report.frames) {
        double layer_sum = 0.0;
        for (int r : fr.reused_per_layer) layer_sum += r;
        const double rate =
            layer_sum / (static_cast<double>(fr.reused_per_layer.size()) *
                         std::max(report.vision_len, 1));
        os << std::left << std::setw(7) << fr.stats.frame_index << std::setw(9)
           << fr.stats.static_count << std::setw(9) << fr.stats.relevant_count << std::setw(9)
           << fr.stats.final_count << std::setw(12) << std::fixed << std::setprecision(4)
           << rate << std::setw(12) << std::setprecision(3)
           << fr.wall_seconds_median * 1e3;
        if (fr.stats.divergence)
            os << std::scientific << std::setprecision(3) << *fr.stats.divergence;
        else
            os << "-";
        os << std::defaultfloat << '\n';
    }
    os << "mean reuse rate      " << std::fixed << std::setprecision(4)
       << report.mean_reuse_rate << '\n';
    os << "median wall (ms)     " << std::setprecision(3)
       << report.median_wall_seconds * 1e3 << '\n';
    if (report.has_divergence)
        os << "mean divergence      " << std::scientific << std::setprecision(3)
           << report.mean_divergence << '\n';
    os << "flops baseline       " << report.ledger.baseline_total << '\n';
    os << "flops reduction      " << report.ledger.reduction_total << " ("
       << std::fixed << std::setprecision(2) << report.ledger.relative_reduction * 100.0
       << "%)\n"
       << std::defaultfloat;
}

void dump_token_map(const FrameStats& stats, int grid_rows, int grid_cols, int patch,
                    const std::filesystem::path& text_path,
                    const std::filesystem::path& image_path) {
    const int count = grid_rows * grid_cols;
    // Classes: overlap = static AND task-relevant, else static, else relevant,
    // else recompute.
    std::vector<char> cls(static_cast<size_t>(count), '.');
    for (int i = 0; i < count; ++i) {
        const bool st = stats.static_set.contains(i);
        const bool rel = stats.relevant_set.contains(i);
        if (st && rel)
            cls[static_cast<size_t>(i)] = 'O';
        else if (st)
            cls[static_cast<size_t>(i)] = 'S';
        else if (rel)
            cls[static_cast<size_t>(i)] = 'T';
    }

    std::ofstream ts(text_path);
    if (!ts) throw FormatError("dump_token_map: cannot open " + text_path.string());
    ts << "# S=static T=task-relevant O=overlap .=recompute  frame "
       << stats.frame_index << "\n";
    for (int i = 0; i < grid_rows; ++i) {
        for (int j = 0; j < grid_cols; ++j) ts << cls[static_cast<size_t>(i * grid_cols + j)];
        ts << '\n';
    }

    // PPM map, one patch-sized block per token.
    const int hpx = grid_rows * patch;
    const int wpx = grid_cols * patch;
    std::ofstream is(image_path, std::ios::binary);
    if (!is) throw FormatError("dump_token_map: cannot open " + image_path.string());
    is << "P6\n" << wpx << " " << hpx << "\n255\n";
    for (int y = 0; y < hpx; ++y) {
        for (int x = 0; x < wpx; ++x) {
            const char c = cls[static_cast<size_t>((y / patch) * grid_cols + (x / patch))];
            unsigned char rgb[3];
            switch (c) {
                case 'S': rgb[0] = 60; rgb[1] = 90; rgb[2] = 220; break;    // blue
                case 'T': rgb[0] = 230; rgb[1] = 200; rgb[2] = 40; break;   // yellow
                case 'O': rgb[0] = 220; rgb[1] = 50; rgb[2] = 50; break;    // red
                default: rgb[0] = 120; rgb[1] = 120; rgb[2] = 120; break;   // gray
            }
            is.write(reinterpret_cast<const char*>(rgb), 3);
        }
    }
}

SceneSpec scene_from_json_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("scene: cannot open " + path.string());
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw FormatError(std::string("scene: invalid JSON: ") + e.what());
    }
    SceneSpec spec;
    try {
        spec.height = j.value("height", spec.height);
        spec.width = j.value("width", spec.width);
        spec.channels = j.value("channels", spec.channels);
        spec.patch = j.value("patch", spec.patch);
        spec.background_seed = j.value("background_seed", spec.background_seed);
        spec.noise_amplitude = j.value("noise", spec.noise_amplitude);
        spec.num_frames = j.value("frames", spec.num_frames);
        const std::string boundary = j.value("boundary", std::string("clamp"));
        if (boundary == "clamp")
            spec.boundary = BoundaryMode::Clamp;
        else if (boundary == "wrap")
            spec.boundary = BoundaryMode::Wrap;
        else
            throw ConfigError("scene: boundary must be clamp or wrap");
        spec.movers.clear();
        for (const json& m : j.value("movers", json::array())) {
            MoverSpec mv;
            mv.extent_h = m.value("h", mv.extent_h);
            mv.extent_w = m.value("w", mv.extent_w);
            mv.start_x = m.value("x0", mv.start_x);
            mv.start_y = m.value("y0", mv.start_y);
            mv.vel_x = m.value("vx", mv.vel_x);
            mv.vel_y = m.value("vy", mv.vel_y);
            mv.intensity = m.value("intensity", mv.intensity);
            mv.texture_seed = m.value("texture_seed", mv.texture_seed);
            spec.movers.push_back(mv);
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("scene: bad field: ") + e.what());
    }
    spec.validate();
    return spec;
}

std::string scene_to_json(const SceneSpec& spec) {
    json j;
    j["height"] = spec.height;
    j["width"] = spec.width;
    j["channels"] = spec.channels;
    j["patch"] = spec.patch;
    j["background_seed"] = spec.background_seed;
    j["noise"] = spec.noise_amplitude;
    j["frames"] = spec.num_frames;
    j["boundary"] = spec.boundary == BoundaryMode::Clamp ? "clamp" : "wrap";
    j["movers"] = json::array();
    for (const MoverSpec& m : spec.movers) {
        j["movers"].push_back({{"h", m.extent_h},
                               {"w", m.extent_w},
                               {"x0", m.start_x},
                               {"y0", m.start_y},
                               {"vx", m.vel_x},
                               {"vy", m.vel_y},
                               {"intensity", m.intensity},
                               {"texture_seed", m.texture_seed}});
    }
    return j.dump();
}

SceneSpec standard_scene() {
    SceneSpec spec;
    spec.height = 64;
    spec.width = 64;
    spec.channels = 3;
    spec.patch = 8;
    spec.background_seed = 11;
    // Mild sensor noise: static patches stay far above the 0.996 similarity
    // threshold but no two frames are bit-identical, so reuse is never free.
    spec.noise_amplitude = 0.02f;
    spec.num_frames = 30;
    spec.boundary = BoundaryMode::Clamp;
    MoverSpec m;
    m.extent_h = 16;
    m.extent_w = 16;
    m.start_x = 0;
    m.start_y = 24;  // spans patch rows 3-4 exactly
    m.vel_x = 1;     // keeps moving for all 30 frames: 29 + 16 <= 64
    m.vel_y = 0;
    m.intensity = 1.0f;
    m.texture_seed = 7;
    spec.movers.push_back(m);
    return spec;
}

}  // namespace kvreuse
