#pragma once

#include <filesystem>
#include <vector>

#include "kvreuse/common.hpp"

namespace kvreuse {

/// One camera frame: H x W x C intensities in [0,1], row-major, channel-minor.
struct FrameTensor {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;

    FrameTensor() = default;
    FrameTensor(int h, int w, int c)
        : height(h), width(w), channels(c),
          data(static_cast<size_t>(h) * w * c, 0.0f) {}

    size_t index(int y, int x, int c) const {
        return (static_cast<size_t>(y) * width + x) * channels + c;
    }
    float at(int y, int x, int c) const { return data[index(y, x, c)]; }
    float& at(int y, int x, int c) { return data[index(y, x, c)]; }

    bool same_shape(const FrameTensor& other) const {
        return height == other.height && width == other.width && channels == other.channels;
    }
};

enum class BoundaryMode { Clamp, Wrap };

/// A rectangular region that translates across the frame. It carries its own
/// deterministic texture (anchored to the mover, so covered pixels change as
/// it moves) scaled by `intensity`.
struct MoverSpec {
    int extent_h = 8;
    int extent_w = 8;
    int start_x = 0;
    int start_y = 0;
    int vel_x = 0;
    int vel_y = 0;
    float intensity = 1.0f;
    uint64_t texture_seed = 7;
};

struct SceneSpec {
    int height = 64;
    int width = 64;
    int channels = 3;
    int patch = 8;
    uint64_t background_seed = 1;
    std::vector<MoverSpec> movers;
    float noise_amplitude = 0.0f;
    int num_frames = 2;
    BoundaryMode boundary = BoundaryMode::Clamp;

    /// Throws ConfigError on non-divisible dims, movers that cannot fit, etc.
    void validate() const;
};

struct PixelRect {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open [x0,x1) x [y0,y1)
    bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
};

/// Analytic mover placement at a given step, after boundary handling.
PixelRect mover_rect(const SceneSpec& spec, size_t mover_index, int step);

/// Deterministic synthetic episode: seeded background texture, translating
/// textured movers, optional per-pixel uniform noise clipped to [0,1].
std::vector<FrameTensor> generate_episode(const SceneSpec& spec, uint64_t seed);

/// Frame container file. Layout: magic "VLAC", version byte, then u32 LE
/// frame_count, H, W, C, then frame_count frames of H*W*C float32 LE values
/// (row-major, channel-minor). Round-trips bit-exactly.
void write_frames(const std::vector<FrameTensor>& frames, const std::filesystem::path& path);
std::vector<FrameTensor> read_frames(const std::filesystem::path& path);

}  // namespace kvreuse
