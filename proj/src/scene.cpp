#include "kvreuse/scene.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

namespace kvreuse {

namespace {

int wrap_mod(int value, int modulus) {
    int r = value % modulus;
    return r < 0 ? r + modulus : r;
}

int place(int start, int vel, int step, int span, int extent, BoundaryMode mode) {
    const int raw = start + vel * step;
    const int max_pos = span - extent;
    if (mode == BoundaryMode::Clamp) return std::clamp(raw, 0, max_pos);
    return wrap_mod(raw, max_pos + 1);
}

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw FormatError("frame file: truncated header");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

constexpr char kFrameMagic[4] = {'V', 'L', 'A', 'C'};
constexpr unsigned char kFrameVersion = 1;

}  // namespace

void SceneSpec::validate() const {
    require_config(height > 0 && width > 0, "scene: frame dimensions must be positive");
    require_config(channels == 1 || channels == 3, "scene: channels must be 1 or 3");
    require_config(patch > 0, "scene: patch size must be positive");
    require_config(height % patch == 0 && width % patch == 0,
                   "scene: frame dimensions must be multiples of the patch size");
    require_config(noise_amplitude >= 0.0f, "scene: noise amplitude must be >= 0");
    require_config(num_frames >= 0, "scene: episode length must be >= 0");
    for (const MoverSpec& m : movers) {
        require_config(m.extent_h > 0 && m.extent_w > 0, "scene: mover extent must be positive");
        require_config(m.extent_h <= height && m.extent_w <= width,
                       "scene: mover larger than frame");
        require_config(m.start_x >= 0 && m.start_x + m.extent_w <= width &&
                           m.start_y >= 0 && m.start_y + m.extent_h <= height,
                       "scene: mover start position out of bounds");
    }
}

PixelRect mover_rect(const SceneSpec& spec, size_t mover_index, int step) {
    require(mover_index < spec.movers.size(), "mover_rect: index out of range");
    const MoverSpec& m = spec.movers[mover_index];
    const int x = place(m.start_x, m.vel_x, step, spec.width, m.extent_w, spec.boundary);
    const int y = place(m.start_y, m.vel_y, step, spec.height, m.extent_h, spec.boundary);
    return {x, y, x + m.extent_w, y + m.extent_h};
}

std::vector<FrameTensor> generate_episode(const SceneSpec& spec, uint64_t seed) {
    spec.validate();

    FrameTensor background(spec.height, spec.width, spec.channels);
    {
        Rng rng(spec.background_seed);
        for (float& v : background.data) v = rng.next_uniform();
    }

    // Per-mover texture, anchored to the mover so its pixels shift with it.
    std::vector<std::vector<float>> textures;
    textures.reserve(spec.movers.size());
    for (const MoverSpec& m : spec.movers) {
        Rng rng(m.texture_seed);
        std::vector<float> tex(static_cast<size_t>(m.extent_h) * m.extent_w * spec.channels);
        for (float& v : tex) v = rng.next_uniform();
        textures.push_back(std::move(tex));
    }

    Rng noise(derive_seed(seed, 17));
    std::vector<FrameTensor> frames;
    frames.reserve(static_cast<size_t>(spec.num_frames));
    for (int t = 0; t < spec.num_frames; ++t) {
        FrameTensor frame = background;
        for (size_t mi = 0; mi < spec.movers.size(); ++mi) {
            const MoverSpec& m = spec.movers[mi];
            const PixelRect r = mover_rect(spec, mi, t);
            const std::vector<float>& tex = textures[mi];
            for (int y = r.y0; y < r.y1; ++y) {
                for (int x = r.x0; x < r.x1; ++x) {
                    for (int c = 0; c < spec.channels; ++c) {
                        const size_t ti =
                            (static_cast<size_t>(y - r.y0) * m.extent_w + (x - r.x0)) *
                                spec.channels +
                            c;
                        frame.at(y, x, c) = std::clamp(m.intensity * tex[ti], 0.0f, 1.0f);
                    }
                }
            }
        }
        if (spec.noise_amplitude > 0.0f) {
            for (float& v : frame.data) {
                v = std::clamp(v + (noise.next_uniform() * 2.0f - 1.0f) * spec.noise_amplitude,
                               0.0f, 1.0f);
            }
        }
        frames.push_back(std::move(frame));
    }
    return frames;
}

void write_frames(const std::vector<FrameTensor>& frames, const std::filesystem::path& path) {
    uint32_t h = 0, w = 0, c = 0;
    if (!frames.empty()) {
        h = static_cast<uint32_t>(frames[0].height);
        w = static_cast<uint32_t>(frames[0].width);
        c = static_cast<uint32_t>(frames[0].channels);
        for (const FrameTensor& f : frames)
            require(f.same_shape(frames[0]), "write_frames: frames must share one shape");
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("write_frames: cannot open " + path.string());
    os.write(kFrameMagic, 4);
    os.put(static_cast<char>(kFrameVersion));
    write_u32(os, static_cast<uint32_t>(frames.size()));
    write_u32(os, h);
    write_u32(os, w);
    write_u32(os, c);
    for (const FrameTensor& f : frames) {
        os.write(reinterpret_cast<const char*>(f.data.data()),
                 static_cast<std::streamsize>(f.data.size() * sizeof(float)));
    }
    if (!os) throw FormatError("write_frames: write failed for " + path.string());
}

std::vector<FrameTensor> read_frames(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("read_frames: cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kFrameMagic, 4) != 0)
        throw FormatError("read_frames: bad magic");
    const int version = is.get();
    if (version != kFrameVersion) throw FormatError("read_frames: unsupported version");
    const uint32_t count = read_u32(is);
    const uint32_t h = read_u32(is);
    const uint32_t w = read_u32(is);
    const uint32_t c = read_u32(is);
    const uint64_t per_frame = static_cast<uint64_t>(h) * w * c;
    if (count > 0 && (per_frame == 0 || per_frame > (1ULL << 31)))
        throw FormatError("read_frames: implausible frame dimensions");

    std::vector<FrameTensor> frames;
    frames.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        FrameTensor f(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
        is.read(reinterpret_cast<char*>(f.data.data()),
                static_cast<std::streamsize>(per_frame * sizeof(float)));
        if (!is) throw FormatError("read_frames: truncated payload");
        frames.push_back(std::move(f));
    }
    return frames;
}

}  // namespace kvreuse
