#include "kvreuse/decoder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

namespace kvreuse {

namespace {

constexpr float kNormEps = 1e-5f;

void rmsnorm_row(std::span<const float> x, std::span<const float> scale, std::span<float> out) {
    double ss = 0.0;
    for (float v : x) ss += static_cast<double>(v) * v;
    const float inv = 1.0f / std::sqrt(static_cast<float>(ss / static_cast<double>(x.size())) +
                                       kNormEps);
    for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * scale[i];
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

void write_u32(std::ostream& os, uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw FormatError("weight file: truncated header");
    return v;
}

void write_f32(std::ostream& os, float v) { os.write(reinterpret_cast<const char*>(&v), 4); }

float read_f32(std::istream& is) {
    float v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw FormatError("weight file: truncated header");
    return v;
}

void write_matrix(std::ostream& os, const Matrix& m) {
    os.write(reinterpret_cast<const char*>(m.data.data()),
             static_cast<std::streamsize>(m.data.size() * sizeof(float)));
}

void read_matrix(std::istream& is, Matrix& m, int rows, int cols) {
    m = Matrix(rows, cols);
    is.read(reinterpret_cast<char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(float)));
    if (!is) throw FormatError("weight file: truncated matrix payload");
}

void write_vec(std::ostream& os, const std::vector<float>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(float)));
}

void read_vec(std::istream& is, std::vector<float>& v, size_t n) {
    v.assign(n, 0.0f);
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    if (!is) throw FormatError("weight file: truncated vector payload");
}

Matrix random_matrix(Rng& rng, int rows, int cols, float stddev) {
    Matrix m(rows, cols);
    for (float& v : m.data) v = rng.next_normal() * stddev;
    return m;
}

constexpr char kWeightMagic[4] = {'V', 'L', 'A', 'W'};
constexpr unsigned char kWeightVersion = 1;

}  // namespace

void ModelConfig::validate() const {
    require_config(num_layers >= 1 && num_heads >= 1 && model_dim >= 1 && ffn_dim >= 1 &&
                       vocab_size >= 1 && max_seq_len >= 1,
                   "model config: all counts must be >= 1");
    require_config(model_dim % num_heads == 0,
                   "model config: model_dim must be divisible by num_heads");
    require_config(rotary_base > 0.0f, "model config: rotary base must be positive");
}

ModelWeights ModelWeights::random(const ModelConfig& config, int patch_dim, uint64_t seed) {
    config.validate();
    require_config(patch_dim >= 1, "model weights: patch_dim must be >= 1");
    Rng rng(seed);
    const int d = config.model_dim;
    const float d_std = 1.0f / std::sqrt(static_cast<float>(d));

    ModelWeights w;
    w.config = config;
    w.patch_dim = patch_dim;
    w.patch_embed = random_matrix(rng, patch_dim, d, 1.0f / std::sqrt(static_cast<float>(patch_dim)));
    w.text_embed = random_matrix(rng, config.vocab_size, d, 0.5f);
    w.layers.resize(static_cast<size_t>(config.num_layers));
    for (LayerWeights& lw : w.layers) {
        lw.wq = random_matrix(rng, d, d, d_std);
        lw.wk = random_matrix(rng, d, d, d_std);
        lw.wv = random_matrix(rng, d, d, d_std);
        lw.wo = random_matrix(rng, d, d, d_std);
        lw.attn_norm.assign(static_cast<size_t>(d), 1.0f);
        lw.w_up = random_matrix(rng, d, config.ffn_dim, d_std);
        lw.w_down = random_matrix(rng, config.ffn_dim, d,
                                  1.0f / std::sqrt(static_cast<float>(config.ffn_dim)));
        lw.ffn_norm.assign(static_cast<size_t>(d), 1.0f);
    }
    w.final_norm.assign(static_cast<size_t>(d), 1.0f);
    w.action_head = random_matrix(rng, d, config.vocab_size, d_std);
    return w;
}

void write_weights(const ModelWeights& w, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("write_weights: cannot open " + path.string());
    os.write(kWeightMagic, 4);
    os.put(static_cast<char>(kWeightVersion));
    write_u32(os, static_cast<uint32_t>(w.config.num_layers));
    write_u32(os, static_cast<uint32_t>(w.config.num_heads));
    write_u32(os, static_cast<uint32_t>(w.config.model_dim));
    write_u32(os, static_cast<uint32_t>(w.config.ffn_dim));
    write_u32(os, static_cast<uint32_t>(w.config.vocab_size));
    write_u32(os, static_cast<uint32_t>(w.config.max_seq_len));
    write_u32(os, static_cast<uint32_t>(w.patch_dim));
    write_f32(os, w.config.rotary_base);
    write_matrix(os, w.patch_embed);
    write_matrix(os, w.text_embed);
    for (const LayerWeights& lw : w.layers) {
        write_vec(os, lw.attn_norm);
        write_matrix(os, lw.wq);
        write_matrix(os, lw.wk);
        write_matrix(os, lw.wv);
        write_matrix(os, lw.wo);
        write_vec(os, lw.ffn_norm);
        write_matrix(os, lw.w_up);
        write_matrix(os, lw.w_down);
    }
    write_vec(os, w.final_norm);
    write_matrix(os, w.action_head);
    if (!os) throw FormatError("write_weights: write failed for " + path.string());
}

ModelWeights read_weights(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("read_weights: cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kWeightMagic, 4) != 0)
        throw FormatError("read_weights: bad magic");
    if (is.get() != kWeightVersion) throw FormatError("read_weights: unsupported version");

    ModelWeights w;
    w.config.num_layers = static_cast<int>(read_u32(is));
    w.config.num_heads = static_cast<int>(read_u32(is));
    w.config.model_dim = static_cast<int>(read_u32(is));
    w.config.ffn_dim = static_cast<int>(read_u32(is));
    w.config.vocab_size = static_cast<int>(read_u32(is));
    w.config.max_seq_len = static_cast<int>(read_u32(is));
    w.patch_dim = static_cast<int>(read_u32(is));
    w.config.rotary_base = read_f32(is);
    try {
        w.config.validate();
        require_config(w.patch_dim >= 1, "read_weights: patch_dim must be >= 1");
    } catch (const ConfigError& e) {
        throw FormatError(std::string("read_weights: invalid header: ") + e.what());
    }

    const int d = w.config.model_dim;
    read_matrix(is, w.patch_embed, w.patch_dim, d);
    read_matrix(is, w.text_embed, w.config.vocab_size, d);
    w.layers.resize(static_cast<size_t>(w.config.num_layers));
    for (LayerWeights& lw : w.layers) {
        read_vec(is, lw.attn_norm, static_cast<size_t>(d));
        read_matrix(is, lw.wq, d, d);
        read_matrix(is, lw.wk, d, d);
        read_matrix(is, lw.wv, d, d);
        read_matrix(is, lw.wo, d, d);
        read_vec(is, lw.ffn_norm, static_cast<size_t>(d));
        read_matrix(is, lw.w_up, d, w.config.ffn_dim);
        read_matrix(is, lw.w_down, w.config.ffn_dim, d);
    }
    read_vec(is, w.final_norm, static_cast<size_t>(d));
    read_matrix(is, w.action_head, d, w.config.vocab_size);
    return w;
}

void TokenSequence::validate() const {
    require(v_start == 0, "token sequence: vision span must start at 0");
    require(v_end >= v_start, "token sequence: negative vision span");
    require(t_start == v_end, "token sequence: text must directly follow vision");
    require(t_end >= t_start, "token sequence: negative text span");
    require(t_end == embeddings.rows, "token sequence: spans must cover the sequence");
}

TokenSequence build_sequence(const PatchGrid& grid, const ModelWeights& weights,
                             std::span<const int> text_ids) {
    require(grid.patch_len() == weights.patch_dim,
            "build_sequence: patch length does not match the embedder");
    const int d = weights.config.model_dim;
    const int lv = grid.count();
    const int lt = static_cast<int>(text_ids.size());
    require(lv + lt <= weights.config.max_seq_len, "build_sequence: sequence too long");

    TokenSequence seq;
    seq.embeddings = Matrix(lv + lt, d);
    for (int i = 0; i < lv; ++i)
        matvec_accumulate(grid.patch_at(i), weights.patch_embed, seq.embeddings.row_span(i));
    for (int i = 0; i < lt; ++i) {
        require(text_ids[i] >= 0 && text_ids[i] < weights.config.vocab_size,
                "build_sequence: text id out of vocabulary");
        std::copy_n(weights.text_embed.row(text_ids[i]), d, seq.embeddings.row(lv + i));
    }
    seq.v_start = 0;
    seq.v_end = lv;
    seq.t_start = lv;
    seq.t_end = lv + lt;
    return seq;
}

std::vector<int> make_text_ids(int text_len, int vocab_size, uint64_t seed) {
    require(text_len >= 0 && vocab_size >= 1, "make_text_ids: bad arguments");
    Rng rng(derive_seed(seed, 29));
    std::vector<int> ids(static_cast<size_t>(text_len));
    for (int& id : ids) id = rng.next_int(0, vocab_size - 1);
    return ids;
}

int LayerKVCache::max_position() const {
    int m = -1;
    for (int p : positions_) m = std::max(m, p);
    return m;
}

std::span<const float> LayerKVCache::key(size_t i) const {
    return {keys_.data() + i * static_cast<size_t>(entry_dim()),
            static_cast<size_t>(entry_dim())};
}

std::span<const float> LayerKVCache::value(size_t i) const {
    return {values_.data() + i * static_cast<size_t>(entry_dim()),
            static_cast<size_t>(entry_dim())};
}

void LayerKVCache::append(int position, std::span<const float> key,
                          std::span<const float> value) {
    require(static_cast<int>(key.size()) == entry_dim() &&
                static_cast<int>(value.size()) == entry_dim(),
            "kv cache: entry width mismatch");
    positions_.push_back(position);
    keys_.insert(keys_.end(), key.begin(), key.end());
    values_.insert(values_.end(), value.begin(), value.end());
}

void LayerKVCache::sort_by_position() {
    std::vector<size_t> order(positions_.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return positions_[a] < positions_[b]; });
    permute(order);
    for (size_t i = 1; i < positions_.size(); ++i)
        require(positions_[i - 1] < positions_[i], "kv cache: duplicate position after merge");
}

bool LayerKVCache::ascending_positions() const {
    for (size_t i = 1; i < positions_.size(); ++i)
        if (positions_[i - 1] >= positions_[i]) return false;
    return true;
}

int LayerKVCache::find(int position) const {
    for (size_t i = 0; i < positions_.size(); ++i)
        if (positions_[i] == position) return static_cast<int>(i);
    return -1;
}

void LayerKVCache::permute(std::span<const size_t> order) {
    require(order.size() == positions_.size(), "kv cache: permutation size mismatch");
    const size_t ed = static_cast<size_t>(entry_dim());
    std::vector<int> np(positions_.size());
    std::vector<float> nk(keys_.size()), nv(values_.size());
    for (size_t i = 0; i < order.size(); ++i) {
        np[i] = positions_[order[i]];
        std::copy_n(keys_.begin() + static_cast<ptrdiff_t>(order[i] * ed), ed,
                    nk.begin() + static_cast<ptrdiff_t>(i * ed));
        std::copy_n(values_.begin() + static_cast<ptrdiff_t>(order[i] * ed), ed,
                    nv.begin() + static_cast<ptrdiff_t>(i * ed));
    }
    positions_ = std::move(np);
    keys_ = std::move(nk);
    values_ = std::move(nv);
}

std::span<const float> AttentionTrace::row(int layer, int query_position, int head) const {
    require(layer >= 0 && layer < static_cast<int>(layers.size()),
            "attention trace: layer out of range");
    require(head >= 0 && head < num_heads, "attention trace: head out of range");
    const Layer& l = layers[static_cast<size_t>(layer)];
    const auto it =
        std::lower_bound(l.query_positions.begin(), l.query_positions.end(), query_position);
    require(it != l.query_positions.end() && *it == query_position,
            "attention trace: query position was not traced");
    const size_t q = static_cast<size_t>(it - l.query_positions.begin());
    const size_t stride = static_cast<size_t>(num_heads) * seq_len;
    return {l.weights.data() + q * stride + static_cast<size_t>(head) * seq_len,
            static_cast<size_t>(seq_len)};
}

bool AttentionTrace::has_query(int layer, int query_position) const {
    if (layer < 0 || layer >= static_cast<int>(layers.size())) return false;
    const Layer& l = layers[static_cast<size_t>(layer)];
    return std::binary_search(l.query_positions.begin(), l.query_positions.end(),
                              query_position);
}

QkvProjection project_qkv(const Matrix& hidden, const LayerWeights& layer) {
    require(hidden.cols == layer.wq.rows, "project_qkv: hidden dim mismatch");
    QkvProjection out;
    matmul(hidden, layer.wq, out.q);
    matmul(hidden, layer.wk, out.k);
    matmul(hidden, layer.wv, out.v);
    return out;
}

AttentionResult attention(const Matrix& q, const Matrix& k, const Matrix& v,
                          const Matrix* visibility, float scale) {
    require(k.rows > 0, "attention: empty key set");
    require(k.rows == v.rows, "attention: key/value counts differ");
    require(q.cols == k.cols, "attention: query/key dims differ");
    if (visibility)
        require(visibility->rows == q.rows && visibility->cols == k.rows,
                "attention: mask dims inconsistent");

    AttentionResult out;
    out.context = Matrix(q.rows, v.cols);
    out.weights = Matrix(q.rows, k.rows);
    std::vector<float> logits(static_cast<size_t>(k.rows));
    for (int i = 0; i < q.rows; ++i) {
        float mx = -std::numeric_limits<float>::infinity();
        int visible = 0;
        for (int j = 0; j < k.rows; ++j) {
            if (visibility && visibility->at(i, j) == 0.0f) continue;
            double dot = 0.0;
            for (int n = 0; n < q.cols; ++n)
                dot += static_cast<double>(q.at(i, n)) * k.at(j, n);
            logits[static_cast<size_t>(j)] = static_cast<float>(dot) * scale;
            mx = std::max(mx, logits[static_cast<size_t>(j)]);
            ++visible;
        }
        require(visible > 0, "attention: query with no visible keys");
        float sum = 0.0f;
        for (int j = 0; j < k.rows; ++j) {
            if (visibility && visibility->at(i, j) == 0.0f) continue;
            sum += std::exp(logits[static_cast<size_t>(j)] - mx);
        }
        for (int j = 0; j < k.rows; ++j) {
            if (visibility && visibility->at(i, j) == 0.0f) continue;
            const float w = std::exp(logits[static_cast<size_t>(j)] - mx) / sum;
            out.weights.at(i, j) = w;
            for (int n = 0; n < v.cols; ++n) out.context.at(i, n) += w * v.at(j, n);
        }
    }
    return out;
}

void apply_rotary(std::span<float> headed, int position, float base, int num_heads,
                  int head_dim) {
    require_config(head_dim % 2 == 0, "rotary: head_dim must be even");
    require(static_cast<int>(headed.size()) == num_heads * head_dim,
            "rotary: vector length mismatch");
    const int half = head_dim / 2;
    for (int h = 0; h < num_heads; ++h) {
        float* x = headed.data() + static_cast<size_t>(h) * head_dim;
        for (int i = 0; i < half; ++i) {
            const float freq =
                std::pow(base, -2.0f * static_cast<float>(i) / static_cast<float>(head_dim));
            const float angle = static_cast<float>(position) * freq;
            const float c = std::cos(angle), s = std::sin(angle);
            const float x1 = x[i], x2 = x[i + half];
            x[i] = x1 * c - x2 * s;
            x[i + half] = x2 * c + x1 * s;
        }
    }
}

namespace detail {

ForwardResult run_forward(const ForwardRequest& req, std::vector<LayerKVCache>& caches) {
    const ModelWeights& w = *req.weights;
    const ModelConfig& cfg = w.config;
    const Matrix& rows = *req.rows;
    const std::vector<int>& positions = *req.positions;

    require(rows.rows == static_cast<int>(positions.size()),
            "forward: row/position count mismatch");
    require(rows.cols == cfg.model_dim, "forward: embedding dim mismatch");
    require(static_cast<int>(caches.size()) == cfg.num_layers,
            "forward: cache count must equal layer count");
    for (size_t i = 1; i < positions.size(); ++i)
        require(positions[i - 1] < positions[i], "forward: positions must be ascending");
    if (req.active_rows)
        require(static_cast<int>(req.active_rows->size()) == cfg.num_layers,
                "forward: active row lists must cover every layer");

    const int heads = cfg.num_heads;
    const int dh = cfg.head_dim();
    const int d = cfg.model_dim;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    ForwardResult out;
    if (req.trace_mode != TraceMode::None) {
        out.trace.num_heads = heads;
        out.trace.seq_len = req.trace_seq_len;
        out.trace.layers.resize(static_cast<size_t>(cfg.num_layers));
    }

    // Rows still being recomputed; shrinks monotonically across layers.
    std::vector<int> cur(static_cast<size_t>(rows.rows));
    std::iota(cur.begin(), cur.end(), 0);
    Matrix h = rows;

    Matrix xn, q, k, v;
    std::vector<float> ctx(static_cast<size_t>(d));
    std::vector<float> up(static_cast<size_t>(cfg.ffn_dim));
    std::vector<float> xrow(static_cast<size_t>(d));

    for (int l = 0; l < cfg.num_layers; ++l) {
        if (req.active_rows) {
            const std::vector<int>& target = (*req.active_rows)[static_cast<size_t>(l)];
            if (target.size() != cur.size()) {
                // Keep only rows whose token stays active; activity may only shrink.
                Matrix nh(static_cast<int>(target.size()), d);
                size_t ci = 0;
                for (size_t ti = 0; ti < target.size(); ++ti) {
                    while (ci < cur.size() && cur[ci] < target[ti]) ++ci;
                    require(ci < cur.size() && cur[ci] == target[ti],
                            "forward: a token skipped at an earlier layer cannot rejoin");
                    std::copy_n(h.row(static_cast<int>(ci)), d, nh.row(static_cast<int>(ti)));
                    ++ci;
                }
                h = std::move(nh);
                cur = target;
            } else {
                require(cur == target, "forward: active rows must be nested across layers");
            }
        }
        const int n = static_cast<int>(cur.size());
        require(n > 0, "forward: no active tokens at a layer");

        const LayerWeights& lw = w.layers[static_cast<size_t>(l)];
        LayerKVCache& cache = caches[static_cast<size_t>(l)];
        require(cache.num_heads() == heads && cache.head_dim() == dh,
                "forward: cache geometry mismatch");

        xn = Matrix(n, d);
        for (int r = 0; r < n; ++r)
            rmsnorm_row(h.row_span(r), lw.attn_norm, xn.row_span(r));
        matmul(xn, lw.wq, q);
        matmul(xn, lw.wk, k);
        matmul(xn, lw.wv, v);
        for (int r = 0; r < n; ++r) {
            const int pos = positions[static_cast<size_t>(cur[static_cast<size_t>(r)])];
            apply_rotary(q.row_span(r), pos, cfg.rotary_base, heads, dh);
            apply_rotary(k.row_span(r), pos, cfg.rotary_base, heads, dh);
        }
        for (int r = 0; r < n; ++r) {
            const int pos = positions[static_cast<size_t>(cur[static_cast<size_t>(r)])];
            cache.append(pos, k.row_span(r), v.row_span(r));
        }

        const size_t entries = cache.size();
        std::vector<float> logits(entries);

        AttentionTrace::Layer* tl = nullptr;
        if (req.trace_mode != TraceMode::None)
            tl = &out.trace.layers[static_cast<size_t>(l)];

        Matrix attn_out(n, d);
        for (int r = 0; r < n; ++r) {
            const int qpos = positions[static_cast<size_t>(cur[static_cast<size_t>(r)])];
            const bool traced =
                tl != nullptr &&
                (req.trace_mode == TraceMode::Full ||
                 (qpos >= req.text_start && qpos < req.text_end));
            float* trow = nullptr;
            if (traced) {
                tl->query_positions.push_back(qpos);
                const size_t stride =
                    static_cast<size_t>(heads) * static_cast<size_t>(req.trace_seq_len);
                tl->weights.resize(tl->weights.size() + stride, 0.0f);
                trow = tl->weights.data() + tl->weights.size() - stride;
            }
            std::fill(ctx.begin(), ctx.end(), 0.0f);
            for (int head = 0; head < heads; ++head) {
                const float* qh = q.row(r) + static_cast<size_t>(head) * dh;
                float mx = -std::numeric_limits<float>::infinity();
                bool any = false;
                for (size_t j = 0; j < entries; ++j) {
                    if (cache.position(j) > qpos) continue;  // causality by position id
                    const float* kh = cache.key(j).data() + static_cast<size_t>(head) * dh;
                    float dot = 0.0f;
                    for (int t = 0; t < dh; ++t) dot += qh[t] * kh[t];
                    logits[j] = dot * scale;
                    mx = std::max(mx, logits[j]);
                    any = true;
                }
                require(any, "forward: query attends to no keys");
                float sum = 0.0f;
                for (size_t j = 0; j < entries; ++j) {
                    if (cache.position(j) > qpos) continue;
                    sum += std::exp(logits[j] - mx);
                }
                float* ch = ctx.data() + static_cast<size_t>(head) * dh;
                for (size_t j = 0; j < entries; ++j) {
                    if (cache.position(j) > qpos) continue;
                    const float weight = std::exp(logits[j] - mx) / sum;
                    const float* vh = cache.value(j).data() + static_cast<size_t>(head) * dh;
                    for (int t = 0; t < dh; ++t) ch[t] += weight * vh[t];
                    if (trow)
                        trow[static_cast<size_t>(head) * req.trace_seq_len +
                             static_cast<size_t>(cache.position(j))] = weight;
                }
            }
            matvec_accumulate(ctx, lw.wo, attn_out.row_span(r));
        }
        for (int r = 0; r < n; ++r) {
            float* hr = h.row(r);
            const float* ar = attn_out.row(r);
            for (int t = 0; t < d; ++t) hr[t] += ar[t];
        }

        for (int r = 0; r < n; ++r) {
            rmsnorm_row(h.row_span(r), lw.ffn_norm, xrow);
            std::fill(up.begin(), up.end(), 0.0f);
            matvec_accumulate(xrow, lw.w_up, up);
            for (float& u : up) u = silu(u);
            std::fill(xrow.begin(), xrow.end(), 0.0f);
            matvec_accumulate(up, lw.w_down, xrow);
            float* hr = h.row(r);
            for (int t = 0; t < d; ++t) hr[t] += xrow[t];
        }
    }

    // Action logits come from the highest-position surviving row (the
    // sequence tail; rows and cur are both ascending).
    rmsnorm_row(h.row_span(h.rows - 1), w.final_norm, xrow);
    out.logits.assign(static_cast<size_t>(cfg.vocab_size), 0.0f);
    matvec_accumulate(xrow, w.action_head, out.logits);
    return out;
}

}  // namespace detail

PrefillResult prefill_full(const TokenSequence& seq, const ModelWeights& weights,
                           TraceMode trace_mode) {
    weights.config.validate();
    seq.validate();
    require(seq.length() >= 1, "prefill: empty sequence");
    require(seq.length() <= weights.config.max_seq_len, "prefill: sequence too long");

    std::vector<LayerKVCache> caches(
        static_cast<size_t>(weights.config.num_layers),
        LayerKVCache(weights.config.num_heads, weights.config.head_dim()));
    std::vector<int> positions(static_cast<size_t>(seq.length()));
    std::iota(positions.begin(), positions.end(), 0);

    detail::ForwardRequest req;
    req.rows = &seq.embeddings;
    req.positions = &positions;
    req.weights = &weights;
    req.trace_mode = trace_mode;
    req.trace_seq_len = seq.length();
    req.text_start = seq.t_start;
    req.text_end = seq.t_end;

    detail::ForwardResult r = detail::run_forward(req, caches);
    return {std::move(r.logits), std::move(caches), std::move(r.trace)};
}

std::vector<float> decode_step(std::span<const float> embedding,
                               std::vector<LayerKVCache>& caches, int position,
                               const ModelWeights& weights) {
    require(static_cast<int>(caches.size()) == weights.config.num_layers,
            "decode_step: cache count mismatch");
    for (const LayerKVCache& c : caches)
        require(position > c.max_position(),
                "decode_step: position must exceed all cached positions");
    require(position < weights.config.max_seq_len, "decode_step: position beyond max_seq_len");

    Matrix rows(1, weights.config.model_dim);
    require(embedding.size() == static_cast<size_t>(weights.config.model_dim),
            "decode_step: embedding dim mismatch");
    std::copy(embedding.begin(), embedding.end(), rows.row(0));
    std::vector<int> positions{position};

    detail::ForwardRequest req;
    req.rows = &rows;
    req.positions = &positions;
    req.weights = &weights;
    req.trace_mode = TraceMode::None;
    req.trace_seq_len = position + 1;

    return detail::run_forward(req, caches).logits;
}

}  // namespace kvreuse
