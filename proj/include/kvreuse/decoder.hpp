#pragma once

#include <filesystem>
#include <vector>

#include "kvreuse/common.hpp"
#include "kvreuse/patch.hpp"

namespace kvreuse {

struct ModelConfig {
    int num_layers = 4;
    int num_heads = 4;
    int model_dim = 64;
    int ffn_dim = 256;
    int vocab_size = 64;
    int max_seq_len = 4096;
    float rotary_base = 10000.0f;

    int head_dim() const { return model_dim / num_heads; }
    void validate() const;
};

/// Weights of one decoder layer. Projections are stored (in_dim x out_dim)
/// so a hidden row left-multiplies them.
struct LayerWeights {
    Matrix wq, wk, wv, wo;       // model_dim x model_dim
    std::vector<float> attn_norm;  // model_dim, RMSNorm scale
    Matrix w_up;                 // model_dim x ffn_dim
    Matrix w_down;               // ffn_dim x model_dim
    std::vector<float> ffn_norm;   // model_dim
};

/// Full parameter set: patch/text embedders, decoder stack, action head.
struct ModelWeights {
    ModelConfig config;
    int patch_dim = 0;           // flattened patch length the embedder accepts
    Matrix patch_embed;          // patch_dim x model_dim
    Matrix text_embed;           // vocab_size x model_dim
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm;  // model_dim
    Matrix action_head;          // model_dim x vocab_size

    static ModelWeights random(const ModelConfig& config, int patch_dim, uint64_t seed);
};

/// Weight container file. Layout: magic "VLAW", version byte, u32 LE fields
/// num_layers, num_heads, model_dim, ffn_dim, vocab_size, max_seq_len,
/// patch_dim, f32 LE rotary_base, then float32 LE matrices row-major in
/// order: patch_embed, text_embed, per layer (attn_norm, wq, wk, wv, wo,
/// ffn_norm, w_up, w_down), final_norm, action_head.
void write_weights(const ModelWeights& weights, const std::filesystem::path& path);
ModelWeights read_weights(const std::filesystem::path& path);

/// Embedded input for one frame step: vision tokens followed by text tokens,
/// contiguous with disjoint spans. Token index equals its position id.
struct TokenSequence {
    Matrix embeddings;  // length x model_dim
    int v_start = 0, v_end = 0;
    int t_start = 0, t_end = 0;

    int length() const { return embeddings.rows; }
    int vision_len() const { return v_end - v_start; }
    int text_len() const { return t_end - t_start; }
    void validate() const;
};

/// Projects patches through the patch embedder and looks text ids up in the
/// text embedding table.
TokenSequence build_sequence(const PatchGrid& grid, const ModelWeights& weights,
                             std::span<const int> text_ids);

/// Deterministic instruction token ids for an episode.
std::vector<int> make_text_ids(int text_len, int vocab_size, uint64_t seed);

/// Per-layer key/value store. Entries are addressed by position id; canonical
/// storage is ascending by position, but attention consumes position ids, not
/// storage order, so physically permuted caches attend identically.
class LayerKVCache {
public:
    LayerKVCache() = default;
    LayerKVCache(int num_heads, int head_dim) : num_heads_(num_heads), head_dim_(head_dim) {}

    int entry_dim() const { return num_heads_ * head_dim_; }
    int num_heads() const { return num_heads_; }
    int head_dim() const { return head_dim_; }
    size_t size() const { return positions_.size(); }
    bool empty() const { return positions_.empty(); }

    int position(size_t i) const { return positions_[i]; }
    int max_position() const;
    std::span<const float> key(size_t i) const;
    std::span<const float> value(size_t i) const;
    const std::vector<int>& positions() const { return positions_; }

    void append(int position, std::span<const float> key, std::span<const float> value);
    /// Restores canonical ascending order; throws on duplicate positions.
    void sort_by_position();
    bool ascending_positions() const;
    /// Index of the entry holding `position`, or -1.
    int find(int position) const;

    /// Physically reorders entries, keeping (position -> K,V) intact.
    void permute(std::span<const size_t> order);

private:
    int num_heads_ = 0;
    int head_dim_ = 0;
    std::vector<int> positions_;
    std::vector<float> keys_;    // size() x entry_dim
    std::vector<float> values_;  // size() x entry_dim
};

enum class TraceMode { None, TextQueries, Full };

/// Post-softmax attention weights captured during a forward pass. Rows exist
/// for the queries that actually ran (on reuse steps that is the recomputed
/// tokens only); each row spans all key positions [0, seq_len).
struct AttentionTrace {
    int num_heads = 0;
    int seq_len = 0;

    struct Layer {
        std::vector<int> query_positions;  // ascending
        std::vector<float> weights;        // [query][head][key position]
    };
    std::vector<Layer> layers;

    bool empty() const { return layers.empty(); }
    /// Row for (layer, query position, head); throws if the query was not traced.
    std::span<const float> row(int layer, int query_position, int head) const;
    bool has_query(int layer, int query_position) const;
};

struct PrefillResult {
    std::vector<float> logits;           // vocab_size, from the last token
    std::vector<LayerKVCache> caches;    // per layer, canonical order
    AttentionTrace trace;
};

/// Q = X Wq, K = X Wk, V = X Wv for a batch of hidden rows (no normalization).
struct QkvProjection {
    Matrix q, k, v;
};
QkvProjection project_qkv(const Matrix& hidden, const LayerWeights& layer);

/// Scaled dot-product attention over row matrices with an optional boolean
/// mask (true = key visible to that query). Single flat head.
struct AttentionResult {
    Matrix context;  // queries x value_dim
    Matrix weights;  // queries x keys, rows sum to 1 over visible keys
};
AttentionResult attention(const Matrix& q, const Matrix& k, const Matrix& v,
                          const Matrix* visibility, float scale);

/// Rotary embedding applied in place to one headed vector (num_heads *
/// head_dim) at the given position. head_dim must be even.
void apply_rotary(std::span<float> headed, int position, float base, int num_heads,
                  int head_dim);

/// Full causal forward pass over the whole sequence; fills caches and trace.
PrefillResult prefill_full(const TokenSequence& seq, const ModelWeights& weights,
                           TraceMode trace_mode);

/// One autoregressive step: appends exactly one K,V entry per layer and
/// returns logits for the new token. `position` must exceed every cached
/// position.
std::vector<float> decode_step(std::span<const float> embedding,
                               std::vector<LayerKVCache>& caches, int position,
                               const ModelWeights& weights);

namespace detail {

/// Shared forward kernel behind prefill_full, prefill_with_reuse, and
/// decode_step: rows are the tokens being recomputed, per-layer caches arrive
/// pre-seeded with any inherited entries, and `active_rows` (when non-null)
/// lists the row indices still recomputed at each layer (a token dropped at
/// layer l stays dropped afterwards; its later-layer K/V must already sit in
/// the caches).
struct ForwardRequest {
    const Matrix* rows = nullptr;
    const std::vector<int>* positions = nullptr;           // per row, ascending
    const std::vector<std::vector<int>>* active_rows = nullptr;  // per layer or null
    const ModelWeights* weights = nullptr;
    TraceMode trace_mode = TraceMode::None;
    int trace_seq_len = 0;   // key-axis length for trace rows
    int text_start = 0, text_end = 0;  // span used by TraceMode::TextQueries
};

struct ForwardResult {
    std::vector<float> logits;
    AttentionTrace trace;
};

ForwardResult run_forward(const ForwardRequest& req, std::vector<LayerKVCache>& caches);

}  // namespace detail

}  // namespace kvreuse
