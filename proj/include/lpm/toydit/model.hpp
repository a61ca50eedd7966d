#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lpm/kvcache/cache.hpp"
#include "lpm/latcore/checkpoint.hpp"
#include "lpm/latcore/tensor.hpp"
#include "lpm/ropekit/rope.hpp"
#include "lpm/toydit/config.hpp"

namespace lpm::dit {

enum class AudioStream { Speak, Listen };

// Even layers read the speaking stream, odd layers the listening stream.
inline AudioStream stream_for_layer(std::size_t layer) { return layer % 2 == 0 ? AudioStream::Speak : AudioStream::Listen; }

struct AudioBranchWeights {
    Tensor2D wk;  // d_cond x d_model
    Tensor2D wv;
};

struct BlockWeights {
    // AdaLN: silu(t_embed) * ada_w + ada_b -> shift/scale/gate for attention and FFN.
    Tensor2D ada_w;  // d_model x 6*d_model
    Tensor2D ada_b;  // 1 x 6*d_model
    Tensor2D norm_attn, norm_cross, norm_ffn, q_norm;  // 1 x d_model gains

    Tensor2D wq, wk, wv, wo;  // self-attention, d_model x d_model

    Tensor2D wq_cross;        // shared by text and audio cross-attention
    Tensor2D wk_txt, wv_txt;  // d_cond x d_model
    std::optional<AudioBranchWeights> speak;   // even layers only
    std::optional<AudioBranchWeights> listen;  // odd layers only
    Tensor2D wo_txt, wo_aud;  // split output projection, d_model x d_model

    Tensor2D w1;  // d_model x ffn
    Tensor2D w2;  // ffn x d_model
};

struct TimeEmbedWeights {
    Tensor2D w1, b1;  // d_time x d_model, 1 x d_model
    Tensor2D w2, b2;  // d_model x d_model, 1 x d_model
};

// Conditioning for one chunk. A muted (or empty) audio stream skips its
// branch entirely.
struct CondBundle {
    Tensor2D text_tokens;   // n_text x d_cond
    Tensor2D speak_audio;   // n_frames x d_cond
    Tensor2D listen_audio;  // n_frames x d_cond
    bool speak_muted = false;
    bool listen_muted = false;

    const Tensor2D& audio(AudioStream s) const { return s == AudioStream::Speak ? speak_audio : listen_audio; }
    bool muted(AudioStream s) const { return s == AudioStream::Speak ? speak_muted : listen_muted; }
    std::uint64_t hash() const;
};

struct RefSlot {
    rope::RefType type = rope::RefType::Expression;
    std::int64_t sub_index = 1;
    std::int64_t h = 0;
    std::int64_t w = 0;
};

// Identity reference tokens appended after the video tokens.
struct ReferenceSet {
    Tensor2D tokens;  // n_ref x d_model
    std::vector<RefSlot> slots;

    std::size_t size() const { return tokens.rows(); }
};

std::vector<rope::Position3> reference_positions(const ReferenceSet& refs, std::int64_t video_t_len,
                                                 const rope::SegmentOffsets& offsets);

// Contiguous rows that share a timestep and conditioning. cond == nullptr
// marks reference rows: timestep 0, no cross-attention.
struct RowGroup {
    std::size_t first_row = 0;
    std::size_t count = 0;
    float timestep = 0.0f;
    const CondBundle* cond = nullptr;
};

// Keys/values a layer sees besides its own rows: rotated history before,
// rotated references after. Column order: [prefix, own rows, suffix].
struct LayerContext {
    const Tensor2D* prefix_k = nullptr;
    const Tensor2D* prefix_v = nullptr;
    const Tensor2D* suffix_k = nullptr;
    const Tensor2D* suffix_v = nullptr;
};

struct BlockContext {
    std::span<const RowGroup> groups;
    std::span<const rope::Position3> positions;  // one per own row
    LayerContext kv;
    const BoolMask* mask = nullptr;  // own rows x (prefix + own + suffix)
};

struct CrossAttentionOutput {
    Tensor2D a_text;                  // rows x d_model, zero without text
    std::optional<Tensor2D> a_audio;  // absent when the layer's stream is muted
    Tensor2D out;                     // W_o^txt A_text + W_o^aud A_audio
};

struct BlockOutput {
    Tensor2D h;
    Tensor2D k_pre;  // own rows, before rotation
    Tensor2D v_pre;
    Tensor2D self_attn;  // attention output before W_o
    Tensor2D cross;      // cross-attention residual contribution
};

struct ForwardResult {
    Tensor2D out;
    std::vector<Tensor2D> k_pre;  // per layer
    std::vector<Tensor2D> v_pre;
    std::vector<Tensor2D> block_inputs;
    std::vector<Tensor2D> self_attn;
    std::vector<Tensor2D> cross;
};

// Rotated reference K/V for every layer.
struct ReferenceContext {
    std::vector<Tensor2D> k_rot;
    std::vector<Tensor2D> v;
    std::vector<rope::Position3> positions;
    ForwardResult forward;  // the reference-only pass that produced them
};

// Toy causal diffusion transformer. Latent width equals d_model and the
// prediction is the final residual stream (x0 parameterization), so a model
// with all-zero weights passes its input through unchanged.
class ToyDit {
public:
    explicit ToyDit(ModelConfig config);  // all-zero weights
    static ToyDit random(const ModelConfig& config, std::uint64_t seed, float gain = 1.0f);

    const ModelConfig& config() const { return config_; }
    std::vector<BlockWeights>& blocks() { return blocks_; }
    const std::vector<BlockWeights>& blocks() const { return blocks_; }
    TimeEmbedWeights& time_embed() { return time_; }
    rope::RopeParams rope_params() const { return rope::RopeParams::temporal(config_.head_dim(), config_.rope_base); }

    Tensor2D time_embedding(float t) const;  // 1 x d_model

    CrossAttentionOutput cross_attention(std::size_t layer, const Tensor2D& h_rows, const CondBundle& cond) const;
    BlockOutput forward_block(std::size_t layer, const Tensor2D& h, const BlockContext& ctx) const;

    // Runs every block. prefix/suffix vectors are per layer and may be null.
    ForwardResult forward(const Tensor2D& x, std::span<const RowGroup> groups,
                          std::span<const rope::Position3> positions, const std::vector<Tensor2D>* prefix_k,
                          const std::vector<Tensor2D>* prefix_v, const std::vector<Tensor2D>* suffix_k,
                          const std::vector<Tensor2D>* suffix_v, const BoolMask& mask) const;

    ReferenceContext reference_context(const ReferenceSet& refs, std::vector<rope::Position3> positions) const;

    // Uncached pass over chunks 0..n-1 with the chunk-causal mask; chunk c
    // token i sits at temporal position c * tokens_per_chunk + i.
    ForwardResult forward_full(std::span<const Tensor2D> chunks, std::span<const float> timesteps,
                               std::span<const CondBundle> conds, const ReferenceContext* refs) const;

    // One chunk against an assembled cache window.
    ForwardResult forward_cached(const Tensor2D& x, float timestep, const CondBundle& cond,
                                 const kv::AssembledWindow& window) const;

    Checkpoint to_checkpoint() const;
    static ToyDit from_checkpoint(const Checkpoint& ckpt);
    std::uint64_t weight_hash() const;

    void for_each_parameter(const std::function<void(const std::string&, Tensor2D&)>& fn);
    void for_each_parameter(const std::function<void(const std::string&, const Tensor2D&)>& fn) const;

private:
    ModelConfig config_;
    TimeEmbedWeights time_;
    std::vector<BlockWeights> blocks_;
};

// Multi-head scaled dot-product attention; mask may be null.
Tensor2D multi_head_attention(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v, std::size_t n_heads,
                              const BoolMask* mask);

// Per-layer pre-RoPE K/V of rows [first_row, first_row + count) as cache entries.
std::vector<kv::KvEntry> export_kv(const ForwardResult& result, std::int64_t chunk_index, kv::KvVariant variant,
                                   std::size_t first_row, std::size_t count);

}  // namespace lpm::dit
