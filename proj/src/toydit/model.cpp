#include "lpm/toydit/model.hpp"

#include <cmath>
#include <random>

#include "lpm/latcore/errors.hpp"
#include "lpm/latcore/latent.hpp"
#include "lpm/latcore/ops.hpp"
#include "lpm/maskgen/masks.hpp"

namespace lpm::dit {

std::uint64_t CondBundle::hash() const {
    std::uint64_t h = hash_tensor(text_tokens);
    h = hash_tensor(speak_audio, h);
    h = hash_tensor(listen_audio, h);
    h = hash_bytes(speak_muted ? "S1" : "S0", h);
    return hash_bytes(listen_muted ? "L1" : "L0", h);
}

std::vector<rope::Position3> reference_positions(const ReferenceSet& refs, std::int64_t video_t_len,
                                                 const rope::SegmentOffsets& offsets) {
    if (refs.slots.size() != refs.size()) throw ShapeError("reference set: one slot per token required");
    std::vector<rope::Position3> out;
    out.reserve(refs.slots.size());
    for (const auto& s : refs.slots) out.push_back(rope::ref_position(video_t_len, s.type, s.sub_index, offsets, s.h, s.w));
    return out;
}

Tensor2D multi_head_attention(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v, std::size_t n_heads,
                              const BoolMask* mask) {
    Tensor2D out(q.rows(), q.cols());
    if (k.rows() == 0 || q.rows() == 0) return out;
    if (k.cols() != q.cols() || v.rows() != k.rows()) throw ShapeError("attention: q/k/v shape mismatch");
    const std::size_t hd = q.cols() / n_heads;
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
    for (std::size_t h = 0; h < n_heads; ++h) {
        const Tensor2D qh = q.slice_cols(h * hd, hd);
        const Tensor2D kh = k.slice_cols(h * hd, hd);
        const Tensor2D vh = v.slice_cols(h * hd, hd);
        const Tensor2D probs = softmax_rows(scale(matmul_bt(qh, kh), inv_sqrt), mask);
        out.set_cols(h * hd, matmul(probs, vh));
    }
    return out;
}

namespace {

Tensor2D zeros_like_rows(std::size_t rows, std::size_t cols) { return Tensor2D(rows, cols); }

// rmsnorm(h) * (1 + scale) + shift, with per-row modulation.
Tensor2D modulate(const Tensor2D& h, const Tensor2D& gain, const Tensor2D& shift, const Tensor2D& scl) {
    Tensor2D out = rmsnorm_rows(h, gain.values());
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto o = out.row(r);
        auto sh = shift.row(r);
        auto sc = scl.row(r);
        for (std::size_t c = 0; c < o.size(); ++c) o[c] = o[c] * (1.0f + sc[c]) + sh[c];
    }
    return out;
}

void add_gated(Tensor2D& h, const Tensor2D& gate, const Tensor2D& update) {
    for (std::size_t r = 0; r < h.rows(); ++r) {
        auto o = h.row(r);
        auto g = gate.row(r);
        auto u = update.row(r);
        for (std::size_t c = 0; c < o.size(); ++c) o[c] += g[c] * u[c];
    }
}

Tensor2D add_bias(Tensor2D m, const Tensor2D& bias) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto o = m.row(r);
        auto b = bias.row(0);
        for (std::size_t c = 0; c < o.size(); ++c) o[c] += b[c];
    }
    return m;
}

Tensor2D apply_silu(Tensor2D m) {
    for (float& v : m.values()) v = silu(v);
    return m;
}

Tensor2D stack3(const Tensor2D* a, const Tensor2D& b, const Tensor2D* c) {
    std::vector<Tensor2D> parts;
    if (a != nullptr) parts.push_back(*a);
    parts.push_back(b);
    if (c != nullptr) parts.push_back(*c);
    return vstack(parts);
}

BlockWeights zero_block(const ModelConfig& c, std::size_t layer) {
    const std::size_t d = c.d_model;
    BlockWeights b;
    b.ada_w = Tensor2D(d, 6 * d);
    b.ada_b = Tensor2D(1, 6 * d);
    b.norm_attn = Tensor2D(1, d);
    b.norm_cross = Tensor2D(1, d);
    b.norm_ffn = Tensor2D(1, d);
    b.q_norm = Tensor2D(1, d);
    b.wq = b.wk = b.wv = b.wo = Tensor2D(d, d);
    b.wq_cross = Tensor2D(d, d);
    b.wk_txt = b.wv_txt = Tensor2D(c.d_cond, d);
    AudioBranchWeights branch{Tensor2D(c.d_cond, d), Tensor2D(c.d_cond, d)};
    if (stream_for_layer(layer) == AudioStream::Speak) {
        b.speak = branch;
    } else {
        b.listen = branch;
    }
    b.wo_txt = b.wo_aud = Tensor2D(d, d);
    b.w1 = Tensor2D(d, c.ffn_mult * d);
    b.w2 = Tensor2D(c.ffn_mult * d, d);
    return b;
}

}  // namespace

ToyDit::ToyDit(ModelConfig config) : config_(config) {
    config_.validate();
    const std::size_t d = config_.d_model;
    time_ = {Tensor2D(config_.d_time, d), Tensor2D(1, d), Tensor2D(d, d), Tensor2D(1, d)};
    for (std::size_t l = 0; l < config_.n_layers; ++l) blocks_.push_back(zero_block(config_, l));
}

ToyDit ToyDit::random(const ModelConfig& config, std::uint64_t seed, float gain) {
    ToyDit model(config);
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    model.for_each_parameter([&](const std::string& name, Tensor2D& t) {
        const bool is_gain = name.find("norm") != std::string::npos;
        const bool is_bias = name.ends_with("_b") || name.ends_with(".b1") || name.ends_with(".b2");
        if (is_gain) {
            for (float& v : t.values()) v = 1.0f;
        } else if (!is_bias) {
            const float std = gain / std::sqrt(static_cast<float>(t.rows()));
            for (float& v : t.values()) v = std * normal(rng);
        }
    });
    return model;
}

Tensor2D ToyDit::time_embedding(float t) const {
    const std::size_t half = config_.d_time / 2;
    Tensor2D feat(1, config_.d_time);
    for (std::size_t k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
        const double arg = static_cast<double>(t) * 1000.0 * freq;
        feat(0, k) = static_cast<float>(std::cos(arg));
        feat(0, half + k) = static_cast<float>(std::sin(arg));
    }
    Tensor2D hidden = apply_silu(add_bias(matmul(feat, time_.w1), time_.b1));
    return add_bias(matmul(hidden, time_.w2), time_.b2);
}

CrossAttentionOutput ToyDit::cross_attention(std::size_t layer, const Tensor2D& h_rows, const CondBundle& cond) const {
    const auto& bw = blocks_.at(layer);
    const AudioStream stream = stream_for_layer(layer);
    const auto& branch = stream == AudioStream::Speak ? bw.speak : bw.listen;
    if (!branch) {
        throw ContractError("cross_attention: layer " + std::to_string(layer) + " lacks its " +
                            (stream == AudioStream::Speak ? "speak" : "listen") + " branch weights");
    }

    const Tensor2D hc = rmsnorm_rows(h_rows, bw.norm_cross.values());
    const Tensor2D qc = rmsnorm_rows(matmul(hc, bw.wq_cross), bw.q_norm.values());

    CrossAttentionOutput out;
    if (cond.text_tokens.rows() > 0) {
        out.a_text = multi_head_attention(qc, matmul(cond.text_tokens, bw.wk_txt), matmul(cond.text_tokens, bw.wv_txt),
                                          config_.n_heads, nullptr);
    } else {
        out.a_text = zeros_like_rows(h_rows.rows(), config_.d_model);
    }

    const Tensor2D& audio = cond.audio(stream);
    if (!cond.muted(stream) && audio.rows() > 0) {
        const double window = stream == AudioStream::Speak ? config_.audio.speak_window : config_.audio.listen_window;
        const BoolMask amask =
            mask::audio_window_mask(h_rows.rows(), static_cast<double>(config_.tokens_per_chunk), audio.rows(),
                                    config_.audio_fps, window, -config_.audio_history_s);
        out.a_audio = multi_head_attention(qc, matmul(audio, branch->wk), matmul(audio, branch->wv), config_.n_heads,
                                           &amask);
    }

    out.out = matmul(out.a_text, bw.wo_txt);
    if (out.a_audio) add_inplace(out.out, matmul(*out.a_audio, bw.wo_aud));
    return out;
}

BlockOutput ToyDit::forward_block(std::size_t layer, const Tensor2D& h, const BlockContext& ctx) const {
    const auto& bw = blocks_.at(layer);
    const std::size_t n = h.rows();
    const std::size_t d = config_.d_model;
    if (h.cols() != d) throw ShapeError("forward_block: token width != d_model");
    if (ctx.positions.size() != n) throw ShapeError("forward_block: positions != rows");
    if (ctx.mask == nullptr) throw ContractError("forward_block: mask required");

    Tensor2D shift1(n, d), scale1(n, d), gate1(n, d), shift2(n, d), scale2(n, d), gate2(n, d);
    for (const auto& g : ctx.groups) {
        if (g.first_row + g.count > n) throw ShapeError("forward_block: row group out of range");
        const Tensor2D ada = add_bias(matmul(apply_silu(time_embedding(g.timestep)), bw.ada_w), bw.ada_b);
        Tensor2D* parts[6] = {&shift1, &scale1, &gate1, &shift2, &scale2, &gate2};
        for (std::size_t r = g.first_row; r < g.first_row + g.count; ++r) {
            for (std::size_t p = 0; p < 6; ++p) {
                auto dst = parts[p]->row(r);
                for (std::size_t c = 0; c < d; ++c) dst[c] = ada(0, p * d + c);
            }
        }
    }

    BlockOutput out;
    const Tensor2D hn = modulate(h, bw.norm_attn, shift1, scale1);
    const Tensor2D q = matmul(hn, bw.wq);
    out.k_pre = matmul(hn, bw.wk);
    out.v_pre = matmul(hn, bw.wv);
    const auto rp = rope_params();
    const Tensor2D q_rot = rope::apply_rope(q, ctx.positions, rp);
    const Tensor2D k_rot = rope::apply_rope(out.k_pre, ctx.positions, rp);

    const Tensor2D keys = stack3(ctx.kv.prefix_k, k_rot, ctx.kv.suffix_k);
    const Tensor2D values = stack3(ctx.kv.prefix_v, out.v_pre, ctx.kv.suffix_v);
    if (ctx.mask->rows() != n || ctx.mask->cols() != keys.rows()) {
        throw ShapeError("forward_block: mask is " + std::to_string(ctx.mask->rows()) + "x" +
                         std::to_string(ctx.mask->cols()) + ", expected " + std::to_string(n) + "x" +
                         std::to_string(keys.rows()));
    }
    out.self_attn = multi_head_attention(q_rot, keys, values, config_.n_heads, ctx.mask);

    out.h = h;
    add_gated(out.h, gate1, matmul(out.self_attn, bw.wo));

    out.cross = Tensor2D(n, d);
    for (const auto& g : ctx.groups) {
        if (g.cond == nullptr) continue;
        const auto cross = cross_attention(layer, out.h.slice_rows(g.first_row, g.count), *g.cond);
        for (std::size_t r = 0; r < g.count; ++r) {
            auto dst = out.cross.row(g.first_row + r);
            auto src = cross.out.row(r);
            std::copy(src.begin(), src.end(), dst.begin());
        }
    }
    add_inplace(out.h, out.cross);

    const Tensor2D hf = modulate(out.h, bw.norm_ffn, shift2, scale2);
    add_gated(out.h, gate2, matmul(apply_silu(matmul(hf, bw.w1)), bw.w2));
    return out;
}

ForwardResult ToyDit::forward(const Tensor2D& x, std::span<const RowGroup> groups,
                              std::span<const rope::Position3> positions, const std::vector<Tensor2D>* prefix_k,
                              const std::vector<Tensor2D>* prefix_v, const std::vector<Tensor2D>* suffix_k,
                              const std::vector<Tensor2D>* suffix_v, const BoolMask& mask) const {
    auto layer_ptr = [](const std::vector<Tensor2D>* v, std::size_t l) -> const Tensor2D* {
        if (v == nullptr || l >= v->size() || (*v)[l].rows() == 0) return nullptr;
        return &(*v)[l];
    };
    ForwardResult res;
    Tensor2D h = x;
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        BlockContext ctx{groups, positions,
                         LayerContext{layer_ptr(prefix_k, l), layer_ptr(prefix_v, l), layer_ptr(suffix_k, l),
                                      layer_ptr(suffix_v, l)},
                         &mask};
        res.block_inputs.push_back(h);
        BlockOutput b = forward_block(l, h, ctx);
        res.k_pre.push_back(std::move(b.k_pre));
        res.v_pre.push_back(std::move(b.v_pre));
        res.self_attn.push_back(std::move(b.self_attn));
        res.cross.push_back(std::move(b.cross));
        h = std::move(b.h);
    }
    res.out = std::move(h);
    return res;
}

ReferenceContext ToyDit::reference_context(const ReferenceSet& refs, std::vector<rope::Position3> positions) const {
    ReferenceContext ctx;
    ctx.positions = std::move(positions);
    if (refs.size() == 0) {
        ctx.k_rot.assign(config_.n_layers, Tensor2D());
        ctx.v.assign(config_.n_layers, Tensor2D());
        return ctx;
    }
    if (ctx.positions.size() != refs.size()) throw ShapeError("reference_context: positions != tokens");
    const RowGroup group{0, refs.size(), 0.0f, nullptr};
    const BoolMask all(refs.size(), refs.size(), true);
    ctx.forward = forward(refs.tokens, std::span(&group, 1), ctx.positions, nullptr, nullptr, nullptr, nullptr, all);
    const auto rp = rope_params();
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        ctx.k_rot.push_back(rope::apply_rope(ctx.forward.k_pre[l], ctx.positions, rp));
        ctx.v.push_back(ctx.forward.v_pre[l]);
    }
    return ctx;
}

ForwardResult ToyDit::forward_full(std::span<const Tensor2D> chunks, std::span<const float> timesteps,
                                   std::span<const CondBundle> conds, const ReferenceContext* refs) const {
    const std::size_t n = chunks.size();
    const std::size_t tpc = config_.tokens_per_chunk;
    if (n == 0) throw ContractError("forward_full: no chunks");
    if (timesteps.size() != n) throw ShapeError("forward_full: one timestep per chunk required");
    if (conds.size() != n && conds.size() != 1) throw ShapeError("forward_full: conds must be per chunk or shared");

    std::vector<RowGroup> groups;
    std::vector<rope::Position3> positions;
    for (std::size_t c = 0; c < n; ++c) {
        if (chunks[c].rows() != tpc) throw ShapeError("forward_full: chunk rows != tokens_per_chunk");
        groups.push_back({c * tpc, tpc, timesteps[c], &conds[conds.size() == 1 ? 0 : c]});
        for (std::size_t i = 0; i < tpc; ++i) positions.push_back({static_cast<std::int64_t>(c * tpc + i), 0, 0});
    }
    const std::size_t n_ref = refs != nullptr ? refs->positions.size() : 0;
    const BoolMask mask = mask::chunk_causal_mask(n, tpc, n_ref).slice_rows(0, n * tpc);
    return forward(vstack(chunks), groups, positions, nullptr, nullptr, refs ? &refs->k_rot : nullptr,
                   refs ? &refs->v : nullptr, mask);
}

ForwardResult ToyDit::forward_cached(const Tensor2D& x, float timestep, const CondBundle& cond,
                                     const kv::AssembledWindow& window) const {
    const std::size_t tpc = config_.tokens_per_chunk;
    if (x.rows() != tpc) throw ShapeError("forward_cached: chunk rows != tokens_per_chunk");
    if (window.history_k.size() != config_.n_layers) throw ContractError("forward_cached: window layer count mismatch");
    const RowGroup group{0, tpc, timestep, &cond};
    const BoolMask mask = window.current_rows(tpc);
    return forward(x, std::span(&group, 1), window.current_positions, &window.history_k, &window.history_v,
                   &window.ref_k, &window.ref_v, mask);
}

void ToyDit::for_each_parameter(const std::function<void(const std::string&, Tensor2D&)>& fn) {
    fn("time.w1", time_.w1);
    fn("time.b1", time_.b1);
    fn("time.w2", time_.w2);
    fn("time.b2", time_.b2);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        auto& b = blocks_[l];
        const std::string p = "blocks." + std::to_string(l) + ".";
        fn(p + "ada_w", b.ada_w);
        fn(p + "ada_b", b.ada_b);
        fn(p + "norm_attn", b.norm_attn);
        fn(p + "norm_cross", b.norm_cross);
        fn(p + "norm_ffn", b.norm_ffn);
        fn(p + "q_norm", b.q_norm);
        fn(p + "wq", b.wq);
        fn(p + "wk", b.wk);
        fn(p + "wv", b.wv);
        fn(p + "wo", b.wo);
        fn(p + "wq_cross", b.wq_cross);
        fn(p + "wk_txt", b.wk_txt);
        fn(p + "wv_txt", b.wv_txt);
        if (b.speak) {
            fn(p + "speak.wk", b.speak->wk);
            fn(p + "speak.wv", b.speak->wv);
        }
        if (b.listen) {
            fn(p + "listen.wk", b.listen->wk);
            fn(p + "listen.wv", b.listen->wv);
        }
        fn(p + "wo_txt", b.wo_txt);
        fn(p + "wo_aud", b.wo_aud);
        fn(p + "ffn.w1", b.w1);
        fn(p + "ffn.w2", b.w2);
    }
}

void ToyDit::for_each_parameter(const std::function<void(const std::string&, const Tensor2D&)>& fn) const {
    const_cast<ToyDit*>(this)->for_each_parameter(
        [&](const std::string& name, Tensor2D& t) { fn(name, static_cast<const Tensor2D&>(t)); });
}

Checkpoint ToyDit::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.meta["kind"] = "toydit";
    ckpt.meta["config"] = config_;
    for_each_parameter([&](const std::string& name, const Tensor2D& t) { ckpt.tensors.push_back({name, t}); });
    return ckpt;
}

ToyDit ToyDit::from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.meta.value("kind", "") != "toydit") throw FormatError("checkpoint is not a toydit model");
    ToyDit model(ckpt.meta.at("config").get<ModelConfig>());
    model.for_each_parameter([&](const std::string& name, Tensor2D& t) {
        const Tensor2D& src = ckpt.at(name);
        if (src.rows() != t.rows() || src.cols() != t.cols()) throw FormatError("checkpoint: shape mismatch for " + name);
        t = src;
    });
    return model;
}

std::uint64_t ToyDit::weight_hash() const {
    std::uint64_t h = hash_bytes("toydit");
    for_each_parameter([&](const std::string& name, const Tensor2D& t) { h = hash_tensor(t, hash_bytes(name, h)); });
    return h;
}

std::vector<kv::KvEntry> export_kv(const ForwardResult& result, std::int64_t chunk_index, kv::KvVariant variant,
                                   std::size_t first_row, std::size_t count) {
    std::vector<kv::KvEntry> out;
    for (std::size_t l = 0; l < result.k_pre.size(); ++l) {
        out.push_back({chunk_index, l, variant, result.k_pre[l].slice_rows(first_row, count),
                       result.v_pre[l].slice_rows(first_row, count), SpanKind::Video});
    }
    return out;
}

}  // namespace lpm::dit
