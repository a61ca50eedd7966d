// Shared fixtures and oracles for the test binaries and the acceptance check.
#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "lpm/denoise/generate.hpp"
#include "lpm/kvcache/cache.hpp"
#include "lpm/maskgen/masks.hpp"
#include "lpm/toydit/model.hpp"

namespace lpm::testing {

inline dit::ModelConfig tiny_config() {
    dit::ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.tokens_per_chunk = 4;
    c.d_cond = 8;
    c.d_time = 8;
    return c;
}

inline Tensor2D gaussian(std::size_t r, std::size_t c, std::mt19937_64& rng, float sd = 1.0f) {
    std::normal_distribution<float> n(0.0f, sd);
    Tensor2D t(r, c);
    for (float& v : t.values()) v = n(rng);
    return t;
}

inline dit::CondBundle random_cond(const dit::ModelConfig& cfg, std::mt19937_64& rng, std::size_t n_text = 3,
                                   std::size_t n_frames = 24) {
    dit::CondBundle c;
    c.text_tokens = gaussian(n_text, cfg.d_cond, rng);
    c.speak_audio = gaussian(n_frames, cfg.d_cond, rng);
    c.listen_audio = gaussian(n_frames, cfg.d_cond, rng);
    return c;
}

// Streams chunks through a pre-RoPE cache exactly as the generator does,
// keeping each chunk's per-layer hidden inputs so an oracle can rebuild the
// same window from scratch.
struct StreamHarness {
    const dit::ToyDit& model;
    kv::RetentionPolicy policy;
    kv::KvCache cache;
    dit::ReferenceContext refs;
    bool has_refs = false;
    struct Step {
        Tensor2D x;
        float t = 0.0f;
        std::vector<Tensor2D> block_inputs;
        Tensor2D out;
    };
    std::vector<Step> steps;

    StreamHarness(const dit::ToyDit& m, kv::RetentionPolicy p, const dit::ReferenceSet* ref_set)
        : model(m), policy(p), cache(kv::KvVariant::Noisy, m.config().n_layers, m.config().tokens_per_chunk) {
        if (ref_set != nullptr && ref_set->size() > 0) {
            const auto t_len = denoise::reference_video_len(policy, m.config().tokens_per_chunk);
            const auto pos = dit::reference_positions(*ref_set, t_len, rope::SegmentOffsets::defaults());
            refs = m.reference_context(*ref_set, pos);
            std::vector<kv::KvEntry> entries;
            for (std::size_t l = 0; l < m.config().n_layers; ++l)
                entries.push_back({-1, l, kv::KvVariant::Noisy, refs.forward.k_pre[l], refs.forward.v_pre[l],
                                   SpanKind::Reference});
            cache.set_references(std::move(entries), pos);
            has_refs = true;
        }
    }

    const Tensor2D& push(const Tensor2D& x, float t, const dit::CondBundle& cond) {
        const auto index = static_cast<std::int64_t>(steps.size());
        const auto window = cache.assemble_window(index, policy, model.rope_params());
        auto res = model.forward_cached(x, t, cond, window);
        for (auto& e : dit::export_kv(res, index, kv::KvVariant::Noisy, 0, model.config().tokens_per_chunk))
            cache.insert(std::move(e));
        cache.evict_for(index + 1, policy);
        steps.push_back({x, t, res.block_inputs, res.out});
        return steps.back().out;
    }
};

// Recomputes chunk `current` over its retained window without touching the
// cache: every layer rebuilds keys and values from the stored hidden inputs of
// the retained chunks, rotates them at window positions and runs a dense
// masked attention over [retained video | references].
inline Tensor2D recompute_window(const StreamHarness& h, std::int64_t current, const dit::CondBundle& cond) {
    const auto& cfg = h.model.config();
    const std::size_t tpc = cfg.tokens_per_chunk;
    const auto retained = kv::retained_set(current, h.policy);
    const std::size_t n_ref = h.has_refs ? h.refs.positions.size() : 0;
    const auto full_mask = mask::windowed_context_mask(retained, tpc, n_ref);
    const auto mask = full_mask.slice_rows(0, retained.size() * tpc);
    const auto positions = kv::window_positions(retained, tpc);

    std::vector<dit::RowGroup> groups;
    for (std::size_t s = 0; s < retained.size(); ++s)
        groups.push_back({s * tpc, tpc, h.steps[static_cast<std::size_t>(retained[s])].t, &cond});

    Tensor2D cur = h.steps[static_cast<std::size_t>(current)].x;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        std::vector<Tensor2D> rows;
        for (std::size_t s = 0; s + 1 < retained.size(); ++s)
            rows.push_back(h.steps[static_cast<std::size_t>(retained[s])].block_inputs[l]);
        rows.push_back(cur);
        const Tensor2D hin = vstack(rows);
        dit::BlockContext ctx{groups, positions, {}, &mask};
        if (h.has_refs) {
            ctx.kv.suffix_k = &h.refs.k_rot[l];
            ctx.kv.suffix_v = &h.refs.v[l];
        }
        const auto b = h.model.forward_block(l, hin, ctx);
        cur = b.h.slice_rows((retained.size() - 1) * tpc, tpc);
    }
    return cur;
}

}  // namespace lpm::testing
