#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string_view>
#include <tuple>
#include <vector>

#include "lpm/latcore/latent.hpp"
#include "lpm/latcore/tensor.hpp"
#include "lpm/ropekit/rope.hpp"

namespace lpm::kv {

// Noisy history feeds the backbone, clean history feeds the refiner.
enum class KvVariant { Noisy, Clean };

std::string_view to_string(KvVariant v);

struct KvEntry {
    std::int64_t chunk_index = 0;
    std::size_t layer = 0;
    KvVariant variant = KvVariant::Noisy;
    Tensor2D k_pre;  // keys before rotary rotation
    Tensor2D v_pre;
    SpanKind kind = SpanKind::Video;
};

struct RetentionPolicy {
    std::size_t sink_chunks = 3;
    // Sliding part of the window, counting the current chunk.
    std::size_t recent_chunks = 2;

    void validate() const;
    std::size_t window_chunks() const { return sink_chunks + recent_chunks; }
};

// {0 .. min(sink, current+1)-1} U {current-recent+1 .. current}, ascending.
std::vector<std::int64_t> retained_set(std::int64_t current_index, const RetentionPolicy& policy);

// Rotated history for one query chunk. Column order everywhere is
// [retained chunks ascending (current last)] then [reference tokens].
struct AssembledWindow {
    std::int64_t current_index = 0;
    std::vector<std::int64_t> retained;
    std::vector<Tensor2D> history_k;  // per layer, rotated; rows = retained minus current
    std::vector<Tensor2D> history_v;
    std::vector<Tensor2D> ref_k;  // per layer, rotated
    std::vector<Tensor2D> ref_v;
    std::vector<rope::Position3> video_positions;  // every retained token, window order
    std::vector<rope::Position3> current_positions;
    std::vector<rope::Position3> ref_positions;
    BoolMask mask;  // full window mask (video rows then reference rows)

    std::size_t history_rows() const { return history_k.empty() ? 0 : history_k.front().rows(); }
    // Mask rows belonging to the current chunk's queries.
    BoolMask current_rows(std::size_t tokens_per_chunk) const;
};

// Window-local temporal position of every token in the retained chunks:
// slot s of the ascending retained list covers [s*tpc, (s+1)*tpc). Sinks sit
// at slots equal to their chunk index, so they keep their absolute positions.
std::vector<rope::Position3> window_positions(std::span<const std::int64_t> retained, std::size_t tokens_per_chunk);

struct CacheStats {
    std::size_t entries = 0;
    std::size_t stored_floats = 0;
    std::size_t peak_floats = 0;
    std::vector<std::int64_t> chunks;
};

// Pre-RoPE key/value store for one history variant of one session.
// Single writer; readers may run between mutations.
class KvCache {
public:
    KvCache(KvVariant variant, std::size_t n_layers, std::size_t tokens_per_chunk);

    KvVariant variant() const { return variant_; }
    std::size_t n_layers() const { return n_layers_; }
    std::size_t tokens_per_chunk() const { return tokens_per_chunk_; }

    // Throws ContractError on a duplicate (chunk, layer) or a foreign variant.
    void insert(KvEntry entry);
    // Reference K/V per layer plus their positions; constant for the session.
    void set_references(std::vector<KvEntry> per_layer, std::vector<rope::Position3> positions);
    bool has_references() const { return !refs_.empty(); }

    // Drops every chunk outside retained_set(current_index). References stay.
    void evict_for(std::int64_t current_index, const RetentionPolicy& policy);

    // Throws CacheMissError if any retained history chunk is absent.
    AssembledWindow assemble_window(std::int64_t current_index, const RetentionPolicy& policy,
                                    const rope::RopeParams& rope_params) const;

    bool contains(std::int64_t chunk, std::size_t layer) const;
    const KvEntry& entry(std::int64_t chunk, std::size_t layer) const;
    const KvEntry& reference(std::size_t layer) const;
    std::vector<std::int64_t> stored_chunks() const;
    CacheStats stats() const;

    // Debug dump: <dir>/index.json plus <dir>/kv.bin (little-endian f32).
    void dump_snapshot(const std::filesystem::path& dir) const;

private:
    std::size_t count_floats() const;

    KvVariant variant_;
    std::size_t n_layers_;
    std::size_t tokens_per_chunk_;
    std::map<std::pair<std::int64_t, std::size_t>, KvEntry> entries_;
    std::vector<KvEntry> refs_;
    std::vector<rope::Position3> ref_positions_;
    std::size_t peak_floats_ = 0;
};

}  // namespace lpm::kv
