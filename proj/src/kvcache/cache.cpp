#include "lpm/kvcache/cache.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "lpm/latcore/checkpoint.hpp"
#include "lpm/latcore/errors.hpp"
#include "lpm/maskgen/masks.hpp"

namespace lpm::kv {

std::string_view to_string(KvVariant v) { return v == KvVariant::Noisy ? "noisy" : "clean"; }

void RetentionPolicy::validate() const {
    if (recent_chunks < 1) throw ConfigError("retention: recent_chunks must be >= 1");
}

std::vector<std::int64_t> retained_set(std::int64_t current_index, const RetentionPolicy& policy) {
    if (current_index < 0) throw ContractError("retained_set: negative chunk index");
    std::set<std::int64_t> keep;
    const auto sinks = std::min<std::int64_t>(static_cast<std::int64_t>(policy.sink_chunks), current_index + 1);
    for (std::int64_t c = 0; c < sinks; ++c) keep.insert(c);
    const std::int64_t first_recent = std::max<std::int64_t>(0, current_index - static_cast<std::int64_t>(policy.recent_chunks) + 1);
    for (std::int64_t c = first_recent; c <= current_index; ++c) keep.insert(c);
    return {keep.begin(), keep.end()};
}

std::vector<rope::Position3> window_positions(std::span<const std::int64_t> retained, std::size_t tokens_per_chunk) {
    std::vector<rope::Position3> out;
    out.reserve(retained.size() * tokens_per_chunk);
    for (std::size_t slot = 0; slot < retained.size(); ++slot) {
        for (std::size_t i = 0; i < tokens_per_chunk; ++i) {
            out.push_back({static_cast<std::int64_t>(slot * tokens_per_chunk + i), 0, 0});
        }
    }
    return out;
}

BoolMask AssembledWindow::current_rows(std::size_t tokens_per_chunk) const {
    return mask.slice_rows(history_rows(), tokens_per_chunk);
}

KvCache::KvCache(KvVariant variant, std::size_t n_layers, std::size_t tokens_per_chunk)
    : variant_(variant), n_layers_(n_layers), tokens_per_chunk_(tokens_per_chunk) {}

void KvCache::insert(KvEntry entry) {
    if (entry.variant != variant_) {
        throw ContractError("kv insert: " + std::string(to_string(entry.variant)) + " entry into " +
                            std::string(to_string(variant_)) + " cache");
    }
    if (entry.layer >= n_layers_) throw ContractError("kv insert: layer out of range");
    if (entry.k_pre.rows() != tokens_per_chunk_ || entry.v_pre.rows() != tokens_per_chunk_) {
        throw ShapeError("kv insert: entry rows != tokens_per_chunk");
    }
    const auto key = std::make_pair(entry.chunk_index, entry.layer);
    if (entries_.contains(key)) {
        throw ContractError("kv insert: duplicate entry for chunk " + std::to_string(entry.chunk_index) + " layer " +
                            std::to_string(entry.layer));
    }
    entries_.emplace(key, std::move(entry));
    peak_floats_ = std::max(peak_floats_, count_floats());
}

void KvCache::set_references(std::vector<KvEntry> per_layer, std::vector<rope::Position3> positions) {
    if (per_layer.size() != n_layers_) throw ContractError("kv references: need one entry per layer");
    for (auto& e : per_layer) {
        if (e.variant != variant_) throw ContractError("kv references: variant mismatch");
        if (e.k_pre.rows() != positions.size()) throw ShapeError("kv references: rows != positions");
        e.kind = SpanKind::Reference;
    }
    refs_ = std::move(per_layer);
    ref_positions_ = std::move(positions);
    peak_floats_ = std::max(peak_floats_, count_floats());
}

void KvCache::evict_for(std::int64_t current_index, const RetentionPolicy& policy) {
    const auto keep = retained_set(current_index, policy);
    std::erase_if(entries_, [&](const auto& kv) {
        return !std::binary_search(keep.begin(), keep.end(), kv.first.first);
    });
}

AssembledWindow KvCache::assemble_window(std::int64_t current_index, const RetentionPolicy& policy,
                                         const rope::RopeParams& rope_params) const {
    AssembledWindow w;
    w.current_index = current_index;
    w.retained = retained_set(current_index, policy);
    w.video_positions = window_positions(w.retained, tokens_per_chunk_);
    w.current_positions.assign(w.video_positions.end() - static_cast<std::ptrdiff_t>(tokens_per_chunk_),
                               w.video_positions.end());
    w.ref_positions = ref_positions_;
    w.mask = mask::windowed_context_mask(w.retained, tokens_per_chunk_, ref_positions_.size());

    const std::size_t n_hist = w.retained.size() - 1;
    const std::vector<rope::Position3> hist_positions(w.video_positions.begin(),
                                                      w.video_positions.begin() +
                                                          static_cast<std::ptrdiff_t>(n_hist * tokens_per_chunk_));
    for (std::size_t layer = 0; layer < n_layers_; ++layer) {
        std::vector<Tensor2D> ks;
        std::vector<Tensor2D> vs;
        for (std::size_t s = 0; s < n_hist; ++s) {
            const auto it = entries_.find({w.retained[s], layer});
            if (it == entries_.end()) {
                throw CacheMissError("kv " + std::string(to_string(variant_)) + ": chunk " +
                                     std::to_string(w.retained[s]) + " layer " + std::to_string(layer) +
                                     " not cached for current chunk " + std::to_string(current_index));
            }
            ks.push_back(it->second.k_pre);
            vs.push_back(it->second.v_pre);
        }
        w.history_k.push_back(rope::reapply_positions(vstack(ks), hist_positions, rope_params));
        w.history_v.push_back(vstack(vs));
        if (!refs_.empty()) {
            w.ref_k.push_back(rope::reapply_positions(refs_[layer].k_pre, ref_positions_, rope_params));
            w.ref_v.push_back(refs_[layer].v_pre);
        } else {
            w.ref_k.emplace_back();
            w.ref_v.emplace_back();
        }
    }
    return w;
}

bool KvCache::contains(std::int64_t chunk, std::size_t layer) const { return entries_.contains({chunk, layer}); }

const KvEntry& KvCache::entry(std::int64_t chunk, std::size_t layer) const {
    const auto it = entries_.find({chunk, layer});
    if (it == entries_.end()) throw CacheMissError("kv: chunk " + std::to_string(chunk) + " not cached");
    return it->second;
}

const KvEntry& KvCache::reference(std::size_t layer) const {
    if (layer >= refs_.size()) throw CacheMissError("kv: references not set");
    return refs_[layer];
}

std::vector<std::int64_t> KvCache::stored_chunks() const {
    std::vector<std::int64_t> out;
    for (const auto& [key, e] : entries_) {
        if (out.empty() || out.back() != key.first) out.push_back(key.first);
    }
    return out;
}

std::size_t KvCache::count_floats() const {
    std::size_t n = 0;
    for (const auto& [key, e] : entries_) n += e.k_pre.size() + e.v_pre.size();
    for (const auto& e : refs_) n += e.k_pre.size() + e.v_pre.size();
    return n;
}

CacheStats KvCache::stats() const {
    return {entries_.size(), count_floats(), peak_floats_, stored_chunks()};
}

void KvCache::dump_snapshot(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json index;
    index["variant"] = to_string(variant_);
    index["n_layers"] = n_layers_;
    index["tokens_per_chunk"] = tokens_per_chunk_;
    index["entries"] = nlohmann::json::array();
    std::string blob;
    auto add = [&](const KvEntry& e, const char* kind) {
        const std::size_t k_off = blob.size() / 4;
        append_f32_le(blob, e.k_pre.values());
        const std::size_t v_off = blob.size() / 4;
        append_f32_le(blob, e.v_pre.values());
        index["entries"].push_back({{"kind", kind},
                                    {"chunk", e.chunk_index},
                                    {"layer", e.layer},
                                    {"shape", {e.k_pre.rows(), e.k_pre.cols()}},
                                    {"k_offset", k_off},
                                    {"v_offset", v_off}});
    };
    for (const auto& [key, e] : entries_) add(e, "video");
    for (const auto& e : refs_) add(e, "reference");
    {
        std::ofstream out(dir / "kv.bin", std::ios::binary | std::ios::trunc);
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
    std::ofstream out(dir / "index.json", std::ios::trunc);
    out << index.dump(2) << '\n';
}

}  // namespace lpm::kv
