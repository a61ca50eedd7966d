#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "lpm/latcore/tensor.hpp"

namespace lpm {

// One generation unit: a fixed block of latent tokens (n_tokens x d_model).
struct LatentChunk {
    std::int64_t chunk_index = 0;
    Tensor2D tokens;
    float timestep = 0.0f;
};

enum class SpanKind { Video, Reference, Sink };

std::string_view to_string(SpanKind kind);

struct TokenSpan {
    std::size_t start = 0;
    std::size_t len = 0;
    SpanKind kind = SpanKind::Video;

    std::size_t end() const { return start + len; }
};

// True when spans are pairwise disjoint and exactly tile [0, total).
bool spans_partition(std::span<const TokenSpan> spans, std::size_t total);

// FNV-1a over the raw f32 bit patterns.
std::uint64_t hash_floats(std::span<const float> values, std::uint64_t seed = 0xcbf29ce484222325ull);
std::uint64_t hash_tensor(const Tensor2D& t, std::uint64_t seed = 0xcbf29ce484222325ull);
std::uint64_t hash_bytes(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace lpm
