#include "lpm/latcore/latent.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

namespace lpm {

std::string_view to_string(SpanKind kind) {
    switch (kind) {
        case SpanKind::Video: return "video";
        case SpanKind::Reference: return "reference";
        case SpanKind::Sink: return "sink";
    }
    return "?";
}

bool spans_partition(std::span<const TokenSpan> spans, std::size_t total) {
    std::vector<TokenSpan> sorted(spans.begin(), spans.end());
    std::sort(sorted.begin(), sorted.end(), [](const TokenSpan& a, const TokenSpan& b) { return a.start < b.start; });
    std::size_t cursor = 0;
    for (const auto& s : sorted) {
        if (s.start != cursor) return false;
        cursor = s.end();
    }
    return cursor == total;
}

namespace {
constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;
}

std::uint64_t hash_floats(std::span<const float> values, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (float v : values) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        for (int b = 0; b < 4; ++b) {
            h ^= (bits >> (8 * b)) & 0xffu;
            h *= kFnvPrime;
        }
    }
    return h;
}

std::uint64_t hash_tensor(const Tensor2D& t, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (std::uint64_t dim : {static_cast<std::uint64_t>(t.rows()), static_cast<std::uint64_t>(t.cols())}) {
        for (int b = 0; b < 8; ++b) {
            h ^= (dim >> (8 * b)) & 0xffu;
            h *= kFnvPrime;
        }
    }
    return hash_floats(t.values(), h);
}

std::uint64_t hash_bytes(std::string_view bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= kFnvPrime;
    }
    return h;
}

}  // namespace lpm
