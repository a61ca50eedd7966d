#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string_view>
#include <vector>

#include "lpm/latcore/tensor.hpp"

namespace lpm::rope {

// Head dimension split across the temporal/height/width axes. Each axis
// slice is rotated pairwise with angle pos / base^(2k / axis_dim).
struct RopeParams {
    std::size_t head_dim = 16;
    double base = 10000.0;
    std::size_t t_dim = 16;
    std::size_t h_dim = 0;
    std::size_t w_dim = 0;

    // 1-D token stream: every dimension on the temporal axis.
    static RopeParams temporal(std::size_t head_dim, double base = 10000.0);

    // Throws ConfigError on odd dims or a split that does not sum to head_dim.
    void validate() const;
};

struct Position3 {
    std::int64_t t = 0;
    std::int64_t h = 0;
    std::int64_t w = 0;

    friend bool operator==(const Position3&, const Position3&) = default;
};

// Rotates every head_dim-wide block of each row of x at that row's position.
// x.cols() must be a multiple of head_dim; |positions| must equal x.rows().
Tensor2D apply_rope(const Tensor2D& x, std::span<const Position3> positions, const RopeParams& params);

// Re-rotates stored pre-rotation keys at fresh positions. Same arithmetic as
// apply_rope; the input must be an un-rotated copy.
Tensor2D reapply_positions(const Tensor2D& pre_rope_k, std::span<const Position3> new_positions,
                           const RopeParams& params);

enum class RefType { Expression, View, SinkRef };

std::string_view to_string(RefType type);

// Temporal offsets for reference tokens: t = video_t_len + o_i + so_j with
// so_j = sub_stride * j.
struct SegmentOffsets {
    struct Entry {
        std::int64_t base_offset = 0;
        std::int64_t max_sub_index = 0;
    };
    std::map<RefType, Entry> types;
    std::int64_t sub_stride = 100;

    // expression o=10000 (sub 1-8), view o=20000 (sub 1-4), sink-ref o=30000 (sub 1-4).
    static SegmentOffsets defaults();

    std::int64_t sub_offset(std::int64_t sub_index) const { return sub_stride * sub_index; }

    // Throws ConfigError unless every (type, sub) pair maps to a distinct
    // offset and all offsets are >= max_video_len.
    void validate(std::int64_t max_video_len) const;
};

Position3 ref_position(std::int64_t video_t_len, RefType ref_type, std::int64_t sub_index, const SegmentOffsets& offs,
                       std::int64_t h = 0, std::int64_t w = 0);

}  // namespace lpm::rope
