#include "lpm/ropekit/rope.hpp"

#include <cmath>
#include <set>
#include <string>

#include "lpm/latcore/errors.hpp"

namespace lpm::rope {

RopeParams RopeParams::temporal(std::size_t head_dim, double base) {
    RopeParams p;
    p.head_dim = head_dim;
    p.base = base;
    p.t_dim = head_dim;
    p.h_dim = 0;
    p.w_dim = 0;
    return p;
}

void RopeParams::validate() const {
    if (head_dim == 0 || head_dim % 2 != 0) throw ConfigError("rope: head_dim must be even and positive");
    if (t_dim % 2 != 0 || h_dim % 2 != 0 || w_dim % 2 != 0) throw ConfigError("rope: axis dims must be even");
    if (t_dim + h_dim + w_dim != head_dim) throw ConfigError("rope: axis dims must sum to head_dim");
    if (!(base > 0.0)) throw ConfigError("rope: base must be positive");
}

namespace {

// Rotates pairs (2k, 2k+1) of one axis slice. Angles are formed in double so
// large offset positions (1e4+) keep their precision.
void rotate_axis(std::span<float> v, std::size_t begin, std::size_t dim, std::int64_t pos, double base) {
    if (dim == 0 || pos == 0) return;
    for (std::size_t k = 0; k < dim / 2; ++k) {
        const double freq = std::pow(base, -static_cast<double>(2 * k) / static_cast<double>(dim));
        const double angle = static_cast<double>(pos) * freq;
        const auto c = static_cast<float>(std::cos(angle));
        const auto s = static_cast<float>(std::sin(angle));
        float& a = v[begin + 2 * k];
        float& b = v[begin + 2 * k + 1];
        const float a0 = a;
        const float b0 = b;
        a = a0 * c - b0 * s;
        b = a0 * s + b0 * c;
    }
}

}  // namespace

Tensor2D apply_rope(const Tensor2D& x, std::span<const Position3> positions, const RopeParams& params) {
    params.validate();
    if (x.rows() != positions.size()) {
        throw ShapeError("apply_rope: " + std::to_string(x.rows()) + " rows vs " + std::to_string(positions.size()) +
                         " positions");
    }
    if (x.rows() > 0 && x.cols() % params.head_dim != 0) {
        throw ShapeError("apply_rope: row width not a multiple of head_dim");
    }
    Tensor2D out = x;
    const std::size_t heads = x.rows() > 0 ? x.cols() / params.head_dim : 0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = out.row(r);
        const auto& p = positions[r];
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * params.head_dim;
            rotate_axis(row, off, params.t_dim, p.t, params.base);
            rotate_axis(row, off + params.t_dim, params.h_dim, p.h, params.base);
            rotate_axis(row, off + params.t_dim + params.h_dim, params.w_dim, p.w, params.base);
        }
    }
    return out;
}

Tensor2D reapply_positions(const Tensor2D& pre_rope_k, std::span<const Position3> new_positions,
                           const RopeParams& params) {
    return apply_rope(pre_rope_k, new_positions, params);
}

std::string_view to_string(RefType type) {
    switch (type) {
        case RefType::Expression: return "expression";
        case RefType::View: return "view";
        case RefType::SinkRef: return "sink_ref";
    }
    return "?";
}

SegmentOffsets SegmentOffsets::defaults() {
    SegmentOffsets offs;
    offs.types[RefType::Expression] = {10000, 8};
    offs.types[RefType::View] = {20000, 4};
    offs.types[RefType::SinkRef] = {30000, 4};
    offs.sub_stride = 100;
    return offs;
}

void SegmentOffsets::validate(std::int64_t max_video_len) const {
    std::set<std::int64_t> seen;
    for (const auto& [type, entry] : types) {
        if (entry.base_offset < max_video_len) {
            throw ConfigError("segment offsets: base offset for " + std::string(to_string(type)) +
                              " collides with video positions");
        }
        for (std::int64_t j = 1; j <= entry.max_sub_index; ++j) {
            if (!seen.insert(entry.base_offset + sub_offset(j)).second) {
                throw ConfigError("segment offsets: duplicate offset for " + std::string(to_string(type)) +
                                  " sub " + std::to_string(j));
            }
        }
    }
}

Position3 ref_position(std::int64_t video_t_len, RefType ref_type, std::int64_t sub_index, const SegmentOffsets& offs,
                       std::int64_t h, std::int64_t w) {
    auto it = offs.types.find(ref_type);
    if (it == offs.types.end()) {
        throw ConfigError("ref_position: reference type '" + std::string(to_string(ref_type)) + "' not registered");
    }
    return {video_t_len + it->second.base_offset + offs.sub_offset(sub_index), h, w};
}

}  // namespace lpm::rope
