#include "lpm/maskgen/masks.hpp"

#include <algorithm>
#include <cmath>

#include "lpm/latcore/errors.hpp"

namespace lpm::mask {

void AudioWindowSpec::validate() const {
    if (!(speak_window >= 1.0) || !(listen_window >= 1.0)) throw ConfigError("audio window: widths must be >= 1");
    if (!(listen_window > speak_window)) throw ConfigError("audio window: listen_window must exceed speak_window");
}

BoolMask chunk_causal_mask(std::size_t n_chunks, std::size_t tokens_per_chunk, std::size_t n_ref_tokens) {
    const std::size_t n_video = n_chunks * tokens_per_chunk;
    const std::size_t n = n_video + n_ref_tokens;
    if (n == 0) throw ShapeError("chunk_causal_mask: zero-size sequence");

    BoolMask m(n, n);
    for (std::size_t q = 0; q < n; ++q) {
        const bool q_is_ref = q >= n_video;
        for (std::size_t k = 0; k < n; ++k) {
            const bool k_is_ref = k >= n_video;
            bool allowed;
            if (q_is_ref) {
                allowed = k_is_ref;
            } else {
                allowed = k_is_ref || (k / tokens_per_chunk) <= (q / tokens_per_chunk);
            }
            m.set(q, k, allowed);
        }
    }
    return m;
}

BoolMask windowed_context_mask(std::span<const std::int64_t> retained_chunks, std::size_t tokens_per_chunk,
                               std::size_t n_ref_tokens) {
    if (retained_chunks.empty()) throw ContractError("windowed_context_mask: empty retained set");
    if (!std::is_sorted(retained_chunks.begin(), retained_chunks.end()) ||
        std::adjacent_find(retained_chunks.begin(), retained_chunks.end()) != retained_chunks.end()) {
        throw ContractError("windowed_context_mask: retained set must be strictly ascending");
    }
    const std::size_t n_video = retained_chunks.size() * tokens_per_chunk;
    const std::size_t n = n_video + n_ref_tokens;
    if (n == 0) throw ShapeError("windowed_context_mask: zero-size sequence");

    BoolMask m(n, n);
    for (std::size_t q = 0; q < n; ++q) {
        const bool q_is_ref = q >= n_video;
        for (std::size_t k = 0; k < n; ++k) {
            const bool k_is_ref = k >= n_video;
            bool allowed;
            if (q_is_ref) {
                allowed = k_is_ref;
            } else if (k_is_ref) {
                allowed = true;
            } else {
                allowed = retained_chunks[k / tokens_per_chunk] <= retained_chunks[q / tokens_per_chunk];
            }
            m.set(q, k, allowed);
        }
    }
    return m;
}

BoolMask audio_window_mask(std::size_t n_video_tokens, double video_rate, std::size_t n_audio_frames, double audio_fps,
                           double window, double audio_start_s) {
    if (!(video_rate > 0.0) || !(audio_fps > 0.0)) throw ConfigError("audio_window_mask: rates must be positive");
    BoolMask m(n_video_tokens, n_audio_frames);
    if (n_audio_frames == 0) return m;
    constexpr double kSlack = 1e-9;
    for (std::size_t i = 0; i < n_video_tokens; ++i) {
        const double tau = static_cast<double>(i) / video_rate;
        // Distance in frame units keeps the comparison exact for integer grids.
        const double center = (tau - audio_start_s) * audio_fps;
        for (std::size_t f = 0; f < n_audio_frames; ++f) {
            if (std::isinf(window) || std::fabs(static_cast<double>(f) - center) <= window + kSlack) m.set(i, f, true);
        }
        const auto nearest = static_cast<std::size_t>(
            std::clamp(std::llround(center), 0LL, static_cast<long long>(n_audio_frames) - 1));
        m.set(i, nearest, true);
    }
    return m;
}

}  // namespace lpm::mask
