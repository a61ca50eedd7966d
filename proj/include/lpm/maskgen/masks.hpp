#pragma once

#include <cstdint>
#include <limits>
#include <span>

#include "lpm/latcore/tensor.hpp"

namespace lpm::mask {

// Audio cross-attention half-widths in audio frames.
struct AudioWindowSpec {
    double speak_window = 3.0;
    double listen_window = 12.0;

    void validate() const;
};

inline constexpr double kGlobalWindow = std::numeric_limits<double>::infinity();

// Sequence layout: n_chunks * tokens_per_chunk video tokens in chunk order,
// then n_ref_tokens reference tokens. Video queries see every token of chunks
// <= their own plus all references; reference queries see references only.
BoolMask chunk_causal_mask(std::size_t n_chunks, std::size_t tokens_per_chunk, std::size_t n_ref_tokens);

// Same rule over a sparse, sorted set of retained chunk indices. Columns and
// rows exist only for retained chunks (in ascending order) followed by refs.
BoolMask windowed_context_mask(std::span<const std::int64_t> retained_chunks, std::size_t tokens_per_chunk,
                               std::size_t n_ref_tokens);

// Video token i sits at time i / video_rate; audio frame f at
// audio_start_s + f / audio_fps. A pair is attendable when the distance is at
// most window / audio_fps; the nearest frame is always attendable.
BoolMask audio_window_mask(std::size_t n_video_tokens, double video_rate, std::size_t n_audio_frames, double audio_fps,
                           double window, double audio_start_s = 0.0);

}  // namespace lpm::mask
