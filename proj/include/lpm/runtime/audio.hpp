#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lpm/latcore/tensor.hpp"

namespace lpm::runtime {

inline constexpr std::size_t kDefaultSampleRate = 16000;
inline constexpr std::int64_t kHistorySeconds = 2;

// Mono sample stream on the session timeline; second k starts at sample k*sr.
// Blocks may arrive out of order; gaps read as silence.
class AudioBuffer {
public:
    explicit AudioBuffer(std::size_t sample_rate = kDefaultSampleRate) : sr_(sample_rate) {}

    std::size_t sample_rate() const { return sr_; }
    // Writes samples starting at second k.
    void write_block(std::int64_t k, std::span<const float> samples);
    // Samples known so far (absolute index one past the last written).
    std::int64_t end_sample() const { return base_ + static_cast<std::int64_t>(data_.size()); }
    // Absolute sample i, or 0 when outside what is stored.
    float at(std::int64_t i) const;
    // Drops storage before absolute sample i.
    void trim_before(std::int64_t i);
    std::size_t stored_samples() const { return data_.size(); }

private:
    std::size_t sr_;
    std::int64_t base_ = 0;
    std::vector<float> data_;
};

// Seconds [k-2, k+1): two of history, one current. Tagged with its step.
struct AudioWindow {
    std::int64_t k = 0;
    std::int64_t first_sample = 0;  // absolute, may be negative (padding)
    std::size_t sample_rate = kDefaultSampleRate;
    std::vector<float> samples;      // exactly 3 * sample_rate

    std::size_t history_samples() const { return 2 * sample_rate; }
};

// Throws UnderrunError when second k has not fully arrived. History before
// the session start reads as zeros.
AudioWindow chunk_audio(const AudioBuffer& buffer, std::int64_t k);
// Same window with missing samples read as silence; never throws.
AudioWindow chunk_audio_padded(const AudioBuffer& buffer, std::int64_t k);

// Stub audio encoder: frames at frames_per_second, each reduced to sub-bin
// means and RMS, then a fixed random projection and tanh.
class AudioEncoder {
public:
    AudioEncoder(std::size_t d_cond, double frames_per_second, std::uint64_t seed, std::size_t sub_bins = 8);
    Tensor2D encode(const AudioWindow& w) const;  // frames x d_cond

private:
    std::size_t d_cond_;
    double fps_;
    std::size_t sub_bins_;
    Tensor2D projection_;  // 2*sub_bins x d_cond
};

// Stub text encoder: one token per word (at most max_tokens), each a seeded
// Gaussian vector keyed by word and position. Empty prompt -> no tokens.
Tensor2D encode_text(const std::string& prompt, std::size_t d_cond, std::size_t max_tokens = 8);

// Sine burst of the given length at sample rate sr (speech stand-in).
std::vector<float> tone(std::size_t n_samples, std::size_t sr, double freq, double amp, std::int64_t phase_origin = 0);

}  // namespace lpm::runtime
